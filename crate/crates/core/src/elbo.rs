//! Single-sample evidence lower bound and its gradient check.
//!
//! For each sequence: sample `M ~ q(M|X)`, sample `z_t` and `s_t` by
//! reparameterisation along the posterior, and sum
//! `log p(x_t|s_t) - KL_m - KL_z - KL_s` over time with all KLs analytic.
//! COPY steps contribute zero `z`-KL; steps whose boundary the counters
//! force contribute zero boundary-KL.

use candle_core::{DType, Tensor, Var, D};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::boundary::BoundaryTrack;
use crate::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::inference::frozen_indicators;
use crate::model::{Frames, SState, WorldModel, ZState};
use crate::nn::{self, DiagGaussian};

/// Tolerance for the decomposition identity `total = recon - sum(KL)`.
pub const IDENTITY_RTOL: f64 = 1e-5;

/// A batch of equal-length sequences ready for the model.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// Modelled frames `(B, T, H, W, C)`.
    pub frames: Frames,
    /// Optional context frames `(B, T_ctx, H, W, C)` that set `c_0`.
    pub context: Option<Frames>,
    /// Action ids `(B, T)`; `actions[b][t]` led to frame `t`.
    pub actions: Option<Tensor>,
    /// 3x3 goal windows `(B, T, 3, 3, C)` with intensities in `[0, 1]`.
    pub goals: Option<Tensor>,
}

impl SequenceBatch {
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (b, t, ..) = self.frames.data.dims5()?;
        Ok((b, t))
    }

    fn action_column(&self, t: usize) -> Result<Option<Tensor>> {
        Ok(match &self.actions {
            Some(a) => Some(a.narrow(1, t, 1)?.squeeze(1)?.contiguous()?),
            None => None,
        })
    }
}

/// Reparameterisation and Gumbel noise for one ELBO evaluation.
#[derive(Debug, Clone)]
pub struct ElboNoise {
    /// One standard logistic draw per `(b, t)`.
    pub boundary: Vec<f64>,
    pub z: Tensor,
    pub s: Tensor,
}

impl ElboNoise {
    pub fn draw<R: Rng>(rng: &mut R, config: &ModelConfig, batch: usize, steps: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            boundary: nn::logistic_values(rng, batch * steps),
            z: nn::normal_tensor(rng, &[batch, steps, config.z_dim], dtype)?,
            s: nn::normal_tensor(rng, &[batch, steps, config.s_dim], dtype)?,
        })
    }

    /// All-zero noise: posterior means and boundary logits at their mode.
    pub fn zeros(config: &ModelConfig, batch: usize, steps: usize, dtype: DType) -> Result<Self> {
        let dev = &candle_core::Device::Cpu;
        Ok(Self {
            boundary: vec![0.0; batch * steps],
            z: Tensor::zeros((batch, steps, config.z_dim), dtype, dev)?,
            s: Tensor::zeros((batch, steps, config.s_dim), dtype, dev)?,
        })
    }
}

/// Where the boundary indicators come from.
#[derive(Debug, Clone)]
pub enum Boundaries {
    /// Straight-through Gumbel-softmax sample at this temperature.
    Sample { temperature: f64 },
    /// Fixed indicators; no gradient flows through them.
    Frozen(Vec<BoundaryTrack>),
}

/// ELBO decomposition in nats per sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl_boundary: f64,
    pub kl_z: f64,
    pub kl_s: f64,
    pub total: f64,
}

impl ElboTerms {
    /// `|total - (recon - KL_m - KL_z - KL_s)|` relative to the magnitude of the terms.
    pub fn identity_error(&self) -> f64 {
        let rhs = self.reconstruction - self.kl_boundary - self.kl_z - self.kl_s;
        let scale = self.total.abs().max(rhs.abs()).max(1.0);
        (self.total - rhs).abs() / scale
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [
            ("reconstruction", self.reconstruction),
            ("kl_boundary", self.kl_boundary),
            ("kl_z", self.kl_z),
            ("kl_s", self.kl_s),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::non_finite(format!("ELBO term {name}")));
            }
        }
        let err = self.identity_error();
        if err >= IDENTITY_RTOL {
            return Err(Error::InvalidArgument(format!("ELBO decomposition identity violated: relative error {err:e}")));
        }
        Ok(())
    }

    pub fn per_frame(&self, steps: usize) -> Self {
        let k = steps as f64;
        Self {
            reconstruction: self.reconstruction / k,
            kl_boundary: self.kl_boundary / k,
            kl_z: self.kl_z / k,
            kl_s: self.kl_s / k,
            total: self.total / k,
        }
    }

    pub fn mean(items: &[ElboTerms]) -> Self {
        let n = items.len().max(1) as f64;
        let mut acc = Self::default();
        for t in items {
            acc.reconstruction += t.reconstruction / n;
            acc.kl_boundary += t.kl_boundary / n;
            acc.kl_z += t.kl_z / n;
            acc.kl_s += t.kl_s / n;
            acc.total += t.total / n;
        }
        acc
    }
}

/// Distribution pairs kept for diagnostics and Monte Carlo checks.
#[derive(Debug, Clone, Default)]
pub struct ElboTrace {
    /// `(q, p, update gate (B, 1))` per step.
    pub z: Vec<(DiagGaussian, DiagGaussian, Tensor)>,
    /// `(q, p)` per step.
    pub s: Vec<(DiagGaussian, DiagGaussian)>,
    /// Posterior and prior boundary logits and forced mask, each `(B, T)`.
    pub boundary: Option<(Tensor, Tensor, Tensor)>,
}

#[derive(Debug)]
pub struct ElboOutput {
    /// Batch mean of the per-sequence terms.
    pub terms: ElboTerms,
    pub per_sequence: Vec<ElboTerms>,
    /// Differentiable batch-mean total.
    pub total: Tensor,
    /// Differentiable batch-mean reconstruction.
    pub reconstruction: Tensor,
    pub tracks: Vec<BoundaryTrack>,
    /// Detached states the goal extractor is matched against, `(B, T, d)`.
    pub planning_states: Tensor,
    /// Detached decoded means in data space, `(B, T, H, W, C)`.
    pub recon_means: Tensor,
    pub trace: ElboTrace,
}

fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Evaluates the ELBO of `batch` with the given boundary source and noise.
pub fn elbo(model: &WorldModel, batch: &SequenceBatch, boundaries: &Boundaries, noise: &ElboNoise) -> Result<ElboOutput> {
    let (b, t) = batch.dims()?;
    if t == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if model.config().action_conditioned() != batch.actions.is_some() {
        return Err(Error::Config("batch actions do not match the model's action conditioning".into()));
    }
    let enc = model.encode_frames(&batch.frames)?;
    let carry0 = match &batch.context {
        Some(ctx) => model.encode_context(ctx)?,
        None => model.initial_carry(b)?,
    };
    let dtype = model.dtype();
    let zeros_bt = Tensor::zeros((b, t), dtype, model.device())?;

    let mut trace = ElboTrace::default();
    let mut kl_z_steps = Vec::with_capacity(t);
    let mut kl_s_steps = Vec::with_capacity(t);
    let (s_path, tracks, kl_m, planning_states) = match model.config().mode {
        Mode::Hrssm => {
            let (m, forced, tracks, q_logits) = match boundaries {
                Boundaries::Sample { temperature } => {
                    let d = model.decompose(&enc, *temperature, &noise.boundary)?;
                    (d.indicators, d.forced, d.tracks, d.logits)
                }
                Boundaries::Frozen(tracks) => {
                    if tracks.len() != b || tracks.iter().any(|tr| tr.len() != t) {
                        return Err(Error::InvalidArgument("frozen boundaries do not match the batch".into()));
                    }
                    let (m, forced) = frozen_indicators(model, tracks)?;
                    (m, forced, tracks.clone(), model.decomposer_logits(&enc)?)
                }
            };
            let zq = model.infer_z(&enc, &m, &noise.z)?;
            let sq = model.infer_s(&enc, &m, &zq.z, &noise.s)?;
            let mut z_prev = model.initial_z(Some(&carry0), b)?;
            let mut s_prev = SState {
                value: Tensor::zeros((b, model.config().s_dim), dtype, model.device())?,
                carry: Tensor::zeros((b, model.config().hidden), dtype, model.device())?,
            };
            for step in 0..t {
                let gate = &zq.update[step];
                let action = batch.action_column(step)?;
                let zp = model.z_transition(&z_prev, gate, action.as_ref())?;
                let kl = zq.dists[step].kl(&zp.dist)?.broadcast_mul(&gate.squeeze(1)?)?;
                kl_z_steps.push(kl);
                trace.z.push((zq.dists[step].clone(), zp.dist.clone(), gate.clone()));
                z_prev = ZState { value: zq.z[step].clone(), carry: zp.carry };

                let sp = model.s_transition(&s_prev, &zq.z[step], gate)?;
                kl_s_steps.push(sq.dists[step].kl(&sp.dist)?);
                trace.s.push((sq.dists[step].clone(), sp.dist.clone()));
                s_prev = SState { value: sq.s[step].clone(), carry: sp.carry };
            }
            let s_all = Tensor::stack(&sq.s, 1)?;
            let p_logits = model.boundary_logit(&s_all.reshape((b * t, model.config().s_dim))?)?.reshape((b, t))?;
            let free = (forced.ones_like()? - &forced)?;
            let kl_m = (nn::bernoulli_kl_logits(&q_logits, &p_logits)? * free)?;
            trace.boundary = Some((q_logits, p_logits, forced));
            let plan = Tensor::stack(&zq.z, 1)?.detach();
            (sq.s, tracks, kl_m, plan)
        }
        Mode::Rssm => {
            let mut s = model.initial_s(Some(&carry0), b)?;
            let mut path = Vec::with_capacity(t);
            let mut means = Vec::with_capacity(t);
            for step in 0..t {
                let action = batch.action_column(step)?;
                let prior = model.flat_transition(&s, action.as_ref())?;
                let q = model.flat_posterior(&prior.carry, &enc.narrow(1, step, 1)?.squeeze(1)?)?;
                let value = q.sample(&noise.s.narrow(1, step, 1)?.squeeze(1)?)?;
                model.ensure_finite(&value, "posterior s")?;
                kl_s_steps.push(q.kl(&prior.dist)?);
                kl_z_steps.push(Tensor::zeros(b, dtype, model.device())?);
                means.push(q.mean.clone());
                trace.s.push((q, prior.dist.clone()));
                s = SState { value: value.clone(), carry: prior.carry };
                path.push(value);
            }
            let plan = Tensor::stack(&means, 1)?.detach();
            (path, Vec::new(), zeros_bt.clone(), plan)
        }
    };

    let s_all = Tensor::stack(&s_path, 1)?.reshape((b * t, model.config().s_dim))?;
    let obs = model.decode(&s_all)?;
    let (_, _, h, w, c) = batch.frames.data.dims5()?;
    let flat_frames = Frames { data: batch.frames.data.reshape((b * t, h, w, c))?, likelihood: batch.frames.likelihood };
    let recon = obs.log_prob(&flat_frames)?.reshape((b, t))?;
    let kl_z = Tensor::stack(&kl_z_steps, 1)?;
    let kl_s = Tensor::stack(&kl_s_steps, 1)?;

    let per_step_total = (((&recon - &kl_m)? - &kl_z)? - &kl_s)?;
    let seq = |x: &Tensor| x.sum(1);
    let (recon_b, klm_b, klz_b, kls_b, total_b) =
        (seq(&recon)?, seq(&kl_m)?, seq(&kl_z)?, seq(&kl_s)?, seq(&per_step_total)?);
    let columns = [to_vec(&recon_b)?, to_vec(&klm_b)?, to_vec(&klz_b)?, to_vec(&kls_b)?, to_vec(&total_b)?];
    let per_sequence: Vec<ElboTerms> = (0..b)
        .map(|i| ElboTerms {
            reconstruction: columns[0][i],
            kl_boundary: columns[1][i],
            kl_z: columns[2][i],
            kl_s: columns[3][i],
            total: columns[4][i],
        })
        .collect();
    let terms = ElboTerms::mean(&per_sequence);
    for (name, v) in [
        ("reconstruction", terms.reconstruction),
        ("kl_boundary", terms.kl_boundary),
        ("kl_z", terms.kl_z),
        ("kl_s", terms.kl_s),
        ("total", terms.total),
    ] {
        if !v.is_finite() {
            return Err(Error::non_finite(format!("ELBO term {name}")));
        }
    }
    Ok(ElboOutput {
        terms,
        per_sequence,
        total: total_b.mean_all()?,
        reconstruction: recon_b.mean_all()?,
        tracks,
        planning_states,
        recon_means: obs.mean()?.detach().reshape((b, t, h, w, c))?,
        trace,
    })
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter, flat index, analytic, numeric)` per checked coordinate.
    pub coords: Vec<(String, usize, f64, f64)>,
}

/// Denominator floor for relative gradient errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Objective used by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Total,
    Reconstruction,
}

pub fn objective_value(model: &WorldModel, batch: &SequenceBatch, tracks: &[BoundaryTrack], noise: &ElboNoise, objective: Objective) -> Result<Tensor> {
    let out = elbo(model, batch, &Boundaries::Frozen(tracks.to_vec()), noise)?;
    Ok(match objective {
        Objective::Total => out.total,
        Objective::Reconstruction => out.reconstruction,
    })
}

/// Analytic gradients of the objective for every parameter (zeros where no
/// gradient reaches the parameter).
pub fn analytic_gradients(
    model: &WorldModel,
    batch: &SequenceBatch,
    tracks: &[BoundaryTrack],
    noise: &ElboNoise,
    objective: Objective,
) -> Result<Vec<(String, Vec<f64>)>> {
    let value = objective_value(model, batch, tracks, noise, objective)?;
    let grads = value.backward()?;
    model
        .params()
        .iter()
        .map(|(name, var): (&String, &Var)| {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => to_vec(g)?,
                None => vec![0.0; var.elem_count()],
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("gradient of {name}")));
            }
            Ok((name.clone(), g))
        })
        .collect()
}

/// Central finite differences against backprop on `count` random parameter
/// coordinates, with the boundaries frozen and all noise fixed.
pub fn grad_check<R: Rng>(
    model: &WorldModel,
    batch: &SequenceBatch,
    tracks: &[BoundaryTrack],
    noise: &ElboNoise,
    epsilon: f64,
    count: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let grads = analytic_gradients(model, batch, tracks, noise, Objective::Total)?;
    let mut coords: Vec<(usize, usize)> =
        grads.iter().enumerate().flat_map(|(p, (_, g))| (0..g.len()).map(move |i| (p, i))).collect();
    coords.shuffle(rng);
    coords.truncate(count);
    let eval = || -> Result<f64> {
        Ok(objective_value(model, batch, tracks, noise, Objective::Total)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let mut report = GradCheckReport { max_relative_error: 0.0, coords: Vec::with_capacity(coords.len()) };
    for (p, i) in coords {
        let (name, g) = &grads[p];
        let original = model.params().values(name)?[i];
        model.params().set_coord(name, i, original + epsilon)?;
        let plus = eval()?;
        model.params().set_coord(name, i, original - epsilon)?;
        let minus = eval()?;
        model.params().set_coord(name, i, original)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(g[i], numeric);
        report.max_relative_error = report.max_relative_error.max(err);
        report.coords.push((name.clone(), i, g[i], numeric));
    }
    Ok(report)
}

/// Sum of a `(B, T)` or `(B,)` tensor over all but the batch dimension.
pub fn per_row_sum(t: &Tensor) -> Result<Tensor> {
    Ok(if t.rank() > 1 { t.flatten_from(1)?.sum(D::Minus1)? } else { t.clone() })
}
