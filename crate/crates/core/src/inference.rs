//! Variational posterior `q(M|X) q(Z|M,X) q(S|Z,M,X)` and the context encoder.
//!
//! All posterior networks read per-frame features from one shared conv
//! encoder. Boundaries come from a temporal conv stack and are sampled all at
//! once with a binary straight-through Gumbel-softmax; the same counter
//! forcing as the prior is then applied. The backward `psi` encoder and the
//! forward `phi` encoder reset their carries at boundaries so each
//! subsequence is encoded independently.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::boundary::BoundaryTrack;
use crate::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{Frames, WorldModel};
use crate::nn::{self, ConvEncoder, DiagGaussian, GruCell, Mlp, ParamStore, TemporalConv};

#[derive(Debug)]
pub(crate) struct HierPosterior {
    pub decomposer: TemporalConv,
    pub psi_fwd: GruCell,
    pub psi_bwd: GruCell,
    pub q_z: Mlp,
    pub phi_fwd: GruCell,
    pub q_s: Mlp,
}

#[derive(Debug)]
pub(crate) struct FlatPosterior {
    pub q_s: Mlp,
}

#[derive(Debug)]
pub(crate) struct InferenceNets {
    pub encoder: ConvEncoder,
    pub hier: Option<HierPosterior>,
    pub flat: Option<FlatPosterior>,
    pub ctx_rnn: GruCell,
    pub ctx_init: Tensor,
}

impl InferenceNets {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder =
            ConvEncoder::new(store, "enc", c.image_size, c.channels, &c.conv_channels, c.feature, rng)?;
        let (hier, flat) = match c.mode {
            Mode::Hrssm => (
                Some(HierPosterior {
                    decomposer: TemporalConv::new(store, "post.decomp", &[c.feature, c.mlp_hidden, c.mlp_hidden, 1], rng)?,
                    psi_fwd: GruCell::new(store, "post.psi_fwd", c.feature, c.hidden, rng)?,
                    psi_bwd: GruCell::new(store, "post.psi_bwd", c.feature, c.hidden, rng)?,
                    q_z: Mlp::new(store, "post.q_z", &[2 * c.hidden, c.mlp_hidden, 2 * c.z_dim], rng)?,
                    phi_fwd: GruCell::new(store, "post.phi_fwd", c.feature, c.hidden, rng)?,
                    q_s: Mlp::new(store, "post.q_s", &[c.z_dim + c.hidden, c.mlp_hidden, 2 * c.s_dim], rng)?,
                }),
                None,
            ),
            Mode::Rssm => (
                None,
                Some(FlatPosterior {
                    q_s: Mlp::new(store, "post.q_s", &[c.hidden + c.feature, c.mlp_hidden, 2 * c.s_dim], rng)?,
                }),
            ),
        };
        let ctx_rnn = GruCell::new(store, "ctx.rnn", c.feature, c.hidden, rng)?;
        let ctx_init = store.zeros("ctx.init", &[1, c.hidden])?;
        Ok(Self { encoder, hier, flat, ctx_rnn, ctx_init })
    }
}

/// Output of the sequence decomposer for a batch.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Logits of `q(m_t = 1 | X)`, `(B, T)`.
    pub logits: Tensor,
    /// Relaxed Gumbel-softmax sample, `(B, T)`.
    pub relaxed: Tensor,
    /// Straight-through indicators: forward values exactly 0 or 1, gradient
    /// of the relaxed sample on unforced steps, `(B, T)`.
    pub indicators: Tensor,
    /// 1 where the counters forced the value, `(B, T)`.
    pub forced: Tensor,
    pub tracks: Vec<BoundaryTrack>,
}

/// Per-step posterior over `z`.
#[derive(Debug, Clone)]
pub struct ZPosterior {
    /// `q~(z_t | psi_fwd_{t-1}, psi_bwd_t)`, defined on every step; only used on UPDATE steps.
    pub dists: Vec<DiagGaussian>,
    /// Sampled path, each `(B, z_dim)`.
    pub z: Vec<Tensor>,
    /// `(B, 1)` UPDATE gates per step.
    pub update: Vec<Tensor>,
    pub psi_fwd: Vec<Tensor>,
    pub psi_bwd: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct SPosterior {
    pub dists: Vec<DiagGaussian>,
    pub s: Vec<Tensor>,
    pub phi_fwd: Vec<Tensor>,
}

/// Boundary tensor `(B, T)` from fixed tracks, with the matching forced mask.
pub fn frozen_indicators(model: &WorldModel, tracks: &[BoundaryTrack]) -> Result<(Tensor, Tensor)> {
    let b = tracks.len();
    let t = tracks.first().map(BoundaryTrack::len).unwrap_or(0);
    if tracks.iter().any(|tr| tr.len() != t) {
        return Err(Error::InvalidArgument("tracks differ in length".into()));
    }
    let m: Vec<f64> = tracks.iter().flat_map(|tr| tr.indicators().iter().map(|&v| v as f64)).collect();
    let f: Vec<f64> = tracks.iter().flat_map(|tr| tr.forced().iter().map(|&v| v as u8 as f64)).collect();
    let dev = model.device();
    Ok((
        Tensor::from_vec(m, (b, t), dev)?.to_dtype(model.dtype())?,
        Tensor::from_vec(f, (b, t), dev)?.to_dtype(model.dtype())?,
    ))
}

fn column(x: &Tensor, t: usize) -> Result<Tensor> {
    Ok(x.narrow(1, t, 1)?)
}

impl WorldModel {
    pub(crate) fn hier_post(&self) -> Result<&HierPosterior> {
        self.inf.hier.as_ref().ok_or_else(|| Error::Config("the RSSM baseline has no boundary posterior".into()))
    }

    /// Shared frame features: `(B, T, H, W, C)` -> `(B, T, feature)`.
    pub fn encode_frames(&self, x: &Frames) -> Result<Tensor> {
        let (b, t, h, w, c) = x.data.dims5()?;
        let cfg = self.config();
        if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.channels) {
            return Err(Error::Config(format!(
                "frames are {h}x{w}x{c}, model expects {0}x{0}x{1}",
                cfg.image_size, cfg.channels
            )));
        }
        if x.likelihood != cfg.likelihood {
            return Err(Error::Config(format!(
                "frames preprocessed for {} but model likelihood is {}",
                x.likelihood, cfg.likelihood
            )));
        }
        self.counter().encodes(b * t);
        let flat = x.data.reshape((b * t, h, w, c))?;
        Ok(self.inf.encoder.forward(&flat)?.reshape((b, t, cfg.feature))?)
    }

    /// Boundary logits of `q(m_t | X)` from frame features, `(B, T)`.
    pub fn decomposer_logits(&self, enc: &Tensor) -> Result<Tensor> {
        let logits = self.hier_post()?.decomposer.forward(enc)?.squeeze(D::Minus1)?;
        self.ensure_finite(&logits, "decomposer logits")?;
        Ok(logits)
    }

    /// Samples all boundary indicators at once. `noise` holds one standard
    /// logistic draw per `(b, t)` in row-major order.
    pub fn decompose(&self, enc: &Tensor, temperature: f64, noise: &[f64]) -> Result<Decomposition> {
        if !(temperature > 0.0 && temperature <= 1.0) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be in (0, 1]")));
        }
        let logits = self.decomposer_logits(enc)?;
        let (b, t) = logits.dims2()?;
        if t == 0 {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        if noise.len() != b * t {
            return Err(Error::InvalidArgument(format!("{} noise draws for {b}x{t} indicators", noise.len())));
        }
        let noise_t = Tensor::from_slice(noise, (b, t), self.device())?.to_dtype(self.dtype())?;
        let relaxed = nn::sigmoid(&((&logits + &noise_t)? / temperature)?)?;
        let logit_values = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let limits = self.limits();
        let tracks: Vec<BoundaryTrack> = (0..b)
            .map(|i| {
                BoundaryTrack::from_proposals(
                    (0..t).map(|j| logit_values[i * t + j] + noise[i * t + j] >= 0.0),
                    limits,
                )
            })
            .collect();
        let (hard, forced) = frozen_indicators(self, &tracks)?;
        let free = (forced.ones_like()? - &forced)?;
        let st = (&relaxed - relaxed.detach())?;
        let indicators = (hard + (st * free)?)?;
        Ok(Decomposition { logits, relaxed, indicators, forced, tracks })
    }

    /// Convenience wrapper that draws the logistic noise from `rng`.
    pub fn decompose_frames<R: Rng>(&self, x: &Frames, temperature: f64, rng: &mut R) -> Result<Decomposition> {
        let enc = self.encode_frames(x)?;
        let (b, t, _) = enc.dims3()?;
        let noise = nn::logistic_values(rng, b * t);
        self.decompose(&enc, temperature, &noise)
    }

    fn gate_at(&self, m: &Tensor, t: usize) -> Result<Tensor> {
        if t == 0 {
            self.ones(m.dim(0)?)
        } else {
            column(m, t - 1)
        }
    }

    /// `q(Z | M, X)`. `m` is `(B, T)` with values in {0, 1}; `eps` holds
    /// standard normal noise `(B, T, z_dim)`.
    pub fn infer_z(&self, enc: &Tensor, m: &Tensor, eps: &Tensor) -> Result<ZPosterior> {
        let post = self.hier_post()?;
        let (b, t, _) = enc.dims3()?;
        if m.dims() != [b, t] {
            return Err(Error::InvalidArgument(format!("boundaries {:?} do not match sequence {b}x{t}", m.dims())));
        }
        let hidden = self.config().hidden;
        let zero = Tensor::zeros((b, hidden), self.dtype(), self.device())?;
        let mut psi_fwd = Vec::with_capacity(t);
        let mut carry = zero.clone();
        for i in 0..t {
            carry = post.psi_fwd.step(&enc.narrow(1, i, 1)?.squeeze(1)?, &carry)?;
            psi_fwd.push(carry.clone());
        }
        // backward pass; the carry is dropped after a step that ends a subsequence
        let mut psi_bwd = vec![zero.clone(); t];
        let mut carry = zero.clone();
        for i in (0..t).rev() {
            let keep = (column(m, i)?.ones_like()? - column(m, i)?)?;
            let inflow = carry.broadcast_mul(&keep)?;
            carry = post.psi_bwd.step(&enc.narrow(1, i, 1)?.squeeze(1)?, &inflow)?;
            psi_bwd[i] = carry.clone();
        }
        let mut dists = Vec::with_capacity(t);
        let mut zs: Vec<Tensor> = Vec::with_capacity(t);
        let mut gates = Vec::with_capacity(t);
        for i in 0..t {
            let before = if i == 0 { &zero } else { &psi_fwd[i - 1] };
            let dist = DiagGaussian::from_raw(&post.q_z.forward(&Tensor::cat(&[before, &psi_bwd[i]], 1)?)?)?;
            let gate = self.gate_at(m, i)?;
            let fresh = dist.sample(&eps.narrow(1, i, 1)?.squeeze(1)?)?;
            let z = match zs.last() {
                None => fresh.broadcast_mul(&gate)?,
                Some(prev) => {
                    let keep = (gate.ones_like()? - &gate)?;
                    (fresh.broadcast_mul(&gate)? + prev.broadcast_mul(&keep)?)?
                }
            };
            self.ensure_finite(&z, "posterior z")?;
            dists.push(dist);
            zs.push(z);
            gates.push(gate);
        }
        Ok(ZPosterior { dists, z: zs, update: gates, psi_fwd, psi_bwd })
    }

    /// `q(S | Z, M, X)` given the `z` path; `eps` is `(B, T, s_dim)`.
    pub fn infer_s(&self, enc: &Tensor, m: &Tensor, z: &[Tensor], eps: &Tensor) -> Result<SPosterior> {
        let post = self.hier_post()?;
        let (b, t, _) = enc.dims3()?;
        if m.dims() != [b, t] || z.len() != t {
            return Err(Error::InvalidArgument("boundaries or z path do not match the sequence".into()));
        }
        let mut carry = Tensor::zeros((b, self.config().hidden), self.dtype(), self.device())?;
        let mut dists = Vec::with_capacity(t);
        let mut ss = Vec::with_capacity(t);
        let mut phi = Vec::with_capacity(t);
        for (i, zi) in z.iter().enumerate().take(t) {
            let gate = self.gate_at(m, i)?;
            let keep = (gate.ones_like()? - &gate)?;
            carry = post.phi_fwd.step(&enc.narrow(1, i, 1)?.squeeze(1)?, &carry.broadcast_mul(&keep)?)?;
            let dist = DiagGaussian::from_raw(&post.q_s.forward(&Tensor::cat(&[zi, &carry], 1)?)?)?;
            let s = dist.sample(&eps.narrow(1, i, 1)?.squeeze(1)?)?;
            self.ensure_finite(&s, "posterior s")?;
            phi.push(carry.clone());
            dists.push(dist);
            ss.push(s);
        }
        Ok(SPosterior { dists, s: ss, phi_fwd: phi })
    }

    /// Baseline posterior `q(s_t | h_t, e_t)`.
    pub(crate) fn flat_posterior(&self, h: &Tensor, e: &Tensor) -> Result<DiagGaussian> {
        let post = self.inf.flat.as_ref().ok_or_else(|| Error::Config("not an RSSM baseline".into()))?;
        DiagGaussian::from_raw(&post.q_s.forward(&Tensor::cat(&[h, e], 1)?)?)
    }

    /// One recurrent context step from an existing carry, `(B, hidden)`.
    pub fn context_step(&self, carry: &Tensor, feature: &Tensor) -> Result<Tensor> {
        self.inf.ctx_rnn.step(feature, carry)
    }

    /// Learned initial context carry, `(rows, hidden)`.
    pub fn context_init(&self, rows: usize) -> Result<Tensor> {
        Ok(self.inf.ctx_init.broadcast_as((rows, self.config().hidden))?.contiguous()?)
    }

    /// `c_0 = f_ctx(X_ctx)`: forward recurrent summary of context frames
    /// `(B, T_ctx, H, W, C)`, returned as `(B, hidden)`.
    pub fn encode_context(&self, ctx: &Frames) -> Result<Tensor> {
        let (_, t, ..) = ctx.data.dims5()?;
        if t == 0 {
            return Err(Error::InvalidArgument("empty context".into()));
        }
        let enc = self.encode_frames(ctx)?;
        self.encode_context_features(&enc)
    }

    pub fn encode_context_features(&self, enc: &Tensor) -> Result<Tensor> {
        let (b, t, _) = enc.dims3()?;
        if t == 0 {
            return Err(Error::InvalidArgument("empty context".into()));
        }
        let mut carry = self.context_init(b)?;
        for i in 0..t {
            carry = self.context_step(&carry, &enc.narrow(1, i, 1)?.squeeze(1)?)?;
        }
        self.ensure_finite(&carry, "context carry")?;
        Ok(carry)
    }
}
