//! Generative side of the hierarchical recurrent state-space model.
//!
//! A temporal abstraction `z` is carried by the recurrent context `c`, and
//! only moves at subsequence boundaries (UPDATE); otherwise it is copied.
//! The observation abstraction `s` is recurrent within a subsequence (carry
//! `h`) and is re-initialised from `z` when a subsequence starts (INIT).
//! Frames are decoded from `s` alone.
//!
//! In [`Mode::Rssm`] the model collapses to a single recurrent level with a
//! per-step, action-conditioned `s` transition and no boundary or `z` nodes.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boundary::{prior_probability, BoundaryLimits, BoundaryTrack};
use crate::config::{Likelihood, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::inference::InferenceNets;
use crate::nn::{self, ConvDecoder, DiagGaussian, GruCell, Mlp, ParamStore};
use crate::planner::GoalEncoder;

/// Temporal abstraction `z_t` with its recurrent context `c_t`.
#[derive(Debug, Clone)]
pub struct ZState {
    pub value: Tensor,
    pub carry: Tensor,
}

/// Observation abstraction `s_t` with its recurrent context `h_t`.
#[derive(Debug, Clone)]
pub struct SState {
    pub value: Tensor,
    pub carry: Tensor,
}

/// Result of a `z` transition for a batch of rows.
#[derive(Debug, Clone)]
pub struct ZTransition {
    /// `c_t`; equals the previous carry on COPY rows.
    pub carry: Tensor,
    /// `N(mu_z(c_t), sigma_z(c_t))`, meaningful on UPDATE rows.
    pub dist: DiagGaussian,
    /// `(B, 1)`: 1 on UPDATE rows, 0 on COPY rows.
    pub update: Tensor,
    prev_value: Tensor,
}

impl ZTransition {
    fn gated(&self, fresh: &Tensor) -> Result<ZState> {
        let keep = (self.update.ones_like()? - &self.update)?;
        let value = (fresh.broadcast_mul(&self.update)? + self.prev_value.broadcast_mul(&keep)?)?;
        Ok(ZState { value, carry: self.carry.clone() })
    }

    /// Reparameterised sample; COPY rows return the previous value exactly.
    pub fn sample(&self, eps: &Tensor) -> Result<ZState> {
        self.gated(&self.dist.sample(eps)?)
    }

    pub fn mean(&self) -> Result<ZState> {
        self.gated(&self.dist.mean)
    }
}

/// Result of an `s` transition: the new carry and `p(s_t | h_t)`.
#[derive(Debug, Clone)]
pub struct STransition {
    pub carry: Tensor,
    pub dist: DiagGaussian,
}

impl STransition {
    pub fn sample(&self, eps: &Tensor) -> Result<SState> {
        Ok(SState { value: self.dist.sample(eps)?, carry: self.carry.clone() })
    }

    pub fn mean(&self) -> SState {
        SState { value: self.dist.mean.clone(), carry: self.carry.clone() }
    }
}

/// Per-pixel observation distribution for `N` frames.
#[derive(Debug, Clone)]
pub struct ObsDist {
    /// Bernoulli logits or Gaussian means, `(N, H, W, C)`.
    pub params: Tensor,
    pub likelihood: Likelihood,
    /// Global Gaussian scale (scalar tensor); `None` for Bernoulli.
    pub scale: Option<Tensor>,
}

impl ObsDist {
    /// Pixel probabilities or means in the preprocessed data space.
    pub fn mean(&self) -> Result<Tensor> {
        match self.likelihood {
            Likelihood::Bernoulli => nn::sigmoid(&self.params),
            Likelihood::Gaussian => Ok(self.params.clone()),
        }
    }

    /// Per-pixel log-likelihood, `(N, H, W, C)`.
    pub fn log_prob_pixels(&self, x: &Frames) -> Result<Tensor> {
        if x.likelihood != self.likelihood {
            return Err(Error::Config(format!(
                "frames preprocessed for {} but decoder likelihood is {}",
                x.likelihood, self.likelihood
            )));
        }
        if x.data.dims() != self.params.dims() {
            return Err(Error::Config(format!(
                "frame shape {:?} does not match decoder output {:?}",
                x.data.dims(),
                self.params.dims()
            )));
        }
        match self.likelihood {
            Likelihood::Bernoulli => {
                // x * l - softplus(l)
                Ok(((&x.data * &self.params)? - nn::softplus(&self.params)?)?)
            }
            Likelihood::Gaussian => {
                let scale = self.scale.as_ref().expect("gaussian decoder has a scale");
                let z = x.data.sub(&self.params)?.broadcast_div(scale)?;
                let log_norm = (scale.log()? + 0.5 * (2.0 * std::f64::consts::PI).ln())?;
                Ok((z.sqr()? * -0.5)?.broadcast_sub(&log_norm)?)
            }
        }
    }

    /// Log-likelihood per frame, `(N,)`.
    pub fn log_prob(&self, x: &Frames) -> Result<Tensor> {
        Ok(self.log_prob_pixels(x)?.flatten_from(1)?.sum(1)?)
    }
}

/// Frames already mapped into the space a likelihood expects.
#[derive(Debug, Clone)]
pub struct Frames {
    pub data: Tensor,
    pub likelihood: Likelihood,
}

impl Frames {
    /// Maps 8-bit pixels: `[0, 1]` intensities for Bernoulli, 5-bit bin
    /// centres in `[-0.5, 0.5]` for Gaussian.
    pub fn from_bytes(bytes: &[u8], shape: &[usize], likelihood: Likelihood, dtype: DType) -> Result<Self> {
        let values: Vec<f32> = bytes.iter().map(|&b| preprocess_pixel(b, likelihood) as f32).collect();
        let data = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { data, likelihood })
    }
}

pub fn preprocess_pixel(b: u8, likelihood: Likelihood) -> f64 {
    match likelihood {
        Likelihood::Bernoulli => b as f64 / 255.0,
        Likelihood::Gaussian => (b >> 3) as f64 / 32.0 + 1.0 / 64.0 - 0.5,
    }
}

/// Inverse of [`preprocess_pixel`] for rendering model output.
pub fn postprocess_pixel(v: f64, likelihood: Likelihood) -> u8 {
    let unit = match likelihood {
        Likelihood::Bernoulli => v,
        Likelihood::Gaussian => v + 0.5,
    };
    (unit.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Counts network evaluations, one per batch row.
#[derive(Debug, Default)]
pub struct NetCounter {
    z_transitions: AtomicU64,
    s_transitions: AtomicU64,
    boundary: AtomicU64,
    decodes: AtomicU64,
    encodes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetCounts {
    pub z_transitions: u64,
    pub s_transitions: u64,
    pub boundary: u64,
    pub decodes: u64,
    pub encodes: u64,
}

impl NetCounts {
    pub fn since(&self, earlier: &NetCounts) -> NetCounts {
        NetCounts {
            z_transitions: self.z_transitions - earlier.z_transitions,
            s_transitions: self.s_transitions - earlier.s_transitions,
            boundary: self.boundary - earlier.boundary,
            decodes: self.decodes - earlier.decodes,
            encodes: self.encodes - earlier.encodes,
        }
    }

    /// Transition-network evaluations of either level.
    pub fn transitions(&self) -> u64 {
        self.z_transitions + self.s_transitions
    }
}

impl NetCounter {
    fn add(counter: &AtomicU64, n: usize) {
        counter.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub(crate) fn encodes(&self, n: usize) {
        Self::add(&self.encodes, n)
    }

    pub fn snapshot(&self) -> NetCounts {
        NetCounts {
            z_transitions: self.z_transitions.load(Ordering::Relaxed),
            s_transitions: self.s_transitions.load(Ordering::Relaxed),
            boundary: self.boundary.load(Ordering::Relaxed),
            decodes: self.decodes.load(Ordering::Relaxed),
            encodes: self.encodes.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug)]
pub(crate) struct HierPrior {
    pub z_rnn: GruCell,
    pub z_head: Mlp,
    pub s_rnn: GruCell,
    pub s_init: Mlp,
    pub s_head: Mlp,
    pub boundary: Mlp,
}

#[derive(Debug)]
pub(crate) struct FlatPrior {
    pub s_rnn: GruCell,
    pub s_head: Mlp,
    pub h_init: Tensor,
}

#[derive(Debug)]
pub(crate) struct Generative {
    pub decoder: ConvDecoder,
    pub pixel_scale: Option<Tensor>,
    pub action_embed: Option<Tensor>,
    /// Learned `c_0` (HRSSM) used when no context is given.
    pub c_init: Option<Tensor>,
    pub hier: Option<HierPrior>,
    pub flat: Option<FlatPrior>,
}

/// All generative and inference networks of one model, sharing a parameter store.
#[derive(Debug)]
pub struct WorldModel {
    config: ModelConfig,
    store: ParamStore,
    pub(crate) gen: Generative,
    pub(crate) inf: InferenceNets,
    pub(crate) goal: Option<GoalEncoder>,
    counter: NetCounter,
}

impl WorldModel {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let c = &config;
        let decoder = ConvDecoder::new(
            &mut store,
            "dec",
            c.s_dim,
            c.mlp_hidden,
            c.image_size,
            c.channels,
            &c.conv_channels,
            &mut rng,
        )?;
        let pixel_scale = match c.likelihood {
            // softplus(-2.5) ~ 0.08, a bit under one 5-bit bin's spread
            Likelihood::Gaussian => Some(store.constant("dec.log_scale", &[1], -2.5)?),
            Likelihood::Bernoulli => None,
        };
        let action_embed = if c.action_conditioned() {
            Some(store.uniform("act.embed", &[c.num_actions, c.action_embed], 1.0, &mut rng)?)
        } else {
            None
        };
        let a_dim = if c.action_conditioned() { c.action_embed } else { 0 };
        let (hier, flat, c_init) = match c.mode {
            Mode::Hrssm => {
                let hier = HierPrior {
                    z_rnn: GruCell::new(&mut store, "prior.z_rnn", c.z_dim + a_dim, c.hidden, &mut rng)?,
                    z_head: Mlp::new(&mut store, "prior.z_head", &[c.hidden, c.mlp_hidden, 2 * c.z_dim], &mut rng)?,
                    s_rnn: GruCell::new(&mut store, "prior.s_rnn", c.s_dim + c.z_dim, c.hidden, &mut rng)?,
                    s_init: Mlp::new(&mut store, "prior.s_init", &[c.z_dim, c.mlp_hidden, c.hidden], &mut rng)?,
                    s_head: Mlp::new(&mut store, "prior.s_head", &[c.hidden, c.mlp_hidden, 2 * c.s_dim], &mut rng)?,
                    boundary: Mlp::new(&mut store, "prior.boundary", &[c.s_dim, c.mlp_hidden, 1], &mut rng)?,
                };
                let c_init = store.zeros("prior.c_init", &[1, c.hidden])?;
                (Some(hier), None, Some(c_init))
            }
            Mode::Rssm => {
                let flat = FlatPrior {
                    s_rnn: GruCell::new(&mut store, "prior.s_rnn", c.s_dim + a_dim, c.hidden, &mut rng)?,
                    s_head: Mlp::new(&mut store, "prior.s_head", &[c.hidden, c.mlp_hidden, 2 * c.s_dim], &mut rng)?,
                    h_init: store.zeros("prior.h_init", &[1, c.hidden])?,
                };
                (None, Some(flat), None)
            }
        };
        let inf = InferenceNets::new(&mut store, c, &mut rng)?;
        let goal = if c.goal_hidden > 0 {
            Some(GoalEncoder::new(&mut store, "goal", c.channels, c.goal_hidden, c.planning_dim(), &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            gen: Generative { decoder, pixel_scale, action_embed, c_init, hier, flat },
            inf,
            goal,
            counter: NetCounter::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn counter(&self) -> &NetCounter {
        &self.counter
    }

    pub fn limits(&self) -> BoundaryLimits {
        BoundaryLimits::new(self.config.max_segments, self.config.max_segment_len)
    }

    pub(crate) fn hier(&self) -> Result<&HierPrior> {
        self.gen
            .hier
            .as_ref()
            .ok_or_else(|| Error::Config("operation needs the hierarchical model; this is the RSSM baseline".into()))
    }

    pub(crate) fn flat(&self) -> Result<&FlatPrior> {
        self.gen
            .flat
            .as_ref()
            .ok_or_else(|| Error::Config("operation needs the RSSM baseline; this is the hierarchical model".into()))
    }

    /// Names of parameters whose values are not finite.
    pub fn non_finite_params(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, v)| {
                v.as_tensor()
                    .to_dtype(DType::F64)
                    .and_then(|t| t.sum_all())
                    .and_then(|t| t.to_scalar::<f64>())
                    .map(|s| !s.is_finite())
                    .unwrap_or(true)
            })
            .map(|(k, _)| k.clone())
            .collect()
    }

    fn fault(&self, what: &str) -> Error {
        let bad = self.non_finite_params();
        Error::NonFinite {
            what: what.to_string(),
            detail: Some(if bad.is_empty() {
                "all parameters finite".to_string()
            } else {
                format!("non-finite parameters: {}", bad.join(", "))
            }),
        }
    }

    pub(crate) fn ensure_finite(&self, t: &Tensor, what: &str) -> Result<()> {
        nn::check_finite(t, what).map_err(|_| self.fault(what))
    }

    pub(crate) fn ones(&self, rows: usize) -> Result<Tensor> {
        Ok(Tensor::ones((rows, 1), self.dtype(), self.device())?)
    }

    pub(crate) fn embed_actions(&self, actions: Option<&Tensor>, rows: usize) -> Result<Option<Tensor>> {
        match (&self.gen.action_embed, actions) {
            (None, None) => Ok(None),
            (Some(table), Some(a)) => {
                if a.dims1()? != rows {
                    return Err(Error::InvalidArgument(format!("{} actions for {rows} rows", a.dims1()?)));
                }
                Ok(Some(table.index_select(a, 0)?))
            }
            (None, Some(_)) => Err(Error::InvalidArgument("model is not action-conditioned".into())),
            (Some(_), None) => Err(Error::InvalidArgument("action-conditioned model needs an action".into())),
        }
    }

    /// Initial top-level carry, `(rows, hidden)`.
    pub fn initial_carry(&self, rows: usize) -> Result<Tensor> {
        let init = match self.config.mode {
            Mode::Hrssm => self.gen.c_init.as_ref().expect("hrssm has c_init"),
            Mode::Rssm => &self.flat()?.h_init,
        };
        Ok(init.broadcast_as((rows, self.config.hidden))?.contiguous()?)
    }

    /// Initial `z` state: zero value with the given (or learned) carry.
    pub fn initial_z(&self, carry: Option<&Tensor>, rows: usize) -> Result<ZState> {
        let carry = match carry {
            Some(c) => c.clone(),
            None => self.initial_carry(rows)?,
        };
        let value = Tensor::zeros((rows, self.config.z_dim), self.dtype(), self.device())?;
        Ok(ZState { value, carry })
    }

    /// `p(m_t = 1 | s_t)` logits from the boundary network, `(B,)`.
    pub fn boundary_logit(&self, s: &Tensor) -> Result<Tensor> {
        let logit = self.hier()?.boundary.forward(s)?.squeeze(D::Minus1)?;
        NetCounter::add(&self.counter.boundary, s.dim(0)?);
        self.ensure_finite(&logit, "boundary prior logit")?;
        Ok(logit)
    }

    /// `p(m_t = 1 | s_t)` for each row, applying the counter limits.
    /// `counters[i]` is `(n(m_<t), l(m_<t))` for row `i`.
    pub fn boundary_prior(&self, s: &SState, counters: &[(usize, usize)]) -> Result<Vec<f64>> {
        let logits = self.boundary_logit(&s.value)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if logits.len() != counters.len() {
            return Err(Error::InvalidArgument("one counter pair per row required".into()));
        }
        let limits = self.limits();
        Ok(logits
            .iter()
            .zip(counters)
            .map(|(&l, &(n, len))| prior_probability(nn::scalar_sigmoid(l), n, len, limits))
            .collect())
    }

    /// Temporal-abstraction transition. `m_prev` is `(B, 1)` with values in
    /// {0, 1}; `action` holds one action id per row for action-conditioned
    /// models and only affects UPDATE rows.
    pub fn z_transition(&self, prev: &ZState, m_prev: &Tensor, action: Option<&Tensor>) -> Result<ZTransition> {
        let hier = self.hier()?;
        let rows = prev.value.dim(0)?;
        let input = match self.embed_actions(action, rows)? {
            Some(a) => Tensor::cat(&[&prev.value, &a], 1)?,
            None => prev.value.clone(),
        };
        let fresh = hier.z_rnn.step(&input, &prev.carry)?;
        let keep = (m_prev.ones_like()? - m_prev)?;
        let carry = (fresh.broadcast_mul(m_prev)? + prev.carry.broadcast_mul(&keep)?)?;
        self.ensure_finite(&carry, "z carry")?;
        let dist = DiagGaussian::from_raw(&hier.z_head.forward(&carry)?)?;
        NetCounter::add(&self.counter.z_transitions, rows);
        Ok(ZTransition { carry, dist, update: m_prev.clone(), prev_value: prev.value.clone() })
    }

    /// Observation-abstraction transition. Rows with `m_prev = 0` run the
    /// recurrent UPDATE; rows with `m_prev = 1` are re-initialised from `z`.
    pub fn s_transition(&self, prev: &SState, z: &Tensor, m_prev: &Tensor) -> Result<STransition> {
        let hier = self.hier()?;
        let rows = z.dim(0)?;
        let init = hier.s_init.forward(z)?;
        let update = hier.s_rnn.step(&Tensor::cat(&[&prev.value, z], 1)?, &prev.carry)?;
        let keep = (m_prev.ones_like()? - m_prev)?;
        let carry = (init.broadcast_mul(m_prev)? + update.broadcast_mul(&keep)?)?;
        self.ensure_finite(&carry, "s carry")?;
        let dist = DiagGaussian::from_raw(&hier.s_head.forward(&carry)?)?;
        NetCounter::add(&self.counter.s_transitions, rows);
        Ok(STransition { carry, dist })
    }

    /// `s` distribution at the start of a subsequence with abstraction `z`.
    pub fn s_init(&self, z: &Tensor) -> Result<STransition> {
        let hier = self.hier()?;
        let carry = hier.s_init.forward(z)?;
        let dist = DiagGaussian::from_raw(&hier.s_head.forward(&carry)?)?;
        NetCounter::add(&self.counter.s_transitions, z.dim(0)?);
        Ok(STransition { carry, dist })
    }

    /// Single-level transition of the RSSM baseline.
    pub fn flat_transition(&self, prev: &SState, action: Option<&Tensor>) -> Result<STransition> {
        let flat = self.flat()?;
        let rows = prev.value.dim(0)?;
        let input = match self.embed_actions(action, rows)? {
            Some(a) => Tensor::cat(&[&prev.value, &a], 1)?,
            None => prev.value.clone(),
        };
        let carry = flat.s_rnn.step(&input, &prev.carry)?;
        self.ensure_finite(&carry, "s carry")?;
        let dist = DiagGaussian::from_raw(&flat.s_head.forward(&carry)?)?;
        NetCounter::add(&self.counter.s_transitions, rows);
        Ok(STransition { carry, dist })
    }

    /// Initial `s` state for the baseline: zero value, given or learned carry.
    pub fn initial_s(&self, carry: Option<&Tensor>, rows: usize) -> Result<SState> {
        let carry = match carry {
            Some(c) => c.clone(),
            None => self.initial_carry(rows)?,
        };
        let value = Tensor::zeros((rows, self.config.s_dim), self.dtype(), self.device())?;
        Ok(SState { value, carry })
    }

    /// Observation distribution for `s` of shape `(N, s_dim)`.
    pub fn decode(&self, s: &Tensor) -> Result<ObsDist> {
        let params = self.gen.decoder.forward(s)?;
        NetCounter::add(&self.counter.decodes, s.dim(0)?);
        let scale = match &self.gen.pixel_scale {
            Some(raw) => Some((nn::softplus(raw)? + nn::MIN_STD)?.squeeze(0)?),
            None => None,
        };
        Ok(ObsDist { params, likelihood: self.config.likelihood, scale })
    }

    pub(crate) fn actions_tensor(&self, actions: &[u32]) -> Result<Tensor> {
        Ok(Tensor::from_slice(actions, actions.len(), self.device())?)
    }

    /// Ancestral rollout from carry `prior_ctx` (or the learned initial carry).
    ///
    /// With `jumpy`, every step is an UPDATE of `z` and frames are decoded
    /// from the INIT `s` of each abstraction; no boundaries are sampled. The
    /// full rollout samples boundaries from the prior. `actions`, when the
    /// model is action-conditioned, gives one action per output step, read at
    /// UPDATE steps only.
    pub fn generate(
        &self,
        prior_ctx: Option<&Tensor>,
        horizon: usize,
        actions: Option<&[u32]>,
        jumpy: bool,
        noise: &mut RolloutNoise,
    ) -> Result<Rollout> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("empty rollout: horizon must be >= 1".into()));
        }
        if let Some(a) = actions {
            if a.len() != horizon {
                return Err(Error::InvalidArgument(format!("{} actions for horizon {horizon}", a.len())));
            }
        }
        if self.config.action_conditioned() != actions.is_some() {
            return Err(Error::InvalidArgument("actions must be given iff the model is action-conditioned".into()));
        }
        match self.config.mode {
            Mode::Hrssm => self.generate_hier(prior_ctx, horizon, actions, jumpy, noise),
            Mode::Rssm if jumpy => Err(Error::InvalidArgument("the RSSM baseline has no jumpy transition".into())),
            Mode::Rssm => self.generate_flat(prior_ctx, horizon, actions, noise),
        }
    }

    fn generate_hier(
        &self,
        prior_ctx: Option<&Tensor>,
        horizon: usize,
        actions: Option<&[u32]>,
        jumpy: bool,
        noise: &mut RolloutNoise,
    ) -> Result<Rollout> {
        let dtype = self.dtype();
        let limits = self.limits();
        let mut z = self.initial_z(prior_ctx, 1)?;
        let mut s: Option<SState> = None;
        let mut track = BoundaryTrack::new(limits);
        let mut path = LatentPath::default();
        let mut frames_s = Vec::with_capacity(horizon);
        let mut z_transitions = 0;
        let mut copies = 0;
        let mut m_prev = 1.0f64;
        for t in 0..horizon {
            let action = actions.map(|a| self.actions_tensor(&a[t..t + 1])).transpose()?;
            let gate = Tensor::full(m_prev, (1, 1), self.device())?.to_dtype(dtype)?;
            if m_prev == 1.0 {
                let tr = self.z_transition(&z, &gate, action.as_ref())?;
                z = tr.sample(&noise.z(self.config.z_dim, dtype)?)?;
                z_transitions += 1;
            } else {
                copies += 1;
            }
            path.z.push(row(&z.value)?);
            path.c.push(row(&z.carry)?);
            if jumpy {
                let init = self.s_init(&z.value)?;
                let st = init.mean();
                frames_s.push(st.value.clone());
                path.s.push(row(&st.value)?);
                path.h.push(row(&st.carry)?);
                continue;
            }
            let st = match &s {
                Some(prev) if m_prev == 0.0 => self.s_transition(prev, &z.value, &gate)?,
                _ => self.s_init(&z.value)?,
            };
            let next = st.sample(&noise.s(self.config.s_dim, dtype)?)?;
            path.s.push(row(&next.value)?);
            path.h.push(row(&next.carry)?);
            frames_s.push(next.value.clone());
            let (n, l) = track.next_counters();
            let p = self.boundary_prior(&next, &[(n, l)])?[0];
            let proposed = noise.m.gen::<f64>() < p;
            m_prev = if track.push(proposed) { 1.0 } else { 0.0 };
            s = Some(next);
        }
        let frames = self.decode(&Tensor::cat(&frames_s, 0)?)?.mean()?;
        Ok(Rollout { frames, track: (!jumpy).then_some(track), path, z_transitions, copies })
    }

    fn generate_flat(
        &self,
        prior_ctx: Option<&Tensor>,
        horizon: usize,
        actions: Option<&[u32]>,
        noise: &mut RolloutNoise,
    ) -> Result<Rollout> {
        let dtype = self.dtype();
        let mut s = self.initial_s(prior_ctx, 1)?;
        let mut path = LatentPath::default();
        let mut values = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let action = actions.map(|a| self.actions_tensor(&a[t..t + 1])).transpose()?;
            let tr = self.flat_transition(&s, action.as_ref())?;
            s = tr.sample(&noise.s(self.config.s_dim, dtype)?)?;
            path.s.push(row(&s.value)?);
            path.h.push(row(&s.carry)?);
            values.push(s.value.clone());
        }
        let frames = self.decode(&Tensor::cat(&values, 0)?)?.mean()?;
        Ok(Rollout { frames, track: None, path, z_transitions: 0, copies: 0 })
    }

    /// Action-conditioned imagination used by the planner: one transition per
    /// action for every candidate sequence, starting from carry `ctx`
    /// (`(1, hidden)`). Returns the planning states `(K, l, d)`: the jumpy `z`
    /// chain for the hierarchical model, the `s` chain for the baseline.
    pub fn imagine(&self, ctx: &Tensor, candidates: &[Vec<u32>], sample: Option<&mut RolloutNoise>) -> Result<Tensor> {
        let k = candidates.len();
        let len = candidates.first().map(Vec::len).unwrap_or(0);
        if k == 0 || len == 0 || candidates.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidArgument("need at least one non-empty, equal-length action sequence".into()));
        }
        if !self.config.action_conditioned() {
            return Err(Error::Config("planning needs an action-conditioned model".into()));
        }
        let dtype = self.dtype();
        let carry = ctx.broadcast_as((k, self.config.hidden))?.contiguous()?;
        let mut noise = sample;
        let mut states = Vec::with_capacity(len);
        match self.config.mode {
            Mode::Hrssm => {
                let mut z = self.initial_z(Some(&carry), k)?;
                let gate = self.ones(k)?;
                for step in 0..len {
                    let ids: Vec<u32> = candidates.iter().map(|c| c[step]).collect();
                    let tr = self.z_transition(&z, &gate, Some(&self.actions_tensor(&ids)?))?;
                    z = match noise.as_deref_mut() {
                        Some(n) => tr.sample(&n.z_rows(k, self.config.z_dim, dtype)?)?,
                        None => tr.mean()?,
                    };
                    states.push(z.value.clone());
                }
            }
            Mode::Rssm => {
                let mut s = self.initial_s(Some(&carry), k)?;
                for step in 0..len {
                    let ids: Vec<u32> = candidates.iter().map(|c| c[step]).collect();
                    let tr = self.flat_transition(&s, Some(&self.actions_tensor(&ids)?))?;
                    s = match noise.as_deref_mut() {
                        Some(n) => tr.sample(&n.s_rows(k, self.config.s_dim, dtype)?)?,
                        None => tr.mean(),
                    };
                    states.push(s.value.clone());
                }
            }
        }
        Ok(Tensor::stack(&states, 1)?)
    }
}

fn row(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Independent random streams for the three stochastic choices of a
/// rollout, so that e.g. the `z` noise is shared between a jumpy rollout
/// and a full rollout with forced boundaries.
#[derive(Debug, Clone)]
pub struct RolloutNoise {
    z: ChaCha8Rng,
    s: ChaCha8Rng,
    m: ChaCha8Rng,
}

impl RolloutNoise {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Self { z: stream(1), s: stream(2), m: stream(3) }
    }

    fn z(&mut self, dim: usize, dtype: DType) -> Result<Tensor> {
        self.z_rows(1, dim, dtype)
    }

    fn s(&mut self, dim: usize, dtype: DType) -> Result<Tensor> {
        self.s_rows(1, dim, dtype)
    }

    fn z_rows(&mut self, rows: usize, dim: usize, dtype: DType) -> Result<Tensor> {
        nn::normal_tensor(&mut self.z, &[rows, dim], dtype)
    }

    fn s_rows(&mut self, rows: usize, dim: usize, dtype: DType) -> Result<Tensor> {
        nn::normal_tensor(&mut self.s, &[rows, dim], dtype)
    }
}

/// Per-step latent values of one rollout or posterior sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentPath {
    pub z: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// Decoded means, `(horizon, H, W, C)`.
    pub frames: Tensor,
    /// Sampled boundaries; `None` for jumpy and baseline rollouts.
    pub track: Option<BoundaryTrack>,
    pub path: LatentPath,
    pub z_transitions: usize,
    pub copies: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> WorldModel {
        WorldModel::new(ModelConfig::tiny(mode), DType::F64, 3).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        row(t).unwrap()
    }

    fn random_z(m: &WorldModel, rows: usize, seed: u64) -> ZState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ZState {
            value: nn::normal_tensor(&mut rng, &[rows, m.config().z_dim], DType::F64).unwrap(),
            carry: nn::normal_tensor(&mut rng, &[rows, m.config().hidden], DType::F64).unwrap(),
        }
    }

    #[test]
    fn copy_is_exact_and_ignores_action() {
        let m = tiny(Mode::Hrssm);
        let prev = random_z(&m, 2, 1);
        let zero = Tensor::zeros((2, 1), DType::F64, &Device::Cpu).unwrap();
        let a0 = m.actions_tensor(&[0, 1]).unwrap();
        let a1 = m.actions_tensor(&[2, 2]).unwrap();
        let eps = nn::normal_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[2, 2], DType::F64).unwrap();
        let t0 = m.z_transition(&prev, &zero, Some(&a0)).unwrap().sample(&eps).unwrap();
        let t1 = m.z_transition(&prev, &zero, Some(&a1)).unwrap().sample(&eps).unwrap();
        assert_eq!(vals(&t0.value), vals(&prev.value));
        assert_eq!(vals(&t0.carry), vals(&prev.carry));
        assert_eq!(vals(&t1.value), vals(&t0.value));
        assert_eq!(vals(&t1.carry), vals(&t0.carry));
    }

    #[test]
    fn update_changes_carry_and_uses_action() {
        let m = tiny(Mode::Hrssm);
        let prev = random_z(&m, 1, 2);
        let one = m.ones(1).unwrap();
        let a = m.z_transition(&prev, &one, Some(&m.actions_tensor(&[0]).unwrap())).unwrap();
        let b = m.z_transition(&prev, &one, Some(&m.actions_tensor(&[1]).unwrap())).unwrap();
        assert_ne!(vals(&a.carry), vals(&prev.carry));
        assert_ne!(vals(&a.carry), vals(&b.carry));
        assert!(vals(&a.dist.std).iter().all(|&s| s > 0.0));
    }

    #[test]
    fn init_ignores_previous_s_and_update_does_not() {
        let m = tiny(Mode::Hrssm);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = nn::normal_tensor(&mut rng, &[1, 2], DType::F64).unwrap();
        let s_a = SState {
            value: nn::normal_tensor(&mut rng, &[1, 2], DType::F64).unwrap(),
            carry: nn::normal_tensor(&mut rng, &[1, 6], DType::F64).unwrap(),
        };
        let s_b = SState {
            value: nn::normal_tensor(&mut rng, &[1, 2], DType::F64).unwrap(),
            carry: nn::normal_tensor(&mut rng, &[1, 6], DType::F64).unwrap(),
        };
        let one = m.ones(1).unwrap();
        let zero = (one.zeros_like()).unwrap();
        let ia = m.s_transition(&s_a, &z, &one).unwrap();
        let ib = m.s_transition(&s_b, &z, &one).unwrap();
        assert_eq!(vals(&ia.dist.mean), vals(&ib.dist.mean));
        assert_eq!(vals(&ia.dist.std), vals(&ib.dist.std));
        let ua = m.s_transition(&s_a, &z, &zero).unwrap();
        let ub = m.s_transition(&s_b, &z, &zero).unwrap();
        assert_ne!(vals(&ua.carry), vals(&ub.carry));
    }

    #[test]
    fn decoder_shapes_and_bernoulli_range() {
        let m = WorldModel::new(
            ModelConfig { conv_channels: vec![4, 4, 4], feature: 8, hidden: 8, mlp_hidden: 8, ..ModelConfig::default() },
            DType::F32,
            0,
        )
        .unwrap();
        let s = nn::normal_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[2, 8], DType::F32).unwrap();
        let d = m.decode(&s).unwrap();
        assert_eq!(d.params.dims(), &[2, 32, 32, 3]);
        let p = d.mean().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn log_prob_is_sum_of_pixel_terms() {
        for lik in [Likelihood::Bernoulli, Likelihood::Gaussian] {
            let mut cfg = ModelConfig::tiny(Mode::Hrssm);
            cfg.likelihood = lik;
            let m = WorldModel::new(cfg, DType::F64, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let s = nn::normal_tensor(&mut rng, &[1, 2], DType::F64).unwrap();
            let bytes: Vec<u8> = (0..48).map(|_| rng.gen()).collect();
            let x = Frames::from_bytes(&bytes, &[1, 4, 4, 3], lik, DType::F64).unwrap();
            let d = m.decode(&s).unwrap();
            let total = d.log_prob(&x).unwrap().to_vec1::<f64>().unwrap()[0];
            let params = vals(&d.params);
            let scale = d.scale.as_ref().map(|t| t.to_scalar::<f64>().unwrap());
            let oracle: f64 = bytes
                .iter()
                .zip(&params)
                .map(|(&b, &p)| {
                    let v = preprocess_pixel(b, lik);
                    match lik {
                        Likelihood::Bernoulli => {
                            let q = nn::scalar_sigmoid(p);
                            v * q.ln() + (1.0 - v) * (1.0 - q).ln()
                        }
                        Likelihood::Gaussian => {
                            let sd = scale.unwrap();
                            -0.5 * ((v - p) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                        }
                    }
                })
                .sum();
            assert!((total - oracle).abs() < 1e-9 * oracle.abs().max(1.0), "{lik}: {total} vs {oracle}");
        }
    }

    #[test]
    fn likelihood_mismatch_is_a_config_fault() {
        let m = tiny(Mode::Hrssm);
        let s = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        let x = Frames::from_bytes(&[0; 48], &[1, 4, 4, 3], Likelihood::Gaussian, DType::F64).unwrap();
        assert!(matches!(m.decode(&s).unwrap().log_prob(&x), Err(Error::Config(_))));
    }

    #[test]
    fn jumpy_rollout_has_only_updates() {
        let m = tiny(Mode::Hrssm);
        let r = m.generate(None, 3, Some(&[0, 1, 2]), true, &mut RolloutNoise::new(1)).unwrap();
        assert_eq!(r.z_transitions, 3);
        assert_eq!(r.copies, 0);
        assert_eq!(r.frames.dims(), &[3, 4, 4, 3]);
        assert!(m.generate(None, 0, Some(&[]), true, &mut RolloutNoise::new(1)).is_err());
    }

    #[test]
    fn rssm_has_no_hierarchical_parameters() {
        let m = tiny(Mode::Rssm);
        assert!(m.params().names().all(|n| !n.contains("z_") && !n.contains("boundary") && !n.contains("decomp")));
        let before = m.counter().snapshot();
        m.generate(None, 4, Some(&[0, 1, 2, 0]), false, &mut RolloutNoise::new(2)).unwrap();
        let d = m.counter().snapshot().since(&before);
        assert_eq!((d.z_transitions, d.boundary, d.s_transitions), (0, 0, 4));
        assert!(m.generate(None, 4, Some(&[0, 1, 2, 0]), true, &mut RolloutNoise::new(2)).is_err());
    }
}
