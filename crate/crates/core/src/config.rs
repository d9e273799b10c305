//! Model and training configuration, with a canonical `key=value` text form
//! used by checkpoints, config files and artifact directories.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Two-level model with boundaries, temporal and observation abstractions.
    Hrssm,
    /// Single-level recurrent state-space baseline.
    Rssm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    /// Per-pixel Bernoulli on intensities in `[0, 1]`.
    Bernoulli,
    /// Per-pixel Gaussian on 5-bit quantised intensities centred at zero.
    Gaussian,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!("unknown {} {other:?}", stringify!($ty)))),
                }
            }
        }
    };
}

text_enum!(Mode { Hrssm => "hrssm", Rssm => "rssm" });
text_enum!(Likelihood { Bernoulli => "bernoulli", Gaussian => "gaussian" });

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub likelihood: Likelihood,
    /// Square frame side in pixels (power of two, >= 4).
    pub image_size: usize,
    pub channels: usize,
    pub z_dim: usize,
    pub s_dim: usize,
    /// GRU width for every recurrent path.
    pub hidden: usize,
    /// Frame encoder output width.
    pub feature: usize,
    pub mlp_hidden: usize,
    pub conv_channels: Vec<usize>,
    /// Number of discrete actions; 0 disables action conditioning.
    pub num_actions: usize,
    pub action_embed: usize,
    pub max_segments: usize,
    pub max_segment_len: usize,
    /// Width of the 3x3 goal-window feature extractor's hidden layer; 0 disables it.
    pub goal_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hrssm,
            likelihood: Likelihood::Bernoulli,
            image_size: 32,
            channels: 3,
            z_dim: 8,
            s_dim: 8,
            hidden: 128,
            feature: 128,
            mlp_hidden: 128,
            conv_channels: vec![32, 64, 64],
            num_actions: 0,
            action_embed: 8,
            max_segments: 5,
            max_segment_len: 10,
            goal_hidden: 0,
        }
    }
}

impl ModelConfig {
    pub fn action_conditioned(&self) -> bool {
        self.num_actions > 0
    }

    /// Dimension of the state compared against goal features.
    pub fn planning_dim(&self) -> usize {
        match self.mode {
            Mode::Hrssm => self.z_dim,
            Mode::Rssm => self.s_dim,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 4 || !s.is_power_of_two() {
            return Err(Error::Config(format!("image_size {s} must be a power of two >= 4")));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("z_dim", self.z_dim),
            ("s_dim", self.s_dim),
            ("hidden", self.hidden),
            ("feature", self.feature),
            ("mlp_hidden", self.mlp_hidden),
            ("max_segments", self.max_segments),
            ("max_segment_len", self.max_segment_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let depth = s.trailing_zeros() as usize - 2;
        if self.conv_channels.len() < depth {
            return Err(Error::Config(format!(
                "image_size {s} needs {depth} conv channel widths, got {}",
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    fn write_pairs(&self, out: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            out.insert(format!("model.{k}"), v);
        };
        put("mode", self.mode.to_string());
        put("likelihood", self.likelihood.to_string());
        put("image_size", self.image_size.to_string());
        put("channels", self.channels.to_string());
        put("z_dim", self.z_dim.to_string());
        put("s_dim", self.s_dim.to_string());
        put("hidden", self.hidden.to_string());
        put("feature", self.feature.to_string());
        put("mlp_hidden", self.mlp_hidden.to_string());
        put("conv_channels", join(&self.conv_channels));
        put("num_actions", self.num_actions.to_string());
        put("action_embed", self.action_embed.to_string());
        put("max_segments", self.max_segments.to_string());
        put("max_segment_len", self.max_segment_len.to_string());
        put("goal_hidden", self.goal_hidden.to_string());
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "mode" => self.mode = value.parse()?,
            "likelihood" => self.likelihood = value.parse()?,
            "image_size" => self.image_size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "z_dim" => self.z_dim = parse(key, value)?,
            "s_dim" => self.s_dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "feature" => self.feature = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse_list(key, value)?,
            "num_actions" => self.num_actions = parse(key, value)?,
            "action_embed" => self.action_embed = parse(key, value)?,
            "max_segments" => self.max_segments = parse(key, value)?,
            "max_segment_len" => self.max_segment_len = parse(key, value)?,
            "goal_hidden" => self.goal_hidden = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Tiny double-precision-friendly configuration used by gradient and
    /// Monte Carlo checks: 4x4 frames, two-dimensional latents.
    pub fn tiny(mode: Mode) -> Self {
        Self {
            mode,
            likelihood: Likelihood::Bernoulli,
            image_size: 4,
            channels: 3,
            z_dim: 2,
            s_dim: 2,
            hidden: 6,
            feature: 6,
            mlp_hidden: 6,
            conv_channels: vec![],
            num_actions: 3,
            action_embed: 2,
            max_segments: 3,
            max_segment_len: 3,
            goal_hidden: 0,
        }
    }
}

/// Optimiser variant; only AMSGrad is implemented, plain Adam is its
/// non-max special case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Amsgrad,
    Adam,
}

text_enum!(OptimizerKind { Amsgrad => "amsgrad", Adam => "adam" });

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Modelled sequence length.
    pub seq_len: usize,
    /// Leading frames of each stored sequence used as context; 0 disables.
    pub context_len: usize,
    pub temp_start: f64,
    pub temp_end: f64,
    /// Fraction of `steps` over which the temperature anneals linearly.
    pub temp_anneal_frac: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 5e-4,
            batch_size: 64,
            seq_len: 20,
            context_len: 0,
            temp_start: 1.0,
            temp_end: 0.1,
            temp_anneal_frac: 0.5,
            optimizer: OptimizerKind::Amsgrad,
            grad_clip: 100.0,
            steps: 10_000,
            checkpoint_every: 1000,
            log_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Bouncing-balls preset: Bernoulli pixels, at most 5 segments of length <= 10.
    pub fn balls() -> Self {
        let mut c = Self::default();
        c.model.likelihood = Likelihood::Bernoulli;
        c.model.max_segments = 5;
        c.model.max_segment_len = 10;
        c
    }

    /// Maze preset: Gaussian 5-bit pixels, action-conditioned, segments <= 8.
    pub fn maze() -> Self {
        let mut c = Self::default();
        c.model.likelihood = Likelihood::Gaussian;
        c.model.max_segments = 5;
        c.model.max_segment_len = 8;
        c.model.num_actions = 3;
        c.model.goal_hidden = 32;
        c.context_len = 5;
        c
    }

    /// Temperature after `step` optimiser steps: linear from `temp_start` to
    /// `temp_end` over the annealing horizon, then constant.
    pub fn temperature_at(&self, step: usize) -> f64 {
        let horizon = (self.steps as f64 * self.temp_anneal_frac).round();
        if horizon <= 0.0 {
            return self.temp_end;
        }
        let frac = (step as f64 / horizon).min(1.0);
        self.temp_start + (self.temp_end - self.temp_start) * frac
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        if !(self.temp_end > 0.0 && self.temp_end <= self.temp_start && self.temp_start <= 1.0) {
            return Err(Error::Config(format!(
                "temperature schedule must satisfy 0 < end <= start <= 1, got {} -> {}",
                self.temp_start, self.temp_end
            )));
        }
        if !(0.0..=1.0).contains(&self.temp_anneal_frac) {
            return Err(Error::Config("temp_anneal_frac must be in [0, 1]".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        self.model.write_pairs(&mut out);
        let mut put = |k: &str, v: String| {
            out.insert(format!("train.{k}"), v);
        };
        put("learning_rate", self.learning_rate.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seq_len", self.seq_len.to_string());
        put("context_len", self.context_len.to_string());
        put("temp_start", self.temp_start.to_string());
        put("temp_end", self.temp_end.to_string());
        put("temp_anneal_frac", self.temp_anneal_frac.to_string());
        put("optimizer", self.optimizer.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("steps", self.steps.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("log_every", self.log_every.to_string());
        put("seed", self.seed.to_string());
        out
    }

    /// Canonical text: sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies one `key=value` override; keys may omit the `model.`/`train.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        if let Some(k) = key.strip_prefix("model.") {
            if self.model.apply(k, value)? {
                return Ok(());
            }
        } else if let Some(k) = key.strip_prefix("train.") {
            if self.apply(k, value)? {
                return Ok(());
            }
        } else if self.apply(key, value)? || self.model.apply(key, value)? {
            return Ok(());
        }
        Err(Error::Config(format!("unknown config key {key:?}")))
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "context_len" => self.context_len = parse(key, value)?,
            "temp_start" => self.temp_start = parse(key, value)?,
            "temp_end" => self.temp_end = parse(key, value)?,
            "temp_anneal_frac" => self.temp_anneal_frac = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses canonical text on top of `base`; blank lines and `#` comments
    /// are skipped, unknown keys are rejected.
    pub fn from_text_with(base: TrainConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with(Self::default(), text)
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Human-readable listing of keys whose values differ.
    pub fn diff(&self, other: &TrainConfig) -> String {
        let a = self.to_pairs();
        let b = other.to_pairs();
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, v)| format!("  {k}: {v} != {}", b.get(k).map(String::as_str).unwrap_or("<absent>")))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
