//! `SEQD` sequence datasets.
//!
//! Layout (little-endian): magic `SEQD`, `u32` version, `u64` count, `u32`
//! T, H, W, C, a `u8` presence bitmask (1 actions, 2 goal windows, 4 event
//! flags), then the frame block (`count*T*H*W*C` bytes) and each present
//! block in that order: actions (`count*T` bytes), goal windows
//! (`count*T*3*3*C` bytes), events (`count*T` bytes, 0 or 1).

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::TrainConfig;
use crate::elbo::SequenceBatch;
use crate::error::{Error, Result};
use crate::model::Frames;
use crate::planner::{windows_tensor, WINDOW};

pub const MAGIC: &[u8; 4] = b"SEQD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 * 4 + 1;

const HAS_ACTIONS: u8 = 1;
const HAS_GOALS: u8 = 2;
const HAS_EVENTS: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDataset {
    pub count: usize,
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: Vec<u8>,
    pub actions: Option<Vec<u8>>,
    pub goals: Option<Vec<u8>>,
    pub events: Option<Vec<u8>>,
}

impl SequenceDataset {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn window_len(&self) -> usize {
        WINDOW * WINDOW * self.channels
    }

    pub fn num_frames(&self) -> usize {
        self.count * self.steps
    }

    /// Checks block sizes and value ranges.
    pub fn validate(&self) -> Result<()> {
        let n = self.count * self.steps;
        let bad = |what: &str| Err(Error::InvalidArgument(format!("dataset {what} block has the wrong size")));
        if self.frames.len() != n * self.frame_len() {
            return bad("frame");
        }
        if self.actions.as_ref().is_some_and(|a| a.len() != n) {
            return bad("action");
        }
        if self.goals.as_ref().is_some_and(|g| g.len() != n * self.window_len()) {
            return bad("goal");
        }
        if let Some(e) = &self.events {
            if e.len() != n {
                return bad("event");
            }
            if e.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument("event flags must be 0 or 1".into()));
            }
        }
        Ok(())
    }

    pub fn frame(&self, seq: usize, t: usize) -> &[u8] {
        let k = self.frame_len();
        let start = (seq * self.steps + t) * k;
        &self.frames[start..start + k]
    }

    pub fn sequence_frames(&self, seq: usize) -> &[u8] {
        let k = self.frame_len() * self.steps;
        &self.frames[seq * k..(seq + 1) * k]
    }

    pub fn sequence_events(&self, seq: usize) -> Option<&[u8]> {
        self.events.as_ref().map(|e| &e[seq * self.steps..(seq + 1) * self.steps])
    }

    pub fn sequence_actions(&self, seq: usize) -> Option<&[u8]> {
        self.actions.as_ref().map(|a| &a[seq * self.steps..(seq + 1) * self.steps])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.frames.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        for d in [self.steps, self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let flags = ((self.actions.is_some() as u8) * HAS_ACTIONS)
            | ((self.goals.is_some() as u8) * HAS_GOALS)
            | ((self.events.is_some() as u8) * HAS_EVENTS);
        out.push(flags);
        out.extend_from_slice(&self.frames);
        for block in [&self.actions, &self.goals, &self.events].into_iter().flatten() {
            out.extend_from_slice(block);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic, not a SEQD dataset".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u32_at(4) as u32;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let (steps, height, width, channels) = (u32_at(16), u32_at(20), u32_at(24), u32_at(28));
        let flags = bytes[32];
        if flags & !(HAS_ACTIONS | HAS_GOALS | HAS_EVENTS) != 0 {
            return Err(corrupt(format!("unknown presence flags {flags:#x}")));
        }
        let n = count
            .checked_mul(steps)
            .ok_or_else(|| corrupt("sequence count overflows".into()))?;
        let sizes = [
            Some(n.checked_mul(height * width * channels)),
            (flags & HAS_ACTIONS != 0).then_some(Some(n)),
            (flags & HAS_GOALS != 0).then_some(n.checked_mul(WINDOW * WINDOW * channels)),
            (flags & HAS_EVENTS != 0).then_some(Some(n)),
        ];
        let mut pos = HEADER_LEN;
        let mut blocks: Vec<Option<Vec<u8>>> = Vec::with_capacity(4);
        for size in sizes {
            match size {
                None => blocks.push(None),
                Some(len) => {
                    let len = len.ok_or_else(|| corrupt("block size overflows".into()))?;
                    let end = pos
                        .checked_add(len)
                        .filter(|&e| e <= bytes.len())
                        .ok_or_else(|| corrupt(format!("truncated: block needs {len} bytes at offset {pos}, file has {}", bytes.len())))?;
                    blocks.push(Some(bytes[pos..end].to_vec()));
                    pos = end;
                }
            }
        }
        if pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let mut it = blocks.into_iter();
        let ds = Self {
            count,
            steps,
            height,
            width,
            channels,
            frames: it.next().flatten().unwrap_or_default(),
            actions: it.next().flatten(),
            goals: it.next().flatten(),
            events: it.next().flatten(),
        };
        ds.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Checks that the dataset fits the model and sequence layout of `config`.
    pub fn check_compatible(&self, config: &TrainConfig) -> Result<()> {
        let m = &config.model;
        if (self.height, self.width, self.channels) != (m.image_size, m.image_size, m.channels) {
            return Err(Error::Config(format!(
                "dataset frames are {}x{}x{}, model expects {}x{}x{}",
                self.height, self.width, self.channels, m.image_size, m.image_size, m.channels
            )));
        }
        if config.context_len + config.seq_len > self.steps {
            return Err(Error::Config(format!(
                "context {} + sequence {} exceeds the stored length {}",
                config.context_len, config.seq_len, self.steps
            )));
        }
        if m.action_conditioned() && self.actions.is_none() {
            return Err(Error::Config("action-conditioned model needs a dataset with actions".into()));
        }
        if m.goal_hidden > 0 && self.goals.is_none() {
            return Err(Error::Config("goal encoder training needs goal windows in the dataset".into()));
        }
        Ok(())
    }

    /// Builds a batch from sequences `indices`: the first `context_len` frames
    /// form the context, the next `seq_len` frames are modelled.
    pub fn batch(&self, indices: &[usize], config: &TrainConfig, dtype: DType) -> Result<SequenceBatch> {
        self.check_compatible(config)?;
        let (ctx, len) = (config.context_len, config.seq_len);
        let m = &config.model;
        let b = indices.len();
        let k = self.frame_len();
        let gather = |from: usize, n: usize| -> Vec<u8> {
            let mut out = Vec::with_capacity(b * n * k);
            for &i in indices {
                let s = self.sequence_frames(i);
                out.extend_from_slice(&s[from * k..(from + n) * k]);
            }
            out
        };
        let shape = |n: usize| [b, n, self.height, self.width, self.channels];
        let frames = Frames::from_bytes(&gather(ctx, len), &shape(len), m.likelihood, dtype)?;
        let context = if ctx > 0 {
            Some(Frames::from_bytes(&gather(0, ctx), &shape(ctx), m.likelihood, dtype)?)
        } else {
            None
        };
        let actions = match (&self.actions, m.action_conditioned()) {
            (Some(a), true) => {
                let mut ids = Vec::with_capacity(b * len);
                for &i in indices {
                    ids.extend(a[i * self.steps + ctx..i * self.steps + ctx + len].iter().map(|&v| v as u32));
                }
                if ids.iter().any(|&v| v as usize >= m.num_actions) {
                    return Err(Error::Config("dataset action id out of range for the model".into()));
                }
                Some(Tensor::from_vec(ids, (b, len), &Device::Cpu)?)
            }
            _ => None,
        };
        let goals = match (&self.goals, m.goal_hidden > 0) {
            (Some(g), true) => {
                let w = self.window_len();
                let mut out = Vec::with_capacity(b * len * w);
                for &i in indices {
                    let start = (i * self.steps + ctx) * w;
                    out.extend_from_slice(&g[start..start + len * w]);
                }
                Some(windows_tensor(&out, b * len, self.channels, dtype)?.reshape((b, len, WINDOW, WINDOW, self.channels))?)
            }
            _ => None,
        };
        Ok(SequenceBatch { frames, context, actions, goals })
    }

    /// Event flags of the modelled part of sequence `seq`.
    pub fn modelled_events(&self, seq: usize, config: &TrainConfig) -> Option<Vec<u8>> {
        self.sequence_events(seq)
            .map(|e| e[config.context_len..config.context_len + config.seq_len].to_vec())
    }

    /// Mean of the event flags.
    pub fn event_rate(&self) -> Option<f64> {
        self.events
            .as_ref()
            .map(|e| e.iter().map(|&v| v as f64).sum::<f64>() / e.len().max(1) as f64)
    }
}
