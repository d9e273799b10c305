//! `VTA1` checkpoint files.
//!
//! Layout (little-endian): magic `VTA1`; `u32` length and UTF-8 config block
//! in canonical `key=value` lines, followed by `state.step`,
//! `state.temperature` and `state.config_hash`; `u32` parameter count; per
//! parameter a `u32` name length, the name, a `u32` rank, `u64` dims and the
//! values as `f32`.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::WorldModel;

pub const MAGIC: &[u8; 4] = b"VTA1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub temperature: f64,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &WorldModel, config: &TrainConfig, step: usize, temperature: f64) -> Result<Self> {
        let params = model
            .params()
            .iter()
            .map(|(name, var)| {
                Ok(NamedArray {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    values: var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config: config.clone(), step, temperature, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let text = format!(
            "{}state.step={}\nstate.temperature={}\nstate.config_hash={}\n",
            self.config.to_text(),
            self.step,
            self.temperature,
            self.config.hash()
        );
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| corrupt("truncated magic"))? != MAGIC {
            return Err(corrupt("bad magic, not a VTA1 checkpoint"));
        }
        let text_len = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let text = std::str::from_utf8(r.take(text_len).ok_or_else(|| corrupt("truncated config block"))?)
            .map_err(|_| corrupt("config block is not UTF-8"))?;
        let mut config_text = String::new();
        let (mut step, mut temperature, mut hash) = (None, None, None);
        for line in text.lines() {
            match line.split_once('=') {
                Some(("state.step", v)) => step = v.parse::<usize>().ok(),
                Some(("state.temperature", v)) => temperature = v.parse::<f64>().ok(),
                Some(("state.config_hash", v)) => hash = Some(v.to_string()),
                _ => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
            }
        }
        let config = TrainConfig::from_text(&config_text)?;
        let (step, temperature, hash) = match (step, temperature, hash) {
            (Some(s), Some(t), Some(h)) => (s, t, h),
            _ => return Err(corrupt("missing training state in config block")),
        };
        if hash != config.hash() {
            return Err(corrupt("stored config hash does not match the config block"));
        }
        let count = r.u32().ok_or_else(|| corrupt("truncated parameter count"))? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let trunc = || corrupt("truncated parameter block");
            let name_len = r.u32().ok_or_else(trunc)? as usize;
            let name = String::from_utf8(r.take(name_len).ok_or_else(trunc)?.to_vec())
                .map_err(|_| corrupt("parameter name is not UTF-8"))?;
            let rank = r.u32().ok_or_else(trunc)? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize).ok_or_else(trunc)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(trunc)?).ok_or_else(trunc)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.push(NamedArray { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after the last parameter"));
        }
        Ok(Self { config, step, temperature, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and refuses when the stored config differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &TrainConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.hash() != expected.hash() {
            return Err(Error::ConfigMismatch { diff: ck.config.diff(expected) });
        }
        Ok(ck)
    }

    /// Copies the stored values into `model`; names and shapes must match exactly.
    pub fn restore(&self, model: &WorldModel) -> Result<()> {
        let store = model.params();
        if store.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let var = store
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter {} not in model", p.name)))?;
            if var.dims() != p.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    p.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(&p.values, p.shape.as_slice(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Builds a model from the stored config and parameters.
    pub fn into_model(&self, dtype: DType) -> Result<WorldModel> {
        let model = WorldModel::new(self.config.model.clone(), dtype, self.config.seed)?;
        self.restore(&model)?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
