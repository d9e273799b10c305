//! C ABI over the `vta` crate.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns a
//! [`VtaStatus`]; on failure the message is available from
//! [`vta_last_error`] on the same thread. Panics are caught and reported as
//! `VTA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use candle_core::DType;
use vta::checkpoint::Checkpoint;
use vta::config::{Mode, TrainConfig};
use vta::dataset::SequenceDataset;
use vta::envs::{balls, maze};
use vta::planner::run_episode;
use vta::train::{evaluate_elbo, segment, Trainer};
use vta::{Error, WorldModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VtaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupt = 4,
    Config = 5,
    NonFinite = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VtaEnvKind {
    Balls = 0,
    Maze = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VtaMode {
    Hrssm = 0,
    Rssm = 1,
}

/// Opaque dataset handle.
pub struct VtaDataset(SequenceDataset);

/// Opaque model handle: parameters plus the training configuration.
pub struct VtaModel {
    model: WorldModel,
    config: TrainConfig,
    step: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VtaDatasetInfo {
    pub count: usize,
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub has_actions: bool,
    pub has_goals: bool,
    pub has_events: bool,
    /// Mean event flag; negative without events.
    pub event_rate: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VtaModelInfo {
    pub mode: VtaMode,
    pub image_size: usize,
    pub channels: usize,
    pub num_actions: usize,
    /// Modelled frames per sequence.
    pub seq_len: usize,
    /// Leading context frames per stored sequence.
    pub context_len: usize,
    /// Optimiser steps taken.
    pub step: usize,
}

/// Per-frame ELBO terms in nats.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VtaElbo {
    pub total: f64,
    pub reconstruction: f64,
    pub kl_boundary: f64,
    pub kl_z: f64,
    pub kl_s: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VtaEpisode {
    pub reward: u32,
    pub reached: bool,
    pub steps: u32,
    pub transitions_per_candidate: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VtaStatus {
    match e {
        Error::Io { .. } => VtaStatus::Io,
        Error::Corrupt { .. } => VtaStatus::Corrupt,
        Error::Config(_) | Error::ConfigMismatch { .. } | Error::Map(_) => VtaStatus::Config,
        Error::NonFinite { .. } | Error::Diverged { .. } => VtaStatus::NonFinite,
        Error::InvalidArgument(_) => VtaStatus::InvalidArgument,
        Error::Tensor(_) => VtaStatus::Config,
    }
}

struct Fail(VtaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let mut msg = e.to_string();
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            msg.push_str(": ");
            msg.push_str(&s.to_string());
            src = s.source();
        }
        Fail(status_of(&e), msg)
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(VtaStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VtaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VtaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            VtaStatus::Panic
        }
    }
}

unsafe fn reference<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(VtaStatus::NullPointer, "null handle".into()))
}

unsafe fn out_ref<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(VtaStatus::NullPointer, "null output pointer".into()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(VtaStatus::NullPointer, "null path".into()));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn vta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates `count` sequences of `steps` frames with the built-in generators.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn vta_dataset_generate(
    kind: VtaEnvKind,
    count: usize,
    steps: usize,
    seed: u64,
    out: *mut *mut VtaDataset,
) -> VtaStatus {
    guard(|| {
        let out = out_ref(out)?;
        if count == 0 || steps == 0 {
            return Err(invalid("count and steps must be >= 1"));
        }
        let ds = match kind {
            VtaEnvKind::Balls => balls::gen_balls(count, steps, seed),
            VtaEnvKind::Maze => maze::gen_maze(&maze::MazeMap::default_map(), count, steps, seed),
        };
        *out = Box::into_raw(Box::new(VtaDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vta_dataset_read(path: *const c_char, out: *mut *mut VtaDataset) -> VtaStatus {
    guard(|| {
        let out = out_ref(out)?;
        let ds = SequenceDataset::read(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VtaDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vta_dataset_write(ds: *const VtaDataset, path: *const c_char) -> VtaStatus {
    guard(|| {
        reference(ds)?.0.write(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vta_dataset_info(ds: *const VtaDataset, out: *mut VtaDatasetInfo) -> VtaStatus {
    guard(|| {
        let d = &reference(ds)?.0;
        *out_ref(out)? = VtaDatasetInfo {
            count: d.count,
            steps: d.steps,
            height: d.height,
            width: d.width,
            channels: d.channels,
            has_actions: d.actions.is_some(),
            has_goals: d.goals.is_some(),
            has_events: d.events.is_some(),
            event_rate: d.event_rate().unwrap_or(-1.0),
        };
        Ok(())
    })
}

/// Copies frame `t` of sequence `seq` (`height * width * channels` bytes,
/// row-major, channel last) into `buf`.
///
/// # Safety
/// `ds` must be a live handle and `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vta_dataset_frame(
    ds: *const VtaDataset,
    seq: usize,
    t: usize,
    buf: *mut u8,
    len: usize,
) -> VtaStatus {
    guard(|| {
        let d = &reference(ds)?.0;
        if seq >= d.count || t >= d.steps {
            return Err(invalid(format!("frame ({seq}, {t}) out of range {}x{}", d.count, d.steps)));
        }
        if buf.is_null() {
            return Err(Fail(VtaStatus::NullPointer, "null buffer".into()));
        }
        if len < d.frame_len() {
            return Err(invalid(format!("buffer holds {len} bytes, frame needs {}", d.frame_len())));
        }
        ptr::copy_nonoverlapping(d.frame(seq, t).as_ptr(), buf, d.frame_len());
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vta_dataset_free(ds: *mut VtaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vta_model_load(path: *const c_char, out: *mut *mut VtaModel) -> VtaStatus {
    guard(|| {
        let out = out_ref(out)?;
        let ck = Checkpoint::load(&path_arg(path)?)?;
        let model = ck.into_model(DType::F32)?;
        *out = Box::into_raw(Box::new(VtaModel { model, config: ck.config, step: ck.step }));
        Ok(())
    })
}

/// Trains a model on `ds`. `config_text` holds `key=value` lines applied
/// over the defaults (may be null). Checkpoints and metrics go to `out_dir`.
///
/// # Safety
/// `ds` must be a live handle, the strings NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vta_model_train(
    ds: *const VtaDataset,
    config_text: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut VtaModel,
) -> VtaStatus {
    guard(|| {
        let d = &reference(ds)?.0;
        let out = out_ref(out)?;
        let text = if config_text.is_null() {
            ""
        } else {
            CStr::from_ptr(config_text).to_str().map_err(|_| invalid("config is not UTF-8"))?
        };
        let config = TrainConfig::from_text(text)?;
        config.validate()?;
        let mut trainer = Trainer::new(config, DType::F32)?;
        trainer.run(d, &path_arg(out_dir)?, |_| {})?;
        let step = trainer.step();
        *out = Box::into_raw(Box::new(VtaModel { model: trainer.model, config: trainer.config, step }));
        Ok(())
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vta_model_save(m: *const VtaModel, path: *const c_char) -> VtaStatus {
    guard(|| {
        let m = reference(m)?;
        let temperature = m.config.temperature_at(m.step);
        Checkpoint::from_model(&m.model, &m.config, m.step, temperature)?.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vta_model_info(m: *const VtaModel, out: *mut VtaModelInfo) -> VtaStatus {
    guard(|| {
        let m = reference(m)?;
        let c = m.model.config();
        *out_ref(out)? = VtaModelInfo {
            mode: match c.mode {
                Mode::Hrssm => VtaMode::Hrssm,
                Mode::Rssm => VtaMode::Rssm,
            },
            image_size: c.image_size,
            channels: c.channels,
            num_actions: c.num_actions,
            seq_len: m.config.seq_len,
            context_len: m.config.context_len,
            step: m.step,
        };
        Ok(())
    })
}

/// Mean per-frame ELBO terms over the first `max_sequences` sequences.
///
/// # Safety
/// `m` and `ds` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vta_model_eval_elbo(
    m: *const VtaModel,
    ds: *const VtaDataset,
    max_sequences: usize,
    seed: u64,
    out: *mut VtaElbo,
) -> VtaStatus {
    guard(|| {
        let m = reference(m)?;
        let d = &reference(ds)?.0;
        let out = out_ref(out)?;
        d.check_compatible(&m.config)?;
        let t = evaluate_elbo(&m.model, d, &m.config, max_sequences.max(1), 32, seed)?;
        *out = VtaElbo {
            total: t.total,
            reconstruction: t.reconstruction,
            kl_boundary: t.kl_boundary,
            kl_z: t.kl_z,
            kl_s: t.kl_s,
        };
        Ok(())
    })
}

/// Boundary indicators of sequence `seq` at the posterior mode, one byte
/// per modelled step (`seq_len` bytes); 1 marks the last step of a
/// subsequence.
///
/// # Safety
/// `m` and `ds` must be live handles and `indicators` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vta_model_segment(
    m: *const VtaModel,
    ds: *const VtaDataset,
    seq: usize,
    indicators: *mut u8,
    len: usize,
) -> VtaStatus {
    guard(|| {
        let m = reference(m)?;
        let d = &reference(ds)?.0;
        if indicators.is_null() {
            return Err(Fail(VtaStatus::NullPointer, "null buffer".into()));
        }
        if seq >= d.count {
            return Err(invalid(format!("sequence {seq} out of range {}", d.count)));
        }
        if len < m.config.seq_len {
            return Err(invalid(format!("buffer holds {len} bytes, need {}", m.config.seq_len)));
        }
        d.check_compatible(&m.config)?;
        let batch = d.batch(&[seq], &m.config, m.model.dtype())?;
        let track = segment(&m.model, &batch)?.remove(0);
        ptr::copy_nonoverlapping(track.indicators().as_ptr(), indicators, track.len());
        Ok(())
    })
}

/// One navigation episode on the built-in maze with imagination length
/// `l_img`; start and goal are drawn from `seed`.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vta_model_navigate(m: *const VtaModel, seed: u64, l_img: usize, out: *mut VtaEpisode) -> VtaStatus {
    guard(|| {
        let m = reference(m)?;
        let out = out_ref(out)?;
        let map = maze::MazeMap::default_map();
        let episode = maze::Episode::sample(&map, seed, 1, usize::MAX)?;
        let o = run_episode(&m.model, &episode, l_img, seed)?;
        *out = VtaEpisode {
            reward: o.reward,
            reached: o.reached,
            steps: o.steps,
            transitions_per_candidate: o.transitions_per_candidate,
        };
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vta_model_free(m: *mut VtaModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
