//! Training loop, held-out evaluation and posterior segmentation.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boundary::BoundaryTrack;
use crate::checkpoint::Checkpoint;
use crate::config::{Mode, TrainConfig};
use crate::dataset::SequenceDataset;
use crate::elbo::{elbo, Boundaries, ElboNoise, ElboTerms, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::WorldModel;
use crate::optim::{clip_scale, collect_gradients, global_norm, Amsgrad};

pub const METRICS_HEADER: &str = "step,elbo,recon,kl_m,kl_z,kl_s,temperature";

/// Per-frame ELBO terms of one logged step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub terms: ElboTerms,
    pub temperature: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, t.total, t.reconstruction, t.kl_boundary, t.kl_z, t.kl_s, self.temperature
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::InvalidArgument(format!("metric row needs 7 fields: {line:?}")));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number {:?}", f[i])));
        Ok(Self {
            step: f[0].parse().map_err(|_| Error::InvalidArgument(format!("bad step {:?}", f[0])))?,
            terms: ElboTerms { total: num(1)?, reconstruction: num(2)?, kl_boundary: num(3)?, kl_z: num(4)?, kl_s: num(5)? },
            temperature: num(6)?,
        })
    }
}

/// Reads a metric CSV written by [`Trainer`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Corrupt { path: path.to_path_buf(), reason: "unexpected metric header".into() });
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricRow::parse).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub step: usize,
    /// Batch-mean terms in nats per sequence.
    pub terms: ElboTerms,
    pub goal_loss: Option<f64>,
    pub grad_norm: f64,
    pub temperature: f64,
}

/// Owns the model, optimiser and random streams of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: WorldModel,
    optimizer: Amsgrad,
    order_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let model = WorldModel::new(config.model.clone(), dtype, config.seed)?;
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(k);
            r
        };
        Ok(Self {
            optimizer: Amsgrad::new(config.learning_rate, config.optimizer),
            order_rng: stream(11),
            noise_rng: stream(12),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            model,
            config,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Next minibatch of sequence indices, reshuffling at each epoch.
    pub fn next_indices(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size.min(count.max(1)) {
            if self.cursor >= self.order.len() {
                self.order = (0..count).collect();
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimiser step on `batch`. Fails without updating on a
    /// non-finite loss or gradient.
    pub fn train_step(&mut self, batch: &SequenceBatch) -> Result<StepReport> {
        let (b, t) = batch.dims()?;
        let temperature = self.config.temperature_at(self.step);
        let noise = ElboNoise::draw(&mut self.noise_rng, &self.config.model, b, t, self.model.dtype())?;
        let diverged = |what: String, step| Error::Diverged { step, what };
        let out = elbo(&self.model, batch, &Boundaries::Sample { temperature }, &noise).map_err(|e| match e {
            Error::NonFinite { what, .. } => diverged(what, self.step),
            e => e,
        })?;
        out.terms.check()?;
        let mut loss = (out.total.neg()? / t as f64)?;
        let mut goal_loss = None;
        if let (Some(goals), true) = (&batch.goals, self.model.config().goal_hidden > 0) {
            let g = self.model.goal_loss(goals, &out.planning_states)?;
            goal_loss = Some(g.to_dtype(DType::F64)?.to_scalar::<f64>()?);
            loss = (loss + g)?;
        }
        let grads = loss.backward()?;
        let flat = collect_gradients(self.model.params(), &grads).map_err(|e| match e {
            Error::NonFinite { what, .. } => diverged(what, self.step),
            e => e,
        })?;
        let norm = global_norm(&flat);
        self.optimizer.apply(self.model.params(), &flat, clip_scale(norm, self.config.grad_clip))?;
        let bad = self.model.non_finite_params();
        if !bad.is_empty() {
            return Err(diverged(format!("parameters {}", bad.join(", ")), self.step));
        }
        self.step += 1;
        Ok(StepReport { step: self.step, terms: out.terms, goal_loss, grad_norm: norm, temperature })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_model(&self.model, &self.config, self.step, self.config.temperature_at(self.step))
    }

    /// Runs `config.steps` steps on `dataset`, writing `metrics.csv`,
    /// `config.txt` and periodic checkpoints into `out_dir`. On divergence
    /// the error is returned and the last checkpoint on disk is kept.
    pub fn run(&mut self, dataset: &SequenceDataset, out_dir: &Path, mut progress: impl FnMut(&StepReport)) -> Result<TrainSummary> {
        dataset.check_compatible(&self.config)?;
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let config_path = out_dir.join("config.txt");
        fs::write(&config_path, self.config.to_text()).map_err(|e| Error::io(&config_path, e))?;
        let metrics_path = out_dir.join("metrics.csv");
        let mut metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
        let goal_path = out_dir.join("goal_loss.csv");
        let mut goal_log = if self.config.model.goal_hidden > 0 {
            let mut f = File::create(&goal_path).map_err(|e| Error::io(&goal_path, e))?;
            writeln!(f, "step,goal_loss").map_err(|e| Error::io(&goal_path, e))?;
            Some(f)
        } else {
            None
        };
        let started = Instant::now();
        let mut last_checkpoint = None;
        let mut last = None;
        let dtype = self.model.dtype();
        while self.step < self.config.steps {
            let indices = self.next_indices(dataset.count);
            let batch = dataset.batch(&indices, &self.config, dtype)?;
            let report = self.train_step(&batch)?;
            if report.step % self.config.log_every.max(1) == 0 || report.step == self.config.steps {
                let row = MetricRow {
                    step: report.step,
                    terms: report.terms.per_frame(self.config.seq_len),
                    temperature: report.temperature,
                };
                writeln!(metrics, "{}", row.csv()).map_err(|e| Error::io(&metrics_path, e))?;
                if let (Some(f), Some(g)) = (goal_log.as_mut(), report.goal_loss) {
                    writeln!(f, "{},{g}", report.step).map_err(|e| Error::io(&goal_path, e))?;
                }
            }
            if self.config.checkpoint_every > 0 && report.step % self.config.checkpoint_every == 0 {
                let path = out_dir.join(format!("checkpoint-{:07}.vta", report.step));
                self.checkpoint()?.save(&path)?;
                last_checkpoint = Some(path);
            }
            progress(&report);
            last = Some(report);
        }
        let final_path = out_dir.join("final.vta");
        self.checkpoint()?.save(&final_path)?;
        Ok(TrainSummary {
            steps: self.step,
            last,
            metrics: metrics_path,
            final_checkpoint: final_path,
            last_periodic_checkpoint: last_checkpoint,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: Option<StepReport>,
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
    pub last_periodic_checkpoint: Option<PathBuf>,
    pub seconds: f64,
}

/// Appends a line to a text log, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Mean per-frame ELBO terms over the sequences of `dataset`, one
/// posterior sample each, with common noise drawn from `seed`.
pub fn evaluate_elbo(
    model: &WorldModel,
    dataset: &SequenceDataset,
    config: &TrainConfig,
    max_sequences: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ElboTerms> {
    let n = dataset.count.min(max_sequences);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::with_capacity(n);
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let batch = dataset.batch(&idx, config, model.dtype())?;
        let noise = ElboNoise::draw(&mut rng, model.config(), idx.len(), config.seq_len, model.dtype())?;
        let out = elbo(model, &batch, &Boundaries::Sample { temperature: config.temp_end }, &noise)?;
        out.terms.check()?;
        all.extend(out.per_sequence.iter().map(|t| t.per_frame(config.seq_len)));
    }
    Ok(ElboTerms::mean(&all))
}

/// Posterior boundaries at the mode of `q(m_t | X)` (no Gumbel noise), with
/// the counter limits applied.
pub fn segment(model: &WorldModel, batch: &SequenceBatch) -> Result<Vec<BoundaryTrack>> {
    if model.config().mode != Mode::Hrssm {
        return Err(Error::Config("segmentation needs the hierarchical model".into()));
    }
    let (b, t) = batch.dims()?;
    let enc = model.encode_frames(&batch.frames)?;
    Ok(model.decompose(&enc, 1.0, &vec![0.0; b * t])?.tracks)
}

/// `(B, T)` ids as a tensor.
pub fn actions_tensor(ids: Vec<u32>, b: usize, t: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(ids, (b, t), &candle_core::Device::Cpu)?)
}
