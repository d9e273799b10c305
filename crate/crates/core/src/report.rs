//! Segmentation quality against generator events, plus helpers shared by the
//! command-line tool and the acceptance checks.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boundary::BoundaryTrack;
use crate::config::{Likelihood, TrainConfig};
use crate::dataset::SequenceDataset;
use crate::error::{Error, Result};
use crate::metrics::{event_steps, match_boundaries, random_starts, MatchCounts};
use crate::model::{postprocess_pixel, WorldModel};
use crate::train::segment;

/// Matching tolerance in steps between a predicted start and an event.
pub const MATCH_WINDOW: usize = 1;

#[derive(Debug, Clone)]
pub struct SegmentationReport {
    pub sequences: usize,
    pub model: MatchCounts,
    /// Same number of starts per sequence, placed uniformly at random.
    pub random: MatchCounts,
    pub tracks: Vec<BoundaryTrack>,
    /// Event steps per sequence, in modelled-step coordinates.
    pub events: Vec<Vec<usize>>,
}

impl SegmentationReport {
    pub fn summary(&self) -> String {
        format!(
            "sequences {}\nboundaries_per_sequence {:.3}\nevents_per_sequence {:.3}\n\
             precision {:.4}\nrecall {:.4}\nf1 {:.4}\nrandom_f1 {:.4}\n",
            self.sequences,
            self.model.predicted as f64 / self.sequences.max(1) as f64,
            self.model.events as f64 / self.sequences.max(1) as f64,
            self.model.precision(),
            self.model.recall(),
            self.model.f1(),
            self.random.f1(),
        )
    }
}

/// Segments sequences `indices` at the posterior mode and scores the
/// predicted subsequence starts against the dataset event flags.
pub fn segmentation_report(
    model: &WorldModel,
    dataset: &SequenceDataset,
    config: &TrainConfig,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<SegmentationReport> {
    if dataset.events.is_none() {
        return Err(Error::Config("dataset has no event flags to score against".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SegmentationReport {
        sequences: indices.len(),
        model: MatchCounts::default(),
        random: MatchCounts::default(),
        tracks: Vec::with_capacity(indices.len()),
        events: Vec::with_capacity(indices.len()),
    };
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk, config, model.dtype())?;
        for (&seq, track) in chunk.iter().zip(segment(model, &batch)?) {
            let events = event_steps(&dataset.modelled_events(seq, config).expect("events checked above"));
            let starts = track.segment_starts();
            report.model.add(match_boundaries(&starts, &events, MATCH_WINDOW));
            let random = random_starts(starts.len(), config.seq_len, &mut rng);
            report.random.add(match_boundaries(&random, &events, MATCH_WINDOW));
            report.tracks.push(track);
            report.events.push(events);
        }
    }
    Ok(report)
}

/// Converts frames in data space, any shape ending in `(H, W, C)`, back to bytes.
pub fn frames_to_bytes(frames: &Tensor, likelihood: Likelihood) -> Result<Vec<u8>> {
    let values = frames.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(values.into_iter().map(|v| postprocess_pixel(v, likelihood)).collect())
}
