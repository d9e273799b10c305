//! Acceptance report: one PASS/FAIL line per criterion. Always exits 0 so the
//! workspace test run completes; failures are reported, not hidden.
//!
//! Criteria 5-7 read trained checkpoints from `runs/` (see
//! `scripts/reproduce.sh`); `VTA_RUNS` points elsewhere.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use mimalloc::MiMalloc;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use vta::boundary::BoundaryTrack;
use vta::checkpoint::Checkpoint;
use vta::config::{Mode, ModelConfig, TrainConfig};
use vta::elbo::{elbo, grad_check, Boundaries, ElboNoise, ElboTerms};
use vta::envs::balls::gen_balls;
use vta::envs::maze::{gen_maze, MazeMap};
use vta::metrics::paired_t_test;
use vta::planner::{evaluate, rewards_by_seed, summarize, EvalRecord, GoalPlacement};
use vta::report::segmentation_report;
use vta::train::{evaluate_elbo, read_metrics};
use vta::WorldModel;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const GRAD_TOL: f64 = 1e-4;
const F1_MIN: f64 = 0.5;
const F1_RATIO: f64 = 2.0;
const PARITY: f64 = 0.10;
const ALPHA: f64 = 0.05;
const EPISODES: usize = 500;
const L_IMGS: [usize; 3] = [1, 2, 3];

fn runs_dir() -> PathBuf {
    std::env::var_os("VTA_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../runs"))
}

fn load(path: &Path) -> Result<(Checkpoint, WorldModel), String> {
    if !path.exists() {
        return Err(format!("{} missing; run scripts/reproduce.sh first", path.display()));
    }
    let ck = Checkpoint::load(path).map_err(|e| e.to_string())?;
    let model = ck.into_model(DType::F32).map_err(|e| e.to_string())?;
    Ok((ck, model))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Identity on fresh batches of both model kinds plus every logged training
/// step in `runs/`.
fn c1_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut batches = 0;
    for mode in [Mode::Hrssm, Mode::Rssm] {
        for dtype in [DType::F32, DType::F64] {
            let m = WorldModel::new(ModelConfig::tiny(mode), dtype, 5).map_err(err)?;
            for _ in 0..25 {
                let batch = common::random_batch(&m, 4, 8, &mut rng);
                let noise = ElboNoise::draw(&mut rng, m.config(), 4, 8, dtype).map_err(err)?;
                let out = elbo(&m, &batch, &Boundaries::Sample { temperature: 0.5 }, &noise).map_err(err)?;
                for t in std::iter::once(&out.terms).chain(&out.per_sequence) {
                    worst = worst.max(t.identity_error());
                }
                batches += 1;
            }
        }
    }
    let mut logged = 0;
    for run in ["balls-hrssm", "maze-hrssm", "maze-rssm"] {
        let path = runs_dir().join(run).join("metrics.csv");
        if let Ok(rows) = read_metrics(&path) {
            for r in rows {
                worst = worst.max(r.terms.identity_error());
                logged += 1;
            }
        }
    }
    let detail = format!("{batches} fresh batches, {logged} logged training steps, max relative error {worst:.2e}");
    if worst < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c2_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for mode in [Mode::Hrssm, Mode::Rssm] {
        let m = WorldModel::new(ModelConfig::tiny(mode), DType::F64, 6).map_err(err)?;
        let batch = common::random_batch(&m, 2, 4, &mut rng);
        let limits = m.limits();
        let tracks: Vec<BoundaryTrack> = (0..2)
            .map(|_| BoundaryTrack::from_proposals((0..4).map(|_| rand::Rng::gen_bool(&mut rng, 0.4)), limits))
            .collect();
        let noise = ElboNoise::draw(&mut rng, m.config(), 2, 4, DType::F64).map_err(err)?;
        let r = grad_check(&m, &batch, &tracks, &noise, 3e-4, 300, &mut rng).map_err(err)?;
        worst = worst.max(r.max_relative_error);
        coords += r.coords.len();
    }
    let detail = format!("{coords} coordinates, max relative error {worst:.2e} (tol {GRAD_TOL:e})");
    if worst < GRAD_TOL && coords >= 600 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c3_structural() -> Outcome {
    let results = common::structural_suite();
    let failed: Vec<String> = results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    let gaps = common::relaxation_gap(10_000);
    let (_, mean, max) = *gaps.last().unwrap();
    let gap = format!("relaxed-vs-hard gap at tau 0.01 over 10^4 draws: mean {mean:.1e}, max {max:.3}");
    if failed.is_empty() {
        Ok(format!("{} checks exact; {gap}", results.len()))
    } else {
        Err(failed.join("; "))
    }
}

fn c4_kl() -> Outcome {
    common::mc_kl_oracle(20, 100_000)
}

fn c5_segmentation() -> Outcome {
    let (ck, model) = load(&runs_dir().join("balls-hrssm/final.vta"))?;
    let cfg = &ck.config;
    let c = &cfg.model;
    if (c.max_segments, c.max_segment_len, cfg.seq_len) != (5, 10, 20) {
        return Err(format!("checkpoint has N_max {} l_max {} T {}", c.max_segments, c.max_segment_len, cfg.seq_len));
    }
    // held-out sequences from a seed never used for training
    let ds = gen_balls(1000, cfg.seq_len + cfg.context_len, 999);
    let idx: Vec<usize> = (0..ds.count).collect();
    let r = segmentation_report(&model, &ds, cfg, &idx, 50, 7).map_err(err)?;
    let (f1, base) = (r.model.f1(), r.random.f1());
    let detail = format!(
        "step {}, {} sequences: F1 {f1:.3} (P {:.3} R {:.3}), random F1 {base:.3}, ratio {:.2}",
        ck.step,
        r.sequences,
        r.model.precision(),
        r.model.recall(),
        f1 / base.max(1e-12)
    );
    if f1 >= F1_MIN && f1 >= F1_RATIO * base {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c6_parity() -> Outcome {
    let (hk, hm) = load(&runs_dir().join("maze-hrssm/final.vta"))?;
    let (rk, rm) = load(&runs_dir().join("maze-rssm/final.vta"))?;
    if hk.step != rk.step {
        return Err(format!("unequal optimiser steps: {} vs {}", hk.step, rk.step));
    }
    let map = MazeMap::default_map();
    let ds = gen_maze(&map, 500, hk.config.seq_len + hk.config.context_len, 998);
    let per_frame = |m: &WorldModel, cfg: &TrainConfig| -> Result<ElboTerms, String> {
        evaluate_elbo(m, &ds, cfg, ds.count, 25, 11).map_err(err)
    };
    let (h, r) = (per_frame(&hm, &hk.config)?, per_frame(&rm, &rk.config)?);
    let rel = (h.total - r.total).abs() / r.total.abs();
    let detail = format!(
        "step {}, held-out per-frame ELBO HRSSM {:.2} vs RSSM {:.2}, relative gap {:.1}%",
        hk.step,
        h.total,
        r.total,
        100.0 * rel
    );
    if rel <= PARITY {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Navigation records for both maze models, cached by checkpoint content.
fn navigation() -> Result<Vec<EvalRecord>, String> {
    let paths = [runs_dir().join("maze-hrssm/final.vta"), runs_dir().join("maze-rssm/final.vta")];
    let mut hash = Sha256::new();
    for p in &paths {
        hash.update(fs::read(p).map_err(|e| format!("{}: {e}; run scripts/reproduce.sh first", p.display()))?);
    }
    hash.update(format!("{EPISODES} {L_IMGS:?}"));
    let key: String = hash.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    let cache = runs_dir().join(format!("acceptance/nav-{key}.csv"));
    if let Ok(text) = fs::read_to_string(&cache) {
        return text.lines().map(parse_record).collect();
    }
    let (_, h) = load(&paths[0])?;
    let (_, r) = load(&paths[1])?;
    let models = [("hrssm".to_string(), &h), ("rssm".to_string(), &r)];
    let records = evaluate(&models, &MazeMap::default_map(), &L_IMGS, EPISODES, 50_000, GoalPlacement::default(), |_| {})
        .map_err(err)?;
    let mut text = String::new();
    for r in &records {
        let _ = writeln!(text, "{},{},{},{},{}", r.model, r.l_img, r.seed, r.reward, r.transitions_per_candidate);
    }
    fs::create_dir_all(cache.parent().unwrap()).map_err(err)?;
    fs::write(&cache, text).map_err(err)?;
    Ok(records)
}

fn parse_record(line: &str) -> Result<EvalRecord, String> {
    let f: Vec<&str> = line.split(',').collect();
    let bad = || format!("bad cached record {line:?}");
    if f.len() != 5 {
        return Err(bad());
    }
    Ok(EvalRecord {
        model: f[0].to_string(),
        l_img: f[1].parse().map_err(|_| bad())?,
        seed: f[2].parse().map_err(|_| bad())?,
        reward: f[3].parse().map_err(|_| bad())?,
        transitions_per_candidate: f[4].parse().map_err(|_| bad())?,
    })
}

fn c7_navigation(records: &Result<Vec<EvalRecord>, String>) -> Outcome {
    let records = records.as_ref().map_err(Clone::clone)?;
    let mut wins = 0;
    let mut parts = Vec::new();
    for l in L_IMGS {
        let h = rewards_by_seed(records, "hrssm", l);
        let r = rewards_by_seed(records, "rssm", l);
        if h.len() < EPISODES || h.iter().map(|p| p.0).ne(r.iter().map(|p| p.0)) {
            return Err(format!("l_img {l}: episodes are not shared-seed pairs"));
        }
        let (a, b): (Vec<f64>, Vec<f64>) = h.iter().zip(&r).map(|(x, y)| (x.1, y.1)).unzip();
        let (diff, _, p) = paired_t_test(&a, &b).ok_or("paired test undefined")?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let win = diff > 0.0 && p < ALPHA;
        wins += win as usize;
        parts.push(format!("l{l}: {:.2} vs {:.2} p={p:.3}", mean(&a), mean(&b)));
    }
    let detail = format!("{EPISODES} episodes, HRSSM wins {wins}/3 [{}]", parts.join(", "));
    if wins >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Measured per-candidate transition counts on a tiny model of each kind
/// and, when available, on every navigation configuration.
fn c8_compute(records: &Result<Vec<EvalRecord>, String>) -> Outcome {
    let map = MazeMap::default_map();
    let mut checked = 0;
    for mode in [Mode::Hrssm, Mode::Rssm] {
        let mut cfg = ModelConfig::tiny(mode);
        cfg.image_size = 32;
        cfg.conv_channels = vec![2, 2, 2];
        cfg.likelihood = vta::Likelihood::Gaussian;
        cfg.goal_hidden = 4;
        let m = WorldModel::new(cfg, DType::F32, 3).map_err(err)?;
        let models = [(mode.to_string(), &m)];
        let recs = evaluate(&models, &map, &L_IMGS, 3, 7, GoalPlacement { min_dist: 2, max_dist: usize::MAX }, |_| {})
            .map_err(err)?;
        for r in recs {
            if r.transitions_per_candidate != r.l_img as f64 {
                return Err(format!("tiny {mode} l_img {}: {} transitions per candidate", r.l_img, r.transitions_per_candidate));
            }
            checked += 1;
        }
    }
    let mut trained = "trained models unavailable".to_string();
    if let Ok(records) = records {
        for s in summarize(records) {
            if s.transitions_per_candidate != s.l_img as f64 {
                return Err(format!("{} l_img {}: {} transitions per candidate", s.model, s.l_img, s.transitions_per_candidate));
            }
        }
        trained = format!("{} trained-model episodes", records.len());
    }
    Ok(format!("exactly l_img per candidate on {checked} tiny-model episodes and {trained}"))
}

fn main() {
    let criteria: [Criterion; 4] = [
        ("ELBO decomposition identity", c1_identity),
        ("gradient check", c2_gradients),
        ("structural invariants", c3_structural),
        ("Monte Carlo KL oracle", c4_kl),
    ];
    let mut n = 0;
    let mut report = |name: &str, started: Instant, outcome: Outcome| {
        n += 1;
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} PASS {name}: {d} [{secs:.0}s]"),
            Err(d) => println!("criterion {n} FAIL {name}: {d} [{secs:.0}s]"),
        }
    };
    for (name, run) in criteria {
        let t = Instant::now();
        report(name, t, run());
    }
    let t = Instant::now();
    report("segmentation discovery", t, c5_segmentation());
    let t = Instant::now();
    report("ELBO parity", t, c6_parity());
    let t = Instant::now();
    let records = navigation();
    report("navigation advantage", t, c7_navigation(&records));
    let t = Instant::now();
    report("compute accounting", t, c8_compute(&records));
}
