use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mimalloc::MiMalloc;

use vta::checkpoint::Checkpoint;
use vta::config::{Mode, TrainConfig};
use vta::dataset::SequenceDataset;
use vta::elbo::{elbo, Boundaries, ElboNoise};
use vta::envs::{balls, maze};
use vta::metrics::paired_t_test;
use vta::model::{Frames, RolloutNoise};
use vta::planner::{evaluate, rewards_by_seed, summarize, GoalPlacement, EVAL_HEADER, MAX_REWARD};
use vta::plot::{frame_strip, histogram, line_chart, StripRow};
use vta::report::{frames_to_bytes, segmentation_report};
use vta::train::{evaluate_elbo, read_metrics, Trainer};
use vta::WorldModel;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "vta", version, about = "Temporal-abstraction world models: data, training, inspection, planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sequence dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Per-frame ELBO terms of a checkpoint on a dataset.
    EvalElbo(EvalArgs),
    /// Segmentation report, reconstruction strips and rollouts.
    Inspect(InspectArgs),
    /// Goal-directed navigation with imagination-based planning.
    Navigate(NavigateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Balls,
    Maze,
}

#[derive(Args)]
struct GenArgs {
    kind: Kind,
    #[arg(long)]
    count: usize,
    /// Frames per sequence.
    #[arg(long = "T", value_parser = clap::value_parser!(u32).range(1..))]
    steps: u32,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Maze map file; the built-in map when omitted.
    #[arg(long)]
    map: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Defaults to `maze` when the dataset has actions, else `balls`.
    #[arg(long)]
    preset: Option<Kind>,
    /// key=value config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    max_sequences: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Sequences scored for the segmentation report.
    #[arg(long, default_value_t = 500)]
    sequences: usize,
    /// Sequences drawn in the strip image.
    #[arg(long, default_value_t = 8)]
    strips: usize,
    /// Also write conditional generations from a context.
    #[arg(long)]
    rollout: bool,
    /// Context frames for `--rollout` when the model has no context split.
    #[arg(long, default_value_t = 5)]
    context_frames: usize,
}

#[derive(Args)]
struct NavigateArgs {
    /// `name=path` per model; repeat for several.
    #[arg(long = "checkpoint", value_name = "NAME=PATH", required = true)]
    checkpoints: Vec<String>,
    #[arg(long = "l-img", num_args = 1.., default_values_t = [1usize, 2, 3])]
    l_img: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    episodes: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_dist: usize,
    #[arg(long)]
    max_dist: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalElbo(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Navigate(a) => cmd_navigate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn out_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_map(path: Option<&Path>) -> anyhow::Result<maze::MazeMap> {
    Ok(match path {
        Some(p) => maze::MazeMap::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => maze::MazeMap::default_map(),
    })
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let steps = a.steps as usize;
    let ds = match a.kind {
        Kind::Balls => balls::gen_balls(a.count, steps, a.seed),
        Kind::Maze => maze::gen_maze(&load_map(a.map.as_deref())?, a.count, steps, a.seed),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    ds.write(&a.out)?;
    println!("count {}", ds.count);
    println!("T {}", ds.steps);
    println!("event_rate {:.4}", ds.event_rate().unwrap_or(0.0));
    Ok(())
}

/// Preset, then config file, then flags.
fn resolve_config(a: &TrainArgs, ds: &SequenceDataset) -> anyhow::Result<TrainConfig> {
    let kind = a.preset.unwrap_or(if ds.actions.is_some() { Kind::Maze } else { Kind::Balls });
    let mut cfg = match kind {
        Kind::Balls => TrainConfig::balls(),
        Kind::Maze => {
            let mut c = TrainConfig::maze();
            c.seq_len = ds.steps.saturating_sub(c.context_len);
            c
        }
    };
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg = TrainConfig::from_text_with(cfg, &text)?;
    }
    if let Some(m) = a.mode {
        cfg.model.mode = m;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k, v)?;
    }
    cfg.seed = a.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let ds = SequenceDataset::read(&a.data)?;
    let cfg = resolve_config(&a, &ds)?;
    let mut trainer = Trainer::new(cfg, DType::F32)?;
    let log_every = trainer.config.log_every.max(1);
    let total = trainer.config.steps;
    let frames = trainer.config.seq_len as f64;
    let summary = trainer.run(&ds, &a.out, |r| {
        if r.step % (log_every * 10) == 0 || r.step == total {
            eprintln!(
                "step {:>7}  elbo/frame {:>10.2}  temp {:.3}  grad {:.1}",
                r.step,
                r.terms.total / frames,
                r.temperature,
                r.grad_norm
            );
        }
    })?;
    let rows = read_metrics(&summary.metrics)?;
    let curve: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, r.terms.total)).collect();
    line_chart(&[curve], &a.out.join("learning_curve.png"))?;
    println!("steps {}", summary.steps);
    println!("seconds {:.1}", summary.seconds);
    println!("checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}

fn load_checkpoint(path: &Path, ds: &SequenceDataset) -> anyhow::Result<(TrainConfig, WorldModel)> {
    let ck = Checkpoint::load(path)?;
    ds.check_compatible(&ck.config).with_context(|| format!("checkpoint {} against dataset", path.display()))?;
    let model = ck.into_model(DType::F32)?;
    Ok((ck.config, model))
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ds = SequenceDataset::read(&a.data)?;
    let (cfg, model) = load_checkpoint(&a.checkpoint, &ds)?;
    out_dir(&a.out)?;
    write(&a.out.join("config.txt"), &cfg.to_text())?;
    let t = evaluate_elbo(&model, &ds, &cfg, a.max_sequences, a.batch_size, a.seed)?;
    let text = format!(
        "sequences {}\nelbo {}\nrecon {}\nkl_m {}\nkl_z {}\nkl_s {}\n",
        ds.count.min(a.max_sequences),
        t.total,
        t.reconstruction,
        t.kl_boundary,
        t.kl_z,
        t.kl_s
    );
    write(&a.out.join("elbo.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> anyhow::Result<()> {
    let ds = SequenceDataset::read(&a.data)?;
    let (cfg, model) = load_checkpoint(&a.checkpoint, &ds)?;
    out_dir(&a.out)?;
    write(&a.out.join("config.txt"), &cfg.to_text())?;
    let mcfg = model.config().clone();
    let side = mcfg.image_size;
    let frame_len = ds.frame_len();

    let n = a.sequences.min(ds.count);
    let picked = pick(ds.count, n, a.seed);
    if mcfg.mode == Mode::Hrssm && ds.events.is_some() {
        let report = segmentation_report(&model, &ds, &cfg, &picked, 32, a.seed)?;
        write(&a.out.join("segmentation.txt"), &report.summary())?;
        print!("{}", report.summary());
    }

    // input row with event markers, reconstruction row with predicted starts
    let shown: Vec<usize> = picked.iter().copied().take(a.strips).collect();
    if !shown.is_empty() {
        let batch = ds.batch(&shown, &cfg, DType::F32)?;
        let noise = ElboNoise::zeros(&mcfg, shown.len(), cfg.seq_len, DType::F32)?;
        let tracks = if mcfg.mode == Mode::Hrssm { Some(vta::train::segment(&model, &batch)?) } else { None };
        let boundaries = match &tracks {
            Some(t) => Boundaries::Frozen(t.clone()),
            None => Boundaries::Sample { temperature: cfg.temp_end },
        };
        let out = elbo(&model, &batch, &boundaries, &noise)?;
        let recon = frames_to_bytes(&out.recon_means, mcfg.likelihood)?;
        let mut rows = Vec::new();
        for (i, &seq) in shown.iter().enumerate() {
            let events = ds.modelled_events(seq, &cfg).unwrap_or_else(|| vec![0; cfg.seq_len]);
            let inputs: Vec<&[u8]> = (0..cfg.seq_len).map(|t| ds.frame(seq, cfg.context_len + t)).collect();
            rows.push(StripRow { frames: inputs, markers: events.iter().map(|&e| e != 0).collect() });
            let recon_frames: Vec<&[u8]> =
                (0..cfg.seq_len).map(|t| &recon[(i * cfg.seq_len + t) * frame_len..][..frame_len]).collect();
            let starts = match &tracks {
                Some(tr) => {
                    let s = tr[i].segment_starts();
                    (0..cfg.seq_len).map(|t| s.contains(&t)).collect()
                }
                None => vec![false; cfg.seq_len],
            };
            rows.push(StripRow { frames: recon_frames, markers: starts });
        }
        frame_strip(&rows, side, &a.out.join("strips.png"))?;
    }

    if a.rollout {
        rollouts(&a, &ds, &cfg, &model, &shown)?;
    }
    Ok(())
}

fn rollouts(a: &InspectArgs, ds: &SequenceDataset, cfg: &TrainConfig, model: &WorldModel, shown: &[usize]) -> anyhow::Result<()> {
    let mcfg = model.config();
    let ctx_len = if cfg.context_len > 0 { cfg.context_len } else { a.context_frames };
    if ctx_len == 0 || ctx_len >= ds.steps {
        bail!("rollout needs 1..{} context frames, got {ctx_len}", ds.steps);
    }
    let horizon = ds.steps - ctx_len;
    let frame_len = ds.frame_len();
    let mut store: Vec<(usize, Vec<u8>, Vec<u8>)> = Vec::new();
    for (k, &seq) in shown.iter().enumerate() {
        let bytes = &ds.sequence_frames(seq)[..ctx_len * frame_len];
        let frames = Frames::from_bytes(bytes, &[1, ctx_len, mcfg.image_size, mcfg.image_size, mcfg.channels], mcfg.likelihood, DType::F32)?;
        let c0 = model.encode_context(&frames)?;
        let actions: Option<Vec<u32>> =
            ds.sequence_actions(seq).map(|acts| acts[ctx_len..].iter().map(|&x| x as u32).collect());
        let mut noise = RolloutNoise::new(a.seed.wrapping_add(k as u64));
        let full = model.generate(Some(&c0), horizon, actions.as_deref(), false, &mut noise)?;
        let jumpy = if mcfg.mode == Mode::Hrssm {
            let mut noise = RolloutNoise::new(a.seed.wrapping_add(k as u64));
            Some(frames_to_bytes(&model.generate(Some(&c0), horizon, actions.as_deref(), true, &mut noise)?.frames, mcfg.likelihood)?)
        } else {
            None
        };
        store.push((seq, frames_to_bytes(&full.frames, mcfg.likelihood)?, jumpy.unwrap_or_default()));
    }
    let mut jumpy_rows = Vec::new();
    let mut full_rows = Vec::new();
    for (seq, full, jumpy) in &store {
        let ctx: Vec<&[u8]> = (0..ctx_len).map(|t| ds.frame(*seq, t)).collect();
        let truth: Vec<&[u8]> = (ctx_len..ds.steps).map(|t| ds.frame(*seq, t)).collect();
        let mut row = ctx.clone();
        row.extend(full.chunks(frame_len));
        full_rows.push(StripRow { frames: truth.clone(), markers: vec![] });
        full_rows.push(StripRow { markers: (0..row.len()).map(|t| t == ctx_len).collect(), frames: row });
        if !jumpy.is_empty() {
            let mut row = ctx;
            row.extend(jumpy.chunks(frame_len));
            jumpy_rows.push(StripRow { markers: (0..row.len()).map(|t| t == ctx_len).collect(), frames: row });
        }
    }
    frame_strip(&full_rows, mcfg.image_size, &a.out.join("rollout_full.png"))?;
    if !jumpy_rows.is_empty() {
        frame_strip(&jumpy_rows, mcfg.image_size, &a.out.join("rollout_jumpy.png"))?;
    }
    Ok(())
}

/// `n` distinct sequence indices in a seed-dependent order.
fn pick(count: usize, n: usize, seed: u64) -> Vec<usize> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, count, n.min(count)).into_vec()
}

fn cmd_navigate(a: NavigateArgs) -> anyhow::Result<()> {
    if a.episodes == 0 {
        bail!("--episodes must be >= 1");
    }
    if a.l_img.contains(&0) {
        bail!("--l-img values must be >= 1");
    }
    let map = load_map(a.map.as_deref())?;
    out_dir(&a.out)?;
    let mut models = Vec::new();
    let mut configs = String::new();
    for entry in &a.checkpoints {
        let (name, path) = entry.split_once('=').with_context(|| format!("--checkpoint expects name=path, got {entry:?}"))?;
        let ck = Checkpoint::load(Path::new(path))?;
        configs.push_str(&format!("# {name}\n{}", ck.config.to_text()));
        models.push((name.to_string(), ck.into_model(DType::F32)?));
    }
    write(&a.out.join("config.txt"), &configs)?;
    let refs: Vec<(String, &WorldModel)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let placement = GoalPlacement { min_dist: a.min_dist, max_dist: a.max_dist.unwrap_or(usize::MAX) };
    let records = evaluate(&refs, &map, &a.l_img, a.episodes, a.seed, placement, |_| {})?;
    let mut csv = format!("{EVAL_HEADER}\n");
    for r in &records {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write(&a.out.join("rewards.csv"), &csv)?;

    let mut summary = String::from("model,l_img,episodes,mean_reward,transitions_per_candidate\n");
    for s in summarize(&records) {
        summary.push_str(&format!(
            "{},{},{},{:.3},{:.3}\n",
            s.model, s.l_img, s.episodes, s.mean_reward, s.transitions_per_candidate
        ));
        let rewards: Vec<f64> = rewards_by_seed(&records, &s.model, s.l_img).into_iter().map(|p| p.1).collect();
        histogram(&[rewards], 20, (0.0, MAX_REWARD as f64 + 1.0), &a.out.join(format!("hist_{}_l{}.png", s.model, s.l_img)))?;
    }
    if models.len() == 2 {
        let (x, y) = (&models[0].0, &models[1].0);
        summary.push_str(&format!("\npaired test {x} > {y}\nl_img,mean_diff,t,p\n"));
        for &l in &a.l_img {
            let ra: Vec<f64> = rewards_by_seed(&records, x, l).into_iter().map(|p| p.1).collect();
            let rb: Vec<f64> = rewards_by_seed(&records, y, l).into_iter().map(|p| p.1).collect();
            match paired_t_test(&ra, &rb) {
                Some((d, t, p)) => summary.push_str(&format!("{l},{d:.3},{t:.3},{p:.5}\n")),
                None => summary.push_str(&format!("{l},,,\n")),
            }
            let both = vec![ra, rb];
            histogram(&both, 20, (0.0, MAX_REWARD as f64 + 1.0), &a.out.join(format!("hist_l{l}.png")))?;
        }
    }
    write(&a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
