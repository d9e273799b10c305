//! Times a few training steps at full model size.
//!
//! `cargo run --release --example bench -- <batch> <hrssm|rssm> [maze]`

use std::time::Instant;

use candle_core::DType;
use mimalloc::MiMalloc;
use vta::config::{Mode, TrainConfig};
use vta::envs::{balls, maze};
use vta::train::Trainer;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(16);
    let mode: Mode = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(Mode::Hrssm);
    let is_maze = args.get(3).is_some_and(|s| s == "maze");
    let (ds, mut cfg) = if is_maze {
        (maze::gen_maze(&maze::MazeMap::default_map(), 64, 25, 0), TrainConfig::maze())
    } else {
        (balls::gen_balls(64, 20, 0), TrainConfig::balls())
    };
    cfg.model.mode = mode;
    cfg.batch_size = batch;
    let mut trainer = Trainer::new(cfg, DType::F32)?;
    println!("params {}", trainer.model.params().num_elements());
    for i in 0..6 {
        let idx = trainer.next_indices(ds.count);
        let b = ds.batch(&idx, &trainer.config, DType::F32)?;
        let t = Instant::now();
        let r = trainer.train_step(&b)?;
        println!("step {i} {:.3}s elbo {:.1} grad {:.1}", t.elapsed().as_secs_f64(), r.terms.total, r.grad_norm);
    }
    Ok(())
}
