//! Synthetic data sources: bouncing balls and a first-person maze.

pub mod balls;
pub mod maze;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream of sequence `index` for a generation run with `seed`.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
