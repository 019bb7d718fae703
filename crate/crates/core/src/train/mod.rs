//! The toy diffusion model, its optimizer, and the two fine-tuning stages.

pub mod adam;
pub mod diffusion;
pub mod model;
pub mod planted;
pub mod qkv;
pub mod stage1;
pub mod stage2;
pub mod trainer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for one step (or one item) of a seeded run: same seed and step
/// always give the same stream, independent of what ran before.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}
