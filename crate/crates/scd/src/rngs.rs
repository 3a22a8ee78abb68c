//! Seed discipline.
//!
//! Every random draw in the crate comes from a ChaCha generator derived from
//! the user seed plus a purpose-specific stream id, so independent concerns
//! (splitting, init, batching, dropout, generation) never share a stream and
//! results are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SPLIT: u64 = 1;
pub const INIT: u64 = 2;
pub const BATCH: u64 = 3;
pub const DROPOUT: u64 = 4;
pub const GUESS: u64 = 5;
pub const CHECK: u64 = 6;
/// Synthetic generation uses one stream per episode, offset from this base.
pub const SYNTH_BASE: u64 = 1 << 20;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
