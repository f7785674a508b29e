//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 keyed by a user seed,
//! with independent streams selected by the 64-bit ChaCha stream id. Stream 0
//! is reserved for world-level draws and stream `1 + i` belongs to sample `i`,
//! so samples can be generated in any order (or in parallel) and still
//! reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn world_rng(seed: u64) -> LabRng {
    stream_rng(seed, 0)
}

pub fn sample_rng(seed: u64, sample_index: usize) -> LabRng {
    stream_rng(seed, 1 + sample_index as u64)
}
