//! Seeded random streams. Every consumer gets its own ChaCha stream keyed
//! by the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Stream for an `(tag, index)` pair, e.g. per epoch.
pub fn substream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    stream(seed, tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index)
}
