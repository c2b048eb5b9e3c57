//! Seeded random streams keyed by `(seed, purpose)`.
//!
//! Each consumer (initialization, batching, dropout, gate noise, splits,
//! attacks) draws from its own ChaCha stream, so running work in a different
//! order or on more threads never changes any single stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, purpose: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(purpose.as_bytes()));
    rng
}

/// Derives a child seed, e.g. one per restart or per worker.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    use rand::RngCore;
    stream(seed, purpose).next_u64()
}
