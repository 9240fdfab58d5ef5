//! Seeded random streams.
//!
//! Every unit of parallel work (an image, a scene attempt) draws from its own
//! stream keyed by `(seed, key)`, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `key` under `seed`.
pub fn substream(seed: u64, key: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((key.len() as u64).to_le_bytes());
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn substream_indexed(seed: u64, label: &str, index: u64) -> StreamRng {
    substream(seed, &format!("{label}#{index}"))
}
