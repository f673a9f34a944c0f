//! Seeded random streams.
//!
//! All randomness in a run flows from one root seed split into named
//! streams (data, augment, prompt, init, ...) so that two configurations
//! differing in a single flag still draw identical values everywhere else.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a deterministic ChaCha20 stream from `(root_seed, label)`.
pub fn stream(root_seed: u64, label: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed)
}

/// Stream further keyed by a step counter, for per-step draws.
pub fn stream_at(root_seed: u64, label: &str, step: u64) -> ChaCha20Rng {
    stream(root_seed, &format!("{label}#{step}"))
}
