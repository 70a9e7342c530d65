//! Deterministic derivation of independent RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream keyed by a base seed, a purpose tag and integer coordinates such
/// as `(epoch, step, sample)`. Streams never depend on execution order.
pub fn derive_rng(seed: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Stream keyed by a string id (sample ids), independent of dataset order.
pub fn derive_rng_for(seed: u64, tag: &str, id: &str) -> ChaCha8Rng {
    derive_rng(seed, &format!("{tag}/{id}"), &[])
}
