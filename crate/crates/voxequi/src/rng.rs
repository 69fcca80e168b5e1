//! Deterministic RNG stream derivation.
//!
//! Every source of randomness in the crate is an explicit [`ChaCha12Rng`]
//! derived from a master seed plus a stream path, so parallel and serial
//! execution consume identical streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha12Rng;

/// Derive an independent RNG stream from `(master, path)`.
///
/// The same `(master, path)` always yields the same stream; distinct paths
/// yield streams separated by SHA-256.
pub fn stream(master: u64, path: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}
