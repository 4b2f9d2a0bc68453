//! Deterministic RNG derivation: every pipeline stage draws from a stream
//! keyed by the master seed and a stage label, so runs are reproducible and
//! stages can be parallelized without sharing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// RNG for `(master_seed, label)`, independent across labels.
pub fn derive_rng(master_seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Convenience for indexed sub-streams, e.g. per scene or per restart.
pub fn derive_rng_indexed(master_seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    derive_rng(master_seed, &format!("{label}/{index}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = derive_rng(7, "stage");
        let mut b = derive_rng(7, "stage");
        let mut c = derive_rng(7, "other");
        let va: f64 = a.random();
        assert_eq!(va, b.random::<f64>());
        assert_ne!(va, c.random::<f64>());
    }
}
