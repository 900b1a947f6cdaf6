//! Seed derivation.
//!
//! Every random stream in the pipeline is keyed by `(master_seed, purpose)`:
//! the derived seed is the first eight bytes (little-endian) of
//! `SHA-256(master_seed.to_le_bytes() || purpose)`. A run is therefore fully
//! reproducible from its master seed, and streams with different purposes are
//! independent regardless of the order in which they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, purpose: &str) -> Rng {
    rng_from_seed(derive_seed(master, purpose))
}
