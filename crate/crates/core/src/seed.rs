//! Named sub-seeds derived from one run seed.
//!
//! `derive(seed, name)` is the first eight bytes (little-endian) of
//! `SHA-256(seed.to_le_bytes() || name)`. Each consumer of randomness uses
//! its own name, so adding a stage never shifts another stage's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const MASKS: &str = "masks";
pub const SPLIT: &str = "split";

pub fn derive(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, name))
}
