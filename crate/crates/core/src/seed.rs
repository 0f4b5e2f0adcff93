//! Stable seed derivation.
//!
//! Everything random in the crate is driven by `ChaCha8Rng` streams whose
//! seeds are derived here by hashing a base seed together with a key. SHA-256
//! keeps the derivation stable across platforms and toolchain versions, which
//! `std::hash` does not promise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Incremental builder for a derived 64-bit seed.
#[derive(Clone)]
pub struct SeedKey(Sha256);

impl SeedKey {
    pub fn new(domain: &str) -> Self {
        let mut h = Sha256::new();
        h.update((domain.len() as u64).to_le_bytes());
        h.update(domain.as_bytes());
        SeedKey(h)
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn i64(mut self, v: i64) -> Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn bytes(mut self, b: &[u8]) -> Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn finish(self) -> u64 {
        let out = self.0.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.finish())
    }
}

/// Seed for per-question randomness (e.g. multimask placement) keyed by task id.
pub fn per_task(base: u64, task_id: &str) -> u64 {
    SeedKey::new("task").u64(base).bytes(task_id.as_bytes()).finish()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
