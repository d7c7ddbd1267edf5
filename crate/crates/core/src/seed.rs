//! Named random sub-streams derived from one 64-bit run seed.
//!
//! Every consumer of randomness (weight init, batch shuffles, dropout,
//! data splits) draws from its own stream so that changing one consumer
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn seed(&self) -> u64 {
        self.0
    }

    /// Seed of the sub-stream `name`.
    pub fn derive(&self, name: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.0.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn child(&self, name: &str) -> SeedStream {
        SeedStream(self.derive(name))
    }

    pub fn rng(&self, name: &str) -> Rng {
        ChaCha8Rng::seed_from_u64(self.derive(name))
    }
}
