//! Order-independent randomness: every random draw is keyed by a hash of
//! its inputs, so results never depend on call order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Builder for a hashed RNG key. Parts are length-prefixed so distinct
/// tuples never collide by concatenation.
#[derive(Clone)]
pub struct SeedKey(Sha256);

impl SeedKey {
    pub fn new(domain: &str) -> Self {
        SeedKey(Sha256::new()).str(domain)
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.0.update([8u8]);
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn str(mut self, s: &str) -> Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub fn rng(self) -> ChaCha8Rng {
        let digest = self.0.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// First 8 bytes of the digest, for deriving child seeds.
    pub fn derive(self) -> u64 {
        let digest = self.0.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
