//! Content hashing shared by the sampler, the cache and the dataset
//! provenance fields. Every field is length-prefixed so that concatenation
//! ambiguities (`"ab" + "c"` vs `"a" + "bc"`) cannot collide.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Default)]
pub struct FieldHasher {
    inner: Sha256,
}

impl FieldHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = FieldHasher {
            inner: Sha256::new(),
        };
        h.str(domain);
        h
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.inner.update(8u64.to_le_bytes());
        self.inner.update(v.to_le_bytes());
        self
    }

    pub fn finish(self) -> [u8; 32] {
        let out = self.inner.finalize();
        let mut buf = [0u8; 32];
        buf.copy_from_slice(&out);
        buf
    }

    pub fn finish_hex(self) -> String {
        hex::encode(self.finish())
    }

    /// A ChaCha stream keyed by everything hashed so far.
    pub fn into_rng(self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.finish())
    }

    /// Uniform draw in `[0, 1)` from the top 53 bits of the digest.
    pub fn unit_interval(self) -> f64 {
        let d = self.finish();
        let mut word = [0u8; 8];
        word.copy_from_slice(&d[..8]);
        (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_prefix_separates_fields() {
        let mut a = FieldHasher::new("t");
        a.str("ab").str("c");
        let mut b = FieldHasher::new("t");
        b.str("a").str("bc");
        assert_ne!(a.finish(), b.finish());
    }

    #[test]
    fn unit_interval_in_range() {
        for i in 0..1000 {
            let mut h = FieldHasher::new("u");
            h.u64(i);
            let u = h.unit_interval();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
