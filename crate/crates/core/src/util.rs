//! Small deterministic helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Platform-independent 64-bit hash of a sequence of byte strings. Parts
/// are length-prefixed so `["ab", "c"]` and `["a", "bc"]` differ.
pub fn stable_hash<I, B>(parts: I) -> u64
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut h = Sha256::new();
    for p in parts {
        let p = p.as_ref();
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn rng_from<I, B>(parts: I) -> ChaCha8Rng
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    ChaCha8Rng::seed_from_u64(stable_hash(parts))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Whitespace tokenization used for simulated token counts, approximate
/// usage when an upstream API omits it, and token histograms.
pub fn whitespace_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Uniform value in [0, 1) derived from a hash.
pub fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}
