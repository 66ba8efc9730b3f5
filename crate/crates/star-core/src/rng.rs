//! Seed management: every stage derives its stream from a run seed and
//! a purpose tag so adding a consumer never shifts another's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream for `(seed, tag)`. FNV-1a over the tag keeps
/// streams for different purposes disjoint.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&h.to_le_bytes());
    key[16..24].copy_from_slice(&seed.rotate_left(17).to_le_bytes());
    key[24..32].copy_from_slice(&h.rotate_left(31).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
