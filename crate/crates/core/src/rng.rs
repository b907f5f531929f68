//! Counter-based random streams.
//!
//! Every stochastic component addresses its randomness by a tuple of integer
//! keys (seed, replication, purpose, index). The ChaCha key is derived from the
//! leading keys and the final key selects the ChaCha stream, so any stream can
//! be regenerated independently of evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags so that different consumers never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Subject = 1,
    Baseline = 2,
    Split = 3,
    Bootstrap = 4,
    Draw = 5,
    Restart = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a sequence of keys into a single 64-bit value.
pub fn mix(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x6A09_E667_F3BC_C909, |h, &k| splitmix64(h ^ splitmix64(k)))
}

/// Returns the generator for `(seed, group, purpose)` positioned on stream `index`.
pub fn stream(seed: u64, group: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let base = mix(&[seed, group, purpose as u64]);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&mix(&[base, i as u64]).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Stable 64-bit hash of a string identifier (FNV-1a).
pub fn hash_id(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
