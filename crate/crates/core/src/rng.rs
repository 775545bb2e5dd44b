//! Named random streams derived from one 64-bit seed.
//!
//! Each component draws from its own ChaCha stream, so re-seeding the data
//! generator never perturbs the initializer and vice versa.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const ORACLE: &str = "oracle";
pub const SPLIT: &str = "split";
pub const NOISE: &str = "noise";

/// FNV-1a, stable across platforms and releases.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Generator for the stream `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}
