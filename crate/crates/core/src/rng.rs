//! Seed splitting.
//!
//! Every stochastic stage draws from a ChaCha8 stream keyed by
//! `(master seed, label, index)`:
//!
//! ```text
//! stream_seed = splitmix64(master ^ fnv1a64(label) ^ splitmix64(index))
//! ```
//!
//! Streams are assigned to work units (paths, worlds, replications), never to
//! threads, so results do not depend on the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GENERATOR: &str = "ChaCha8Rng (rand_chacha 0.9), splitmix64/fnv1a64 stream split";

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream_seed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(master ^ fnv1a64(label) ^ splitmix64(index))
}

pub fn stream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, label, index))
}
