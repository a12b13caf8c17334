//! Named random streams derived from one root seed.
//!
//! A stream is addressed by `(root, name, index)`; the index is usually the
//! training step or an episode number, so any step can be replayed without
//! advancing a shared generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const FLOW_NOISE: &str = "flow-noise";
pub const EVAL: &str = "eval";

pub const STREAMS: [&str; 5] = [DATA, INIT, DROPOUT, FLOW_NOISE, EVAL];

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed of a named stream, as recorded in run logs.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    splitmix(root ^ fnv1a(name))
}

/// Generator for `(root, name, index)`.
pub fn stream(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(root, name));
    rng.set_stream(index);
    rng
}

/// Plain generator from an explicit seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
