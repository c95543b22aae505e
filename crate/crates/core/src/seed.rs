//! Named RNG stream derivation.
//!
//! Every random draw in the pipeline comes from a stream derived from one
//! master seed, a stream label and an index, so that stages and workers never
//! share generator state and reruns are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used everywhere in the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive a 64-bit seed for stream `label` / `index` under `master`.
pub fn stream_seed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(label)) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream_rng(master: u64, label: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(master, label, index))
}
