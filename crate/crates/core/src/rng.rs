//! Counter-based random streams.
//!
//! Every random draw in a run comes from a ChaCha8 stream keyed by the run's
//! master seed and a 64-bit stream id. Stream ids are derived from a component
//! tag, an iteration counter and a sample index, so batch elements can be
//! drawn in any order (or in parallel) and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStreamSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStreamSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    /// Stream for sample `sample` of component `tag` at `iteration`.
    pub fn derive(master_seed: u64, tag: &str, iteration: u64, sample: u64) -> Self {
        Self::new(master_seed, stream_id(tag, iteration, sample))
    }

    /// Child stream of this one; used when a single draw fans out into a
    /// fixed number of sub-draws (e.g. several Q rollouts per sample).
    pub fn child(&self, index: u64) -> Self {
        Self::new(
            self.master_seed,
            mix(self.stream_id ^ mix(index.wrapping_add(0x5851_f42d_4c95_7f2d))),
        )
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Packs an outer/inner iteration pair into one counter.
pub fn iteration_id(t: usize, k: usize) -> u64 {
    ((t as u64) << 32) | (k as u64 & 0xffff_ffff)
}

pub fn stream_id(tag: &str, iteration: u64, sample: u64) -> u64 {
    let mut h = fnv1a(tag.as_bytes());
    h = mix(h ^ iteration);
    mix(h ^ sample.rotate_left(29))
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
