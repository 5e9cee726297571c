//! Seeds and the splittable generator behind every random draw.
//!
//! A [`Seed`] is a plain 64-bit value. Independent streams are obtained with
//! [`Seed::derive`], which hashes `(seed, stream)` through SplitMix64, so a
//! replicate's randomness depends only on the master seed and its index and
//! never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    pub const fn new(value: u64) -> Self {
        Seed(value)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Child seed for substream `stream`.
    pub fn derive(self, stream: u64) -> Seed {
        Seed(splitmix64(splitmix64(self.0) ^ stream.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Child seed keyed by a string tag, e.g. a pipeline stage name.
    pub fn derive_tag(self, tag: &str) -> Seed {
        // FNV-1a; stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.derive(h)
    }

    pub fn rng(self) -> SimRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(value: u64) -> Self {
        Seed(value)
    }
}
