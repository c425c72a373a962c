//! Deterministic, splittable random streams.
//!
//! Every stream is addressed by a path of integer keys (master seed, cell,
//! run, generation, offspring, ...). A path is folded into a 64-bit key with
//! the SplitMix64 finaliser and expanded into a ChaCha8 generator, so a
//! stream depends only on its path and never on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream keys used by the optimisers.
pub mod keys {
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const EVAL: u64 = 0x4556_414c;
    pub const SHARED_BATCH: u64 = u64::MAX;
    pub const INIT: u64 = 0x494e_4954;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedPath(u64);

impl SeedPath {
    pub fn new(seed: u64) -> Self {
        SeedPath(splitmix64(seed))
    }

    pub fn child(self, key: u64) -> Self {
        SeedPath(splitmix64(self.0 ^ splitmix64(key).rotate_left(23)))
    }

    /// Child keyed by a string (FNV-1a of its bytes).
    pub fn child_str(self, key: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in key.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.child(h)
    }

    pub fn key(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
