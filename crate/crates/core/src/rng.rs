//! Counter-based random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! master seed and a path of counters (replication index, draw index, ...).
//! The key is a pure function of the path, so any draw can be regenerated in
//! isolation and parallel execution yields the same draws as sequential
//! execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tags separating independent uses of one master seed.
pub mod tag {
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const BOOTSTRAP: u64 = 0x424f_4f54;
    pub const NORMAL: u64 = 0x4e4f_524d;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in the substream tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Substream {
    key: u64,
}

impl Substream {
    pub fn root(seed: u64) -> Self {
        Self {
            key: splitmix64(seed ^ 0x6d6f_6d73_656c_0000),
        }
    }

    pub fn child(self, index: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019))),
        }
    }

    /// Derived 64-bit seed, usable as the root of another tree.
    pub fn seed(self) -> u64 {
        self.key
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        let mut k = self.key;
        for chunk in bytes.chunks_mut(8) {
            k = splitmix64(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }
}
