//! Keyed random substreams.
//!
//! Every unit of parallel work (a bootstrap slot, a pilot replicate, a Monte
//! Carlo power replicate) derives its own generator from a path of integer
//! keys below the master seed. Results therefore depend only on the keys,
//! never on which worker ran what or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stage tags used by the pipelines in this crate.
pub mod tag {
    pub const PILOT: u64 = 1;
    pub const BOOTSTRAP: u64 = 2;
    pub const UCB: u64 = 3;
    pub const POWER: u64 = 4;
    pub const SIMULATE: u64 = 5;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A node in the substream tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(master_seed: u64) -> Self {
        Stream { key: splitmix64(master_seed) }
    }

    /// Child stream for `index` (a stage tag, replicate id, grid size, ...).
    pub fn child(&self, index: u64) -> Self {
        Stream { key: splitmix64(self.key ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019))) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut z = self.key;
        for chunk in seed.chunks_exact_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
