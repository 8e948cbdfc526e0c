//! Deterministic random streams split by stage name and replicate index.
//!
//! A replicate's stream depends only on `(root, stage, index)`, so parallel
//! evaluation in any order reproduces the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root of a tree of independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Subtree for a named stage; nested stages compose.
    pub fn child(&self, stage: &str) -> Self {
        Self { root: mix(self.root, stage) }
    }

    /// Stream for replicate `index` of `stage`.
    pub fn stream(&self, stage: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.root, stage));
        rng.set_stream(index);
        rng
    }
}

fn mix(root: u64, stage: &str) -> u64 {
    // FNV-1a of the stage name, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
