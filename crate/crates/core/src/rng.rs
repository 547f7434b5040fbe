//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream derived from one
//! master seed and a stable label, so adding a consumer or changing a panel
//! length never perturbs the other streams.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A 64-bit key identifying one named stream under a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(master: u64, label: &str) -> Self {
        Self(splitmix(master ^ splitmix(fnv1a(label))))
    }

    /// A child key, e.g. one per replicate or per permutation.
    pub fn child(self, index: u64) -> Self {
        Self(splitmix(self.0 ^ splitmix(index.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    pub fn labeled(self, label: &str) -> Self {
        Self::new(self.0, label)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Uniform in `[0, 1)` addressed by `(row, col)`. ChaCha is counter-based,
    /// so each cell is read directly from its own stream position and the
    /// value does not depend on evaluation order.
    pub fn cell_uniform(self, row: usize, col: usize) -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(self.0);
        r.set_stream(col as u64);
        r.set_word_pos(2 * row as u128);
        (r.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Shorthand for `StreamKey::new(master, label).rng()`.
pub fn stream(master: u64, label: &str) -> StreamRng {
    StreamKey::new(master, label).rng()
}
