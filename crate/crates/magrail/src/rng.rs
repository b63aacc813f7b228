//! Deterministic randomness shared by the filter and the synthesis code.
//!
//! Draws are addressed, not sequenced: every consumer asks for "the draws of
//! stream `s` at slot `k`" and gets them by positioning a ChaCha8 stream
//! cipher, so results do not depend on evaluation order or worker count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One slot is 4 f64 draws = 8 ChaCha 32-bit words.
const WORDS_PER_SLOT: u128 = 8;

#[derive(Debug, Clone, Copy)]
pub struct StreamRng {
    seed: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn at(&self, stream: u64, slot: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng.set_word_pos(slot as u128 * WORDS_PER_SLOT);
        rng
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&self, stream: u64, slot: u64) -> f64 {
        self.at(stream, slot).random::<f64>()
    }

    pub fn uniform2(&self, stream: u64, slot: u64) -> (f64, f64) {
        let mut rng = self.at(stream, slot);
        (rng.random::<f64>(), rng.random::<f64>())
    }

    /// Two independent standard normals via Box-Muller (fixed word budget,
    /// unlike the ziggurat, so slots never overlap).
    pub fn normals2(&self, stream: u64, slot: u64) -> (f64, f64) {
        let mut rng = self.at(stream, slot);
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// A uniform in [0, 1) plus one standard normal, from the same slot.
    pub fn uniform_and_normal(&self, stream: u64, slot: u64) -> (f64, f64) {
        let mut rng = self.at(stream, slot);
        let u: f64 = rng.random();
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z = (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        (u, z)
    }
}

/// splitmix64 finalizer; used to derive named sub-seeds from a run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
