//! Seeded randomness.
//!
//! All draws go through [`RngState`], a ChaCha8 stream keyed by a 64-bit
//! seed. Independent sub-streams are derived with [`RngState::fork`], which
//! mixes the parent's *seed* (not its position) with a label through
//! SplitMix64. Forking therefore never perturbs the parent stream, and a
//! given `(root seed, label path)` always names the same stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash of a stream label.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent named sub-stream.
    pub fn fork(&self, label: &str) -> RngState {
        self.fork_index(label_hash(label))
    }

    /// Derives an independent sub-stream keyed by an integer (epoch, generation id, ...).
    pub fn fork_index(&self, index: u64) -> RngState {
        RngState::new(splitmix64(splitmix64(self.seed) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    /// Tensor of i.i.d. standard-normal entries.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// `amount` distinct indices from `0..length`, uniformly without replacement.
    pub fn sample_indices(&mut self, length: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, length, amount.min(length)).into_vec()
    }
}
