//! Deterministic counter-based pseudo-random generation.
//!
//! Output `i` of a stream depends only on `(seed, i)` — there is no hidden
//! mutable state beyond the counter — so streams are platform-independent and
//! can be split into independent substreams per worker, per epoch, or per
//! purpose without coordination.

use crate::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLIT_SALT: u64 = 0xA24B_AED4_963E_E407;

/// SplitMix64 finalizer: a 64-bit bijective mixer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent substream. Children with distinct tags (and the
    /// parent itself) produce unrelated sequences.
    pub fn substream(&self, tag: u64) -> Rng {
        Rng::new(mix64(
            self.seed ^ tag.wrapping_mul(SPLIT_SALT).wrapping_add(GOLDEN_GAMMA),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe as a logarithm argument.
    fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, n)`. Uses the multiply-shift bound; the bias of at
    /// most `n / 2^64` is irrelevant at our scales and keeps the stream
    /// consumption fixed at one draw.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// One standard-normal draw (Box-Muller, cosine branch). Consumes exactly
    /// two raw values so positions in the stream stay predictable.
    pub fn normal(&mut self, mean: f64, stddev: f64) -> f64 {
        assert!(stddev >= 0.0, "stddev must be nonnegative");
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + stddev * r * (std::f64::consts::TAU * u2).cos()
    }

    /// Tensor of independent normal draws; deterministic given the seed and
    /// the stream position.
    pub fn normal_tensor(&mut self, shape: &[usize], mean: f64, stddev: f64) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| self.normal(mean, stddev)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape/product consistent by construction")
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
