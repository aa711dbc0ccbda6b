//! Seeded random source.
//!
//! Draws come from ChaCha8 (`rand_chacha`), whose output stream is fixed for
//! a given seed on every platform. Uniforms use the top 53 bits of a `u64`;
//! Gaussians use the Box–Muller transform, consuming two uniforms per pair of
//! normals.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// SplitMix64 finaliser; mixes a seed with a stream label.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `seed` and a textual label.
pub fn child_seed(seed: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(mix(seed), |acc, b| mix(acc ^ u64::from(b)))
}

#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh source on a stream derived from this source's seed and `label`.
    /// Does not consume draws from `self`.
    pub fn child(&self, label: &str) -> Self {
        Self::new(child_seed(self.seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // rejection sampling keeps the draw unbiased
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_vec(&mut self, n: usize, mean: f64, stddev: f64) -> Vec<f64> {
        (0..n).map(|_| mean + stddev * self.standard_normal()).collect()
    }
}

/// I.i.d. Gaussian tensor.
pub fn gaussian_sample(rng: &mut RandomSource, shape: &[usize], mean: f64, stddev: f64) -> Result<Tensor> {
    if stddev < 0.0 || stddev.is_nan() {
        return Err(Error::NegativeStddev(stddev));
    }
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, mean, stddev))
}
