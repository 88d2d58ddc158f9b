//! Seeded randomness with a fixed, documented algorithm.
//!
//! The generator is xoshiro256** with its 256-bit state filled from the seed by
//! four successive SplitMix64 outputs. Uniform doubles take the top 53 bits of a
//! draw (`(x >> 11) * 2^-53`, range `[0, 1)`). Gaussian draws use Box-Muller and
//! consume two uniforms per sample, keeping only the cosine branch, so the
//! stream position after `k` normals is always `2k` draws.
//!
//! Child seeds for modules and adaptation sites come from [`derive_seed`]:
//! FNV-1a 64 over `root.to_le_bytes() ‖ module ‖ 0x00 ‖ site`, then passed
//! through the SplitMix64 finalizer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    mix64(*state)
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable child seed for `(root, module, site)`.
pub fn derive_seed(root: u64, module: &str, site: &str) -> u64 {
    let mut h = FNV_OFFSET;
    let bytes = root
        .to_le_bytes()
        .into_iter()
        .chain(module.bytes())
        .chain(std::iter::once(0u8))
        .chain(site.bytes());
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix64(h)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { seed, state }
    }

    /// Generator seeded with `derive_seed(root, module, site)`.
    pub fn derived(root: u64, module: &str, site: &str) -> Self {
        Rng::new(derive_seed(root, module, site))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Independent stream seeded from the next draw of this one.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n`, `n >= 1`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; the bias is below 2^-64 * n.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Binary keep-mask produced by dropout and Bernoulli sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn all_kept(&self) -> bool {
        self.keep.iter().all(|k| *k)
    }
}

pub fn sample_uniform<T: Scalar>(rng: &mut Rng, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor<T>> {
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::InvalidParameter(format!(
            "uniform bounds need lo < hi, got [{lo}, {hi})"
        )));
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(lo + (hi - lo) * rng.uniform())).collect();
    Tensor::new(shape, data)
}

pub fn sample_gaussian<T: Scalar>(rng: &mut Rng, mean: f64, std: f64, shape: &[usize]) -> Result<Tensor<T>> {
    if !std.is_finite() || !mean.is_finite() || std <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gaussian needs finite mean and std > 0, got mean={mean} std={std}"
        )));
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(mean + std * rng.gaussian())).collect();
    Tensor::new(shape, data)
}

pub fn sample_bernoulli(rng: &mut Rng, keep_prob: f64, shape: &[usize]) -> Result<Mask> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "keep probability must lie in (0, 1], got {keep_prob}"
        )));
    }
    let n: usize = shape.iter().product();
    let keep = if keep_prob == 1.0 {
        vec![true; n]
    } else {
        (0..n).map(|_| rng.uniform() < keep_prob).collect()
    };
    Ok(Mask {
        shape: shape.to_vec(),
        keep,
    })
}
