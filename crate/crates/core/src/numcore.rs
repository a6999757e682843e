//! Deterministic vector arithmetic, population moments and seeded randomness.
//!
//! Every reduction here sums strictly left to right so results are
//! bit-reproducible across runs.

use std::ops::Deref;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed-length vector of finite 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVector(Vec<f64>);

impl RealVector {
    /// Wraps `values`, rejecting empty input and NaN/Inf entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::TooShort { min: 1, got: 0 });
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("vector construction"));
        }
        Ok(Self(values))
    }

    /// Caller guarantees the values are finite and non-empty.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn filled(len: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.0)
    }
}

impl Deref for RealVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for RealVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for RealVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Self {
        v.0
    }
}

/// Population mean and standard deviation (divisor `H`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub var: f64,
}

impl Moments {
    pub fn of(v: &[f64]) -> Self {
        let mean = mean(v);
        let var = variance_about(v, mean);
        Moments { mean, std: var.sqrt(), var }
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Arithmetic mean, summed left to right.
pub fn mean(v: &[f64]) -> f64 {
    debug_assert!(!v.is_empty());
    v.iter().fold(0.0, |acc, &x| acc + x) / v.len() as f64
}

/// Population variance (divisor `H`), two-pass.
pub fn var_pop(v: &[f64]) -> f64 {
    variance_about(v, mean(v))
}

/// Population standard deviation (divisor `H`, never `H - 1`).
pub fn std_pop(v: &[f64]) -> f64 {
    var_pop(v).sqrt()
}

fn variance_about(v: &[f64], mu: f64) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc + (x - mu) * (x - mu)) / v.len() as f64
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch { expected: u.len(), got: v.len() });
    }
    Ok(dot_unchecked(u, v))
}

pub(crate) fn dot_unchecked(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).fold(0.0, |acc, (&a, &b)| acc + a * b)
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch { expected, got });
    }
    Ok(())
}

/// Seeded random stream. The algorithm is fixed per build and reported by
/// [`Rng::ALGORITHM`] so experiment outputs can record it.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8 (rand_chacha 0.9, seed_from_u64)";

    pub fn seeded(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// An independent stream for the same seed, e.g. one per trial or job.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// `n` standard-normal variates.
pub fn rand_gaussian(rng: &mut Rng, n: usize) -> RealVector {
    assert!(n >= 1, "rand_gaussian needs n >= 1");
    RealVector::from_raw((0..n).map(|_| rng.gaussian()).collect())
}
