//! Shared fixtures for the criterion benchmarks.

use normgrad::numcore::{rand_gaussian, RealVector, Rng};
use normgrad::{MlpModel, NormVariant};

/// A random input and upstream gradient of length `h`.
pub fn vector_pair(h: usize, seed: u64) -> (RealVector, RealVector) {
    let mut rng = Rng::seeded(seed);
    (rand_gaussian(&mut rng, h), rand_gaussian(&mut rng, h))
}

/// The 784-256-128-10 MLP used for the MNIST runs.
pub fn mnist_mlp(variant: NormVariant) -> MlpModel {
    MlpModel::new(&mut Rng::seeded(0), 784, &[256, 128], 10, variant, 1e-5, None)
}
