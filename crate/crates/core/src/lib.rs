//! Layer normalization variants with exact analytic backward passes.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`] – vectors, population moments, deterministic RNG.
//! * [`normlayers`] – forward/backward for LayerNorm, LayerNorm-simple,
//!   DetachNorm, Detach-Mean, Detach-Variance, AdaNorm and the identity.
//! * [`gradcheck`] – finite-difference and brute-force Jacobian oracles plus
//!   the gradient re-centering / re-scaling reports.
//! * [`nets`] – a small MLP with pre-activation normalization, Adam and SGD.
//! * [`harness`] – datasets, experiment configs, training runs and tables.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nets;
pub mod normlayers;
pub mod numcore;

pub use error::{Error, Result};
pub use gradcheck::{GradReport, JacobianPair, Matrix, Theorem2Report};
pub use harness::{Dataset, ExperimentConfig, RunRecord, RunStatus};
pub use nets::{AdamState, LinearLayer, MlpModel};
pub use normlayers::{AdaNormConfig, AffineParams, BackwardResult, ForwardCache, NormLayer, NormVariant};
pub use numcore::{Moments, RealVector, Rng};
