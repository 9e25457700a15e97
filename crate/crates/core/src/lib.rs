//! Wasserstein distributionally robust linear learners with a learnable,
//! per-covariate transport cost, plus the reference baselines, synthetic
//! data generators, an exact discrete optimal-transport solver and an
//! evaluation harness.

pub mod adversary;
pub mod baselines;
pub mod cost;
pub mod datagen;
pub mod error;
pub mod cli;
pub mod eval;
pub mod model;
pub mod ot;
pub mod rng;
pub mod sal;

pub use cost::CovariateWeights;
pub use error::{Result, SalError};
pub use model::{EnvDataset, LossKind, ModelParams};
pub use sal::{SalConfig, TrainedModel};
