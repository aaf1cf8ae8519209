//! Covariate balancing weights from a confounder-adaptive random-forest
//! kernel.
//!
//! A forest grown on the jointly standardized `(outcome, treatment)` response
//! defines a co-leaf similarity between covariate vectors. Weights for each
//! treatment arm minimize the squared kernel MMD between the weighted arm and
//! the full sample, plus a ridge penalty, and feed a Hájek-form estimate of
//! the average treatment effect.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the common double-precision case.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod forest;
pub mod kernel;
mod linalg;
pub mod rng;
pub mod scalar;
pub mod simulation;
pub mod weights;

pub use data::{load_csv, read_csv, split_sample, standardize, CsvSchema, Dataset, SampleSplit};
pub use error::{Error, Result};
pub use estimators::{estimate_ate, AteEstimate, EstimateConfig, LambdaRule, LeafSize, Method};
pub use forest::{grow_forest, Forest, ForestMode, ForestParams, Tree};
pub use kernel::{gaussian_gram, median_heuristic, psd_check, rf_gram, rf_kernel, GramMatrix};
pub use scalar::Scalar;
pub use weights::{solve_weights, BalancingProblem, SolverOptions, WeightSolution};

pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Forest64 = forest::Forest<f64>;
pub type Forest32 = forest::Forest<f32>;
pub type Tree64 = forest::Tree<f64>;
pub type GramMatrix64 = kernel::GramMatrix<f64>;
pub type GramMatrix32 = kernel::GramMatrix<f32>;
pub type BalancingProblem64 = weights::BalancingProblem<f64>;
pub type WeightSolution64 = weights::WeightSolution<f64>;
pub type AteEstimate64 = estimators::AteEstimate<f64>;
