//! Doubly-penalized empirical likelihood (PEL2) for sparse estimation with
//! many estimating equations: penalties on both the parameters (sparsity)
//! and the Lagrange multipliers (moment selection), BIC-type tuning
//! selection, bias-corrected inference on the selected moments, and a
//! reproducible Monte Carlo harness.
//!
//! The numerical core is generic over the floating-point type through
//! [`scalar::Real`]; the aliases below fix `f64`, which is what the CLI and
//! the simulation lab use.

pub mod config;
pub mod elcore;
pub mod inference;
pub mod linalg;
pub mod models;
pub mod penalty;
pub mod scalar;
pub mod simlab;
pub mod tuning;

pub use elcore::Mode;
pub use penalty::PenaltyFamily;
pub use tuning::Criterion;

pub type Mat64 = linalg::Mat<f64>;
pub type PenaltySpec64 = penalty::PenaltySpec<f64>;
pub type Dataset64 = models::Dataset<f64>;
pub type EstimatingModel64 = models::EstimatingModel<f64>;
pub type ModelJet64 = models::ModelJet<f64>;
pub type PelConfig64 = elcore::PelConfig<f64>;
pub type SolverState64 = elcore::SolverState<f64>;
pub type FitResult64 = elcore::FitResult<f64>;
pub type TuningGrid64 = tuning::TuningGrid<f64>;
pub type TunedFit64 = tuning::TunedFit<f64>;
pub type InferenceResult64 = inference::InferenceResult<f64>;
pub type DgpSpec64 = simlab::DgpSpec<f64>;
pub type ExperimentSpec64 = simlab::ExperimentSpec<f64>;
