//! Matrix-free estimation and prediction for generalized mixed effects models
//! with high-dimensional crossed random effects.
//!
//! The crate is `no_std` with `alloc`. Everything here is pure computation:
//! sparse assembly of the normal matrix `M = Σ⁻¹ + ZᵀWZ`, preconditioned
//! conjugate gradients with Lanczos tridiagonal capture, stochastic Lanczos
//! quadrature for `log det M`, stochastic trace estimators with SSOR control
//! variates, Laplace mode finding, marginal likelihood optimization, and the
//! simulation-based predictive variance estimators. A dense Cholesky oracle
//! and a dense spectral analyzer are included for validation at desk scale.
//!
//! Enable the `parallel` feature (which implies `std`) to run independent
//! probe solves on the rayon thread pool.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod inference;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod oracle;
mod par;
pub mod precond;
pub mod predict;
pub mod probes;
pub mod krylov;
pub mod quadrature;
pub mod simulate;
pub mod sparse;
pub mod spectral;
pub mod tridiag;

pub use error::{Error, Result};

pub use inference::{evaluate_nll, Backend, Diagnostics, EvalConfig, Evaluator, ModeState, NllBundle};
pub use krylov::CgConfig;
pub use likelihood::{DerivStack, Family, Likelihood};
pub use model::{GroupedDesign, ModelParams};
pub use optim::{fit, std_errors, FitResult, OptimConfig, StopReason};
pub use precond::{PrecondKind, Preconditioner};
pub use predict::{predict, PredictConfig, PredictionSpec, PredictiveDist, VarianceMethod};
pub use simulate::{simulate_dataset, split, DesignKind, SimConfig, SimDataset};
pub use spectral::{preconditioned_spectrum, bound_report, SpectralReport, Verdict};
pub use sparse::{CsrMatrix, Incidence, NormalMatrix, NormalPattern, ReStructure};
