//! Density estimation for large swarms of stochastic agents.
//!
//! Agents follow a known SDE, so their density obeys a known Fokker-Planck
//! equation. A kernel density estimate of the observed positions acts as a
//! noisy measurement of that density, with noise covariance approximately
//! `k̄·diag(p)`. A Kalman filter on the grid-discretized Fokker-Planck
//! equation fuses the two, which makes the estimate far less sensitive to
//! the KDE bandwidth than the raw KDE.
//!
//! Modules, bottom up:
//!
//! * [`grid`]: the uniform grid, flattening convention and quadrature.
//! * [`dynamics`]: drift/diffusion fields, the spinning-mixture scenario and
//!   the agent simulator.
//! * [`kde`]: Gaussian KDE on the grid and the noise scale `k̄`.
//! * [`fpops`]: the sparse finite-volume generator with zero-flux walls.
//! * [`filter`]: the density filter and its Riccati equation.
//! * [`harness`]: scenario configuration, ground truth, experiment runs and
//!   output files.

pub mod dense;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod filter;
pub mod fpops;
pub mod grid;
pub mod harness;
pub mod kde;

pub use dense::DenseMatrix;
pub use dynamics::{AgentEnsemble, ConstantVelocity, DiffusionField, DiffusionModel, MixtureScenario, VelocityField};
pub use error::{Error, Result};
pub use exec::Exec;
pub use filter::{filter_step, kalman_gain, noise_covariance, oracle_filter_step, riccati_step, CovarianceOperator, FilterConfig, FilterState, NoiseCovariance, RiccatiScheme};
pub use fpops::{assemble_operator, FpOperator, SparseMatrix};
pub use grid::{DensityField, Grid};
pub use harness::{ground_truth_solve, l2_error, run_experiment, simulate, Mode, RunRecord, ScenarioConfig};
pub use kde::{compute_kbar, kde_on_grid, KdeConfig, NoiseScale};
