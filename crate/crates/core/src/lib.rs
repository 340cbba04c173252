//! Portfolio research toolkit built around causal driver identification,
//! nonlinear filtering of latent drivers, forward/backward PDE control and
//! manifold-constrained allocation.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`data`] — price/return panels and robust in-window moments
//!    (winsorization, EWMA means, Ledoit-Wolf shrinkage).
//! 2. [`synth`] — synthetic markets with known ground truth (multi-driver
//!    OU market, linear-Gaussian star-DAG) used as oracles in tests.
//! 3. [`select`] — common-driver screens: residual-commonality greedy
//!    search, correlation breadth/redundancy ranking, per-asset BIC scores,
//!    the coverage/overlap surrogate and a condition-number guard.
//! 4. [`filter`] — EKF and particle filtering of the latent driver state.
//! 5. [`drivermap`] — driver-to-return maps (ridge OLS, tanh MLP with
//!    Huber loss and optional Jacobian-smoothness penalty) and their mean
//!    Jacobians.
//! 6. [`pde`] — one-dimensional Fokker-Planck and HJB finite-difference
//!    solvers plus the amplitude layer.
//! 7. [`alloc`] — basis transport, manifold KKT allocation, driver-space
//!    tilts, mirror steps on the simplex, classical baselines.
//! 8. [`diag`] — performance metrics and structural diagnostics
//!    (martingale defect, Novikov checks, span fidelity, principal angles,
//!    conformality, completeness/hedging, counterfactual mixtures).
//! 9. [`backtest`] — rolling-window orchestration of the full pipeline.

pub mod alloc;
pub mod backtest;
pub mod data;
pub mod diag;
pub mod drivermap;
pub mod filter;
pub(crate) mod linalg;
pub mod pde;
pub(crate) mod rng;
pub mod select;
pub mod synth;

pub use linalg::simplex_projection;
