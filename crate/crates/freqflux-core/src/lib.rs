//! Simulation and analysis of how active/reactive power injections at
//! network buses propagate into bus frequencies and the center-of-inertia
//! (CoI) frequency, deterministically and under stochastic injection noise,
//! with diagnostics for when Gaussian (CLT-based) assumptions hold.
//!
//! Module map:
//! - [`netmodel`]: static network data, admittance assembly, short-circuit levels
//! - [`powerflow`]: Newton-Raphson operating point
//! - [`sensitivity`]: complex-frequency sensitivity matrices (full and simplified)
//! - [`coi`]: frequency divider, CoI weights and estimates
//! - [`estimator`]: runtime-selectable CoI estimator strategies
//! - [`dynsim`]: swing-equation ground-truth simulator and estimator comparison
//! - [`stochastic`]: OU / skewed injection noise, increment propagation, Monte Carlo
//! - [`diagnostics`]: Lindeberg ratio, normality reports, dominance and
//!   subnetwork aggregation experiments

pub mod coi;
pub mod diagnostics;
pub mod dynsim;
pub mod error;
pub mod estimator;
pub mod io;
pub mod linalg;
pub mod netmodel;
pub mod powerflow;
pub mod sensitivity;
pub mod stats;
pub mod stochastic;

pub use error::{Error, Result};
