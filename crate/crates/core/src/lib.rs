//! Finite-population delta method.
//!
//! Design-based inference for smooth functions of sample and treatment-arm
//! means: exact finite-population variances, the delta-method quadratic form
//! with its expanded and transformed-outcome representations, the conservative
//! Neyman plug-in estimator, and exact / Monte Carlo checks of the resulting
//! normal approximations.
//!
//! Randomness comes only from the sampling or assignment vector; outcomes are
//! fixed constants held by a [`PotentialPopulation`].

pub mod asymptotics;
pub mod cli;
pub mod design;
mod error;
pub mod functionals;
pub mod normal;
pub mod population;
pub mod simulate;
pub mod variance;

pub use design::Assignment;
pub use error::{Error, Result};
pub use functionals::SmoothFunctional;
pub use population::{Moments, PopulationKind, PotentialPopulation};
pub use variance::DeltaVarianceReport;

/// Version string embedded in every JSON report.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
