//! Numerical solver for heterogeneous mean field games.
//!
//! The population is a K-type ensemble of probability measures on a 1-D
//! state grid. An equilibrium is a fixed point of the best-response map
//! that, for a frozen ensemble flow, solves a backward HJB equation per
//! type and pushes the initial densities forward through the resulting
//! optimal feedback (Fokker-Planck). The crate also ships Monte-Carlo
//! diagnostics: finite N-player simulation with propagation-of-chaos and
//! exploitability statistics, an Itô formula check for functionals of
//! measure ensembles, and master-equation / decoupling-field residuals on
//! the built-in linear-quadratic benchmark.
//!
//! All numerics are generic over the [`scalar::Scalar`] float type;
//! `f64` aliases are exported at the crate root.

pub mod equilibrium;
pub mod error;
pub mod hjb_fp;
pub mod metric;
pub mod mfcalculus;
pub mod model;
pub mod nplayer;
pub mod rng;
pub mod scalar;

pub use error::{HmfgError, Result};
pub use scalar::Scalar;

/// Default concrete scalar.
pub type Real = f64;

pub type StateGrid = metric::StateGrid<Real>;
pub type TimeGrid = metric::TimeGrid<Real>;
pub type GridMeasure = metric::GridMeasure<Real>;
pub type EmpiricalMeasure = metric::EmpiricalMeasure<Real>;
pub type Measure = metric::Measure<Real>;
pub type MeasureEnsemble = metric::MeasureEnsemble<Real>;
pub type EnsembleFlow = metric::EnsembleFlow<Real>;
pub type HmfgProblem = model::HmfgProblem<Real>;
pub type LqBenchmark = model::LqBenchmark<Real>;
pub type ValueField = hjb_fp::ValueField<Real>;
pub type SolveGrids = hjb_fp::SolveGrids<Real>;
pub type FixedPointConfig = equilibrium::FixedPointConfig<Real>;
pub type EquilibriumSolution = equilibrium::EquilibriumSolution<Real>;
pub type NPlayerConfig = nplayer::NPlayerConfig<Real>;
