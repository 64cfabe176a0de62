//! Discrete probability measures on the line, measure ensembles over the
//! type space, and the Wasserstein / ensemble metrics on them.

pub mod ensemble;
pub mod grid;
pub mod measure;
pub mod wasserstein;

pub use ensemble::{
    ensemble_distance, ensemble_to_csv, flow_distance, flow_to_csv, EnsembleFlow, MeasureEnsemble,
};
pub use grid::{StateGrid, TimeGrid};
pub use measure::{empirical_to_grid, EmpiricalMeasure, GridMeasure, Measure, MASS_TOL};
pub use wasserstein::{wasserstein1, wasserstein2, wasserstein_p};
