//! Problem definition: coefficient closures, standing-assumption audit,
//! and the linear-quadratic benchmark with its semi-analytic reference.

pub mod lq;
pub mod problem;
pub mod riccati;
pub mod validate;

pub use lq::LqBenchmark;
pub use problem::{hamiltonian_from_sup, HmfgProblem, TruncationGuard};
pub use riccati::{
    mean_sensitivities, riccati_a, riccati_from, riccati_oracle, MeanSensitivities,
    RiccatiSolution,
};
pub use validate::{validate_problem, ValidationReport};
