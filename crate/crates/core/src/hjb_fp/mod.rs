//! Per-type backward HJB and forward Fokker-Planck solvers, and the
//! best-response map that combines them across the type ensemble.
//!
//! Space is a uniform grid approximating the whole-line problem: the HJB
//! boundary rows use linear-extrapolation ghosts (zero second difference),
//! the FP boundaries are zero-flux. Time stepping is semi-implicit:
//! diffusion is implicit
//! (tridiagonal, solved by the Thomas algorithm), the Hamiltonian and the
//! advective flux are taken explicitly / upwinded. The FP step is written
//! in conservative flux form, so the plain node sum of the density is
//! preserved exactly; the small trapezoidal-mass drift that remains is
//! renormalized away each step and reported.

mod solver;
mod value;

pub use solver::{best_response_flow, solve_fp, solve_hjb, BestResponse, FpRun};
pub use value::{value_to_csv, SolveGrids, ValueField};
