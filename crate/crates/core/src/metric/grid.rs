use serde::{Deserialize, Serialize};

use crate::error::{HmfgError, Result};
use crate::scalar::Scalar;

/// Uniform 1-D state grid on `[x_min, x_max]` with `n_x` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateGrid<S> {
    pub x_min: S,
    pub x_max: S,
    pub n_x: usize,
    pub dx: S,
}

impl<S: Scalar> StateGrid<S> {
    pub fn new(x_min: S, x_max: S, n_x: usize) -> Result<Self> {
        if !(x_min < x_max) {
            return Err(HmfgError::validation(format!(
                "state grid requires x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if n_x < 3 {
            return Err(HmfgError::validation(format!(
                "state grid requires n_x >= 3, got {n_x}"
            )));
        }
        let dx = (x_max - x_min) / S::from_usize(n_x - 1).unwrap();
        Ok(StateGrid { x_min, x_max, n_x, dx })
    }

    pub fn node(&self, i: usize) -> S {
        self.x_min + self.dx * S::from_usize(i).unwrap()
    }

    pub fn nodes(&self) -> impl Iterator<Item = S> + '_ {
        (0..self.n_x).map(move |i| self.node(i))
    }

    /// Trapezoidal quadrature of node values.
    pub fn trapz(&self, values: &[S]) -> S {
        debug_assert_eq!(values.len(), self.n_x);
        let half = S::of(0.5);
        let mut acc = S::zero();
        for w in values.windows(2) {
            acc += (w[0] + w[1]) * half;
        }
        acc * self.dx
    }

    /// Grids are "the same" if their defining fields match to rounding.
    pub fn matches(&self, other: &Self) -> bool {
        let eps = S::of(1e-12) * (S::one() + self.x_max.abs() + self.x_min.abs());
        self.n_x == other.n_x
            && (self.x_min - other.x_min).abs() <= eps
            && (self.x_max - other.x_max).abs() <= eps
    }
}

/// Uniform time grid on `[t0, t1]` with `n_t` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<S> {
    pub t0: S,
    pub t1: S,
    pub n_t: usize,
    pub dt: S,
}

impl<S: Scalar> TimeGrid<S> {
    pub fn new(t0: S, t1: S, n_t: usize) -> Result<Self> {
        if !(t0 < t1) {
            return Err(HmfgError::validation(format!(
                "time grid requires t0 < t1, got [{t0}, {t1}]"
            )));
        }
        if n_t < 2 {
            return Err(HmfgError::validation(format!(
                "time grid requires n_t >= 2, got {n_t}"
            )));
        }
        let dt = (t1 - t0) / S::from_usize(n_t - 1).unwrap();
        Ok(TimeGrid { t0, t1, n_t, dt })
    }

    pub fn node(&self, i: usize) -> S {
        self.t0 + self.dt * S::from_usize(i).unwrap()
    }

    pub fn nodes(&self) -> Vec<S> {
        (0..self.n_t).map(|i| self.node(i)).collect()
    }

    /// Diffusive CFL-style diagnostic `dt <= dx^2 * L^2`. Informational only;
    /// the diffusion step is implicit.
    pub fn cfl_ok(&self, dx: S, lipschitz: S) -> bool {
        self.dt <= dx * dx * lipschitz * lipschitz
    }
}
