use serde::{Deserialize, Serialize};

use crate::error::{HmfgError, Result};
use crate::metric::grid::StateGrid;
use crate::scalar::Scalar;

/// Tolerance on the unit-mass invariant of a grid density.
pub const MASS_TOL: f64 = 1e-9;

/// Probability density sampled at the nodes of a [`StateGrid`].
///
/// Invariants: nonnegative values, trapezoidal integral equal to one
/// within [`MASS_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeasure<S> {
    grid: StateGrid<S>,
    density: Vec<S>,
}

impl<S: Scalar> GridMeasure<S> {
    pub fn new(grid: StateGrid<S>, density: Vec<S>) -> Result<Self> {
        if density.len() != grid.n_x {
            return Err(HmfgError::validation(format!(
                "density has {} values but grid has {} nodes",
                density.len(),
                grid.n_x
            )));
        }
        if let Some((i, &d)) = density
            .iter()
            .enumerate()
            .find(|(_, &d)| d < S::zero() || !d.is_finite())
        {
            return Err(HmfgError::validation(format!(
                "density value {d} at node {i} is negative or non-finite"
            )));
        }
        let mass = grid.trapz(&density);
        if (mass - S::one()).abs() > S::of(MASS_TOL) {
            return Err(HmfgError::validation(format!(
                "grid measure is unnormalized: trapezoidal mass {mass}"
            )));
        }
        Ok(GridMeasure { grid, density })
    }

    /// Normalize nonnegative node values into a probability density.
    pub fn from_unnormalized(grid: StateGrid<S>, mut density: Vec<S>) -> Result<Self> {
        for d in &mut density {
            if !d.is_finite() {
                return Err(HmfgError::validation("non-finite density value"));
            }
            if *d < S::zero() {
                *d = S::zero();
            }
        }
        let mass = grid.trapz(&density);
        if mass <= S::zero() {
            return Err(HmfgError::validation("cannot normalize zero-mass density"));
        }
        for d in &mut density {
            *d /= mass;
        }
        GridMeasure::new(grid, density)
    }

    /// Gaussian density `N(mean, std^2)` restricted to the grid and renormalized.
    pub fn gaussian(grid: StateGrid<S>, mean: S, std: S) -> Result<Self> {
        if std <= S::zero() {
            return Err(HmfgError::validation("gaussian std must be positive"));
        }
        let density: Vec<S> = grid
            .nodes()
            .map(|x| {
                let z = (x - mean) / std;
                (-z * z * S::of(0.5)).exp()
            })
            .collect();
        GridMeasure::from_unnormalized(grid, density)
    }

    pub fn grid(&self) -> &StateGrid<S> {
        &self.grid
    }

    pub fn density(&self) -> &[S] {
        &self.density
    }

    pub fn mean(&self) -> S {
        let vals: Vec<S> = self
            .grid
            .nodes()
            .zip(&self.density)
            .map(|(x, &d)| x * d)
            .collect();
        self.grid.trapz(&vals)
    }

    pub fn raw_moment(&self, order: u32) -> S {
        let vals: Vec<S> = self
            .grid
            .nodes()
            .zip(&self.density)
            .map(|(x, &d)| x.powi(order as i32) * d)
            .collect();
        self.grid.trapz(&vals)
    }

    pub fn variance(&self) -> S {
        let m = self.mean();
        self.raw_moment(2) - m * m
    }

    /// CDF values at grid nodes (trapezoidal cumulative), clamped into [0, 1]
    /// with the final node pinned to exactly 1.
    pub fn cdf_nodes(&self) -> Vec<S> {
        let half = S::of(0.5);
        let mut cdf = Vec::with_capacity(self.grid.n_x);
        let mut acc = S::zero();
        cdf.push(S::zero());
        for w in self.density.windows(2) {
            acc += (w[0] + w[1]) * half * self.grid.dx;
            cdf.push(acc.min(S::one()));
        }
        *cdf.last_mut().unwrap() = S::one();
        // enforce monotonicity against rounding
        for i in 1..cdf.len() {
            if cdf[i] < cdf[i - 1] {
                cdf[i] = cdf[i - 1];
            }
        }
        cdf
    }

    /// Inverse CDF by linear interpolation between nodes.
    pub fn quantile(&self, u: S) -> S {
        let cdf = self.cdf_nodes();
        let u = u.max(S::zero()).min(S::one());
        match cdf.iter().position(|&c| c >= u) {
            Some(0) | None => self.grid.x_min,
            Some(j) => {
                let (c0, c1) = (cdf[j - 1], cdf[j]);
                let (x0, x1) = (self.grid.node(j - 1), self.grid.node(j));
                if c1 > c0 {
                    x0 + (x1 - x0) * (u - c0) / (c1 - c0)
                } else {
                    x0
                }
            }
        }
    }
}

/// Weighted atomic measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure<S> {
    atoms: Vec<S>,
    weights: Vec<S>,
}

impl<S: Scalar> EmpiricalMeasure<S> {
    pub fn new(atoms: Vec<S>, weights: Vec<S>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(HmfgError::validation(format!(
                "empirical measure needs equal nonzero atom/weight counts, got {}/{}",
                atoms.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w < S::zero() || !w.is_finite()) {
            return Err(HmfgError::validation("negative or non-finite weight"));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(HmfgError::validation("non-finite atom location"));
        }
        let total: S = weights.iter().copied().sum();
        if (total - S::one()).abs() > S::of(1e-12) {
            return Err(HmfgError::validation(format!(
                "empirical measure is unnormalized: weight sum {total}"
            )));
        }
        Ok(EmpiricalMeasure { atoms, weights })
    }

    /// Uniform weights over the given sample points.
    pub fn from_samples(atoms: Vec<S>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(HmfgError::validation("empirical measure needs at least one atom"));
        }
        let n = atoms.len();
        let w = S::one() / S::from_usize(n).unwrap();
        let mut weights = vec![w; n];
        // make the weights sum to exactly one
        let sum: S = weights.iter().copied().sum();
        weights[n - 1] += S::one() - sum;
        EmpiricalMeasure::new(atoms, weights)
    }

    pub fn dirac(x: S) -> Self {
        EmpiricalMeasure { atoms: vec![x], weights: vec![S::one()] }
    }

    pub fn atoms(&self) -> &[S] {
        &self.atoms
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn mean(&self) -> S {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(&a, &w)| a * w)
            .sum()
    }

    pub fn raw_moment(&self, order: u32) -> S {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(&a, &w)| a.powi(order as i32) * w)
            .sum()
    }

    /// Atom/weight pairs sorted by location.
    pub fn sorted(&self) -> Vec<(S, S)> {
        let mut pairs: Vec<(S, S)> = self
            .atoms
            .iter()
            .copied()
            .zip(self.weights.iter().copied())
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pairs
    }

    /// Silverman bandwidth `0.9 min(std, iqr/1.34) n^{-1/5}`.
    pub fn silverman_bandwidth(&self) -> S {
        let n = self.atoms.len();
        let mean = self.mean();
        let var: S = self
            .atoms
            .iter()
            .zip(&self.weights)
            .map(|(&a, &w)| (a - mean) * (a - mean) * w)
            .sum();
        let std = var.max(S::zero()).sqrt();
        let sorted = self.sorted();
        let q = |u: S| -> S {
            let mut acc = S::zero();
            for &(x, w) in &sorted {
                acc += w;
                if acc >= u {
                    return x;
                }
            }
            sorted.last().unwrap().0
        };
        let iqr = q(S::of(0.75)) - q(S::of(0.25));
        let spread = if iqr > S::zero() { std.min(iqr / S::of(1.34)) } else { std };
        let spread = if spread > S::zero() { spread } else { S::of(1e-3) };
        S::of(0.9) * spread * S::from_usize(n).unwrap().powf(-S::of(0.2))
    }
}

/// A probability measure on the line in either representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Measure<S> {
    Grid(GridMeasure<S>),
    Empirical(EmpiricalMeasure<S>),
}

impl<S: Scalar> Measure<S> {
    pub fn mean(&self) -> S {
        match self {
            Measure::Grid(m) => m.mean(),
            Measure::Empirical(m) => m.mean(),
        }
    }

    pub fn raw_moment(&self, order: u32) -> S {
        match self {
            Measure::Grid(m) => m.raw_moment(order),
            Measure::Empirical(m) => m.raw_moment(order),
        }
    }

    pub fn as_grid(&self) -> Option<&GridMeasure<S>> {
        match self {
            Measure::Grid(m) => Some(m),
            Measure::Empirical(_) => None,
        }
    }

    /// Expectation of a pointwise function under the measure.
    pub fn expect(&self, f: impl Fn(S) -> S) -> S {
        match self {
            Measure::Grid(m) => {
                let vals: Vec<S> = m
                    .grid()
                    .nodes()
                    .zip(m.density())
                    .map(|(x, &d)| f(x) * d)
                    .collect();
                m.grid().trapz(&vals)
            }
            Measure::Empirical(m) => m
                .atoms()
                .iter()
                .zip(m.weights())
                .map(|(&a, &w)| f(a) * w)
                .sum(),
        }
    }
}

/// Gaussian-kernel density estimate of an empirical measure on a grid.
///
/// Atoms must lie within `[x_min - 3 bw, x_max + 3 bw]`; anything farther
/// out would silently lose mass, so it is an error.
pub fn empirical_to_grid<S: Scalar>(
    e: &EmpiricalMeasure<S>,
    grid: StateGrid<S>,
    bandwidth: S,
) -> Result<GridMeasure<S>> {
    if bandwidth <= S::zero() {
        return Err(HmfgError::validation("bandwidth must be positive"));
    }
    let three = S::of(3.0);
    let lo = grid.x_min - three * bandwidth;
    let hi = grid.x_max + three * bandwidth;
    let out: Vec<f64> = e
        .atoms()
        .iter()
        .filter(|&&a| a < lo || a > hi)
        .map(|a| a.to64())
        .collect();
    if !out.is_empty() {
        return Err(HmfgError::validation(format!(
            "atoms outside kernel range [{}, {}]: {:?}",
            lo.to64(),
            hi.to64(),
            &out[..out.len().min(8)]
        )));
    }
    let half = S::of(0.5);
    let density: Vec<S> = grid
        .nodes()
        .map(|x| {
            e.atoms()
                .iter()
                .zip(e.weights())
                .map(|(&a, &w)| {
                    let z = (x - a) / bandwidth;
                    w * (-z * z * half).exp()
                })
                .sum()
        })
        .collect();
    GridMeasure::from_unnormalized(grid, density)
}
