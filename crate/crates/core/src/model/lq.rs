use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{HmfgError, Result};
use crate::metric::{GridMeasure, Measure, MeasureEnsemble, StateGrid};
use crate::model::problem::HmfgProblem;
use crate::scalar::Scalar;

/// Heterogeneous linear-quadratic benchmark.
///
/// Per type: `b = a`, `sigma = s(theta)`,
/// `F = -a^2/2 - (c(theta)/2)(x - w(theta) mbar)^2`, `G = 0`,
/// where `mbar(mu)` is the uniform average of the per-type means. Hence
/// `H = psi(p) p - psi(p)^2/2 - (c/2)(x - w mbar)^2` with the feedback
/// `a* = psi(p)` clamping `p` into the action interval, and `dH/dp = a*`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LqBenchmark<S> {
    pub cost_weight: Vec<S>,
    pub coupling: Vec<S>,
    pub vol: Vec<S>,
    pub initial_mean: Vec<S>,
    pub initial_std: Vec<S>,
    pub horizon: S,
    pub action_bound: S,
}

impl<S: Scalar> LqBenchmark<S> {
    pub fn new(
        cost_weight: Vec<S>,
        coupling: Vec<S>,
        vol: Vec<S>,
        initial_mean: Vec<S>,
        initial_std: Vec<S>,
        horizon: S,
        action_bound: S,
    ) -> Result<Self> {
        let k = cost_weight.len();
        if k == 0 {
            return Err(HmfgError::config("benchmark needs at least one type"));
        }
        for (name, v) in [
            ("coupling", &coupling),
            ("vol", &vol),
            ("initial_mean", &initial_mean),
            ("initial_std", &initial_std),
        ] {
            if v.len() != k {
                return Err(HmfgError::config(format!(
                    "benchmark field {name} has length {} but K = {k}",
                    v.len()
                )));
            }
        }
        if cost_weight.iter().any(|&c| c < S::zero()) {
            return Err(HmfgError::config("cost weights must be nonnegative"));
        }
        if vol.iter().any(|&s| s <= S::zero()) {
            return Err(HmfgError::config("volatilities must be positive"));
        }
        if initial_std.iter().any(|&v| v <= S::zero()) {
            return Err(HmfgError::config("initial stds must be positive"));
        }
        if horizon <= S::zero() || action_bound <= S::zero() {
            return Err(HmfgError::config("horizon and action bound must be positive"));
        }
        Ok(LqBenchmark {
            cost_weight,
            coupling,
            vol,
            initial_mean,
            initial_std,
            horizon,
            action_bound,
        })
    }

    /// K-type instance with smoothly type-dependent parameters.
    pub fn standard(k: usize, horizon: S) -> Result<Self> {
        let kk = S::from_usize(k).unwrap();
        let theta = |l: usize| S::from_usize(l + 1).unwrap() / kk;
        LqBenchmark::new(
            (0..k).map(|l| S::of(1.0) + S::of(0.5) * theta(l)).collect(),
            (0..k).map(|l| S::of(0.4) + S::of(0.2) * theta(l)).collect(),
            (0..k).map(|l| S::of(0.5) + S::of(0.2) * theta(l)).collect(),
            (0..k).map(|l| S::of(-0.5) + theta(l)).collect(),
            vec![S::of(0.35); k],
            horizon,
            S::of(6.0),
        )
    }

    /// Same as [`standard`](Self::standard) but with zero coupling weight:
    /// every type solves an independent control problem.
    pub fn decoupled(k: usize, horizon: S) -> Result<Self> {
        let mut b = LqBenchmark::standard(k, horizon)?;
        b.coupling = vec![S::zero(); k];
        Ok(b)
    }

    pub fn n_types(&self) -> usize {
        self.cost_weight.len()
    }

    /// Type index for `theta` in (0, 1]: `ceil(theta K) - 1`, clamped.
    pub fn type_index(&self, theta: S) -> usize {
        let k = self.n_types();
        let idx = (theta * S::from_usize(k).unwrap()).ceil().to64() as isize - 1;
        idx.clamp(0, k as isize - 1) as usize
    }

    fn clamp_action(&self, p: S) -> S {
        p.max(-self.action_bound).min(self.action_bound)
    }

    /// State deviation target `w(theta) mbar(mu)`.
    pub fn target<'a>(&self, l: usize, mu: &MeasureEnsemble<S>) -> S
    where
        S: 'a,
    {
        self.coupling[l] * mu.mean_functional()
    }

    /// Declared Lipschitz constant on the box `|x| <= x_bound`.
    pub fn declared_lipschitz(&self, x_bound: S) -> S {
        let mut worst = S::one();
        for l in 0..self.n_types() {
            let c = self.cost_weight[l];
            let w = self.coupling[l].abs();
            // |dF/dx| <= c (x_bound + w x_bound); |dF/dmu| <= c w (..);
            // |dF/da| <= action_bound; sigma floor 1/L.
            let fx = c * (x_bound + w * x_bound) * (S::one() + w);
            worst = worst
                .max(fx)
                .max(self.action_bound)
                .max(S::one() / self.vol[l])
                .max(self.vol[l]);
        }
        worst * S::of(1.05)
    }

    /// Instantiate the generic problem interface on the box `|x| <= x_bound`.
    pub fn problem(&self, x_bound: S) -> Result<HmfgProblem<S>> {
        let bench = Arc::new(self.clone());
        let b1 = bench.clone();
        let b2 = bench.clone();
        let b3 = bench.clone();
        let b4 = bench.clone();
        let b5 = bench.clone();
        Ok(HmfgProblem {
            drift: Arc::new(move |_theta, _t, _x, _mu, a| a),
            vol: {
                let b = bench.clone();
                Arc::new(move |theta, _t, _x, _mu| b.vol[b.type_index(theta)])
            },
            running_cost: Arc::new(move |theta, _t, x, mu, a| {
                let l = b1.type_index(theta);
                let dev = x - b1.target(l, mu);
                let half = S::of(0.5);
                -a * a * half - b1.cost_weight[l] * half * dev * dev
            }),
            terminal_cost: Arc::new(move |_theta, _x, _mu| S::zero()),
            hamiltonian: Arc::new(move |theta, _t, x, p, mu| {
                let l = b2.type_index(theta);
                let a = b2.clamp_action(p);
                let dev = x - b2.target(l, mu);
                let half = S::of(0.5);
                a * p - a * a * half - b2.cost_weight[l] * half * dev * dev
            }),
            hamiltonian_grad: Arc::new(move |_theta, _t, _x, p, _mu| b3.clamp_action(p)),
            feedback: Arc::new(move |_theta, _t, _x, p, _mu| b4.clamp_action(p)),
            action_bounds: (-self.action_bound, self.action_bound),
            lipschitz: b5.declared_lipschitz(x_bound),
            horizon: self.horizon,
        })
    }

    /// Initial ensemble: per-type Gaussians on the given grid.
    pub fn initial_ensemble(&self, grid: StateGrid<S>) -> Result<MeasureEnsemble<S>> {
        let measures = (0..self.n_types())
            .map(|l| {
                GridMeasure::gaussian(grid, self.initial_mean[l], self.initial_std[l])
                    .map(Measure::Grid)
            })
            .collect::<Result<Vec<_>>>()?;
        MeasureEnsemble::new(measures)
    }

    /// State grid sized so the equilibrium keeps essentially all mass inside:
    /// initial support +/- 6 std plus the drift excursion bound `L T`.
    pub fn default_grid(&self, n_x: usize) -> Result<StateGrid<S>> {
        let six = S::of(6.0);
        let mut lo = S::infinity();
        let mut hi = S::neg_infinity();
        for l in 0..self.n_types() {
            lo = lo.min(self.initial_mean[l] - six * self.initial_std[l]);
            hi = hi.max(self.initial_mean[l] + six * self.initial_std[l]);
            let diff = six * self.vol[l] * self.horizon.sqrt();
            lo = lo.min(self.initial_mean[l] - diff);
            hi = hi.max(self.initial_mean[l] + diff);
        }
        let excursion = self.action_bound.min(S::of(2.0)) * self.horizon;
        StateGrid::new(lo - excursion, hi + excursion, n_x)
    }
}
