//! Semi-analytic reference solution for the linear-quadratic benchmark.
//!
//! With `H = psi(p) p - psi(p)^2/2 - (c/2)(x - w mbar)^2` and unclamped
//! feedback `a* = p`, the value function is quadratic per type,
//! `u_l(t, x) = A_l(t) x^2 / 2 + B_l(t) x + C_l(t)`, where
//!
//! ```text
//! A' = c - A^2                    A(T) = 0
//! B' = -A B - c w mbar(t)         B(T) = 0
//! C' = -s^2 A / 2 - B^2/2 + (c/2)(w mbar)^2,   C(T) = 0
//! ```
//!
//! `A` has the closed form `-sqrt(c) tanh(sqrt(c)(T - t))`. The per-type
//! mean follows `m' = A m + B` and the variance `v' = 2 A v + s^2`, so the
//! equilibrium flow stays Gaussian. The coupling runs only through the
//! average mean `mbar = (1/K) sum_l m_l`, which is resolved by a damped
//! Picard iteration over (B, m); each sweep integrates the linear ODEs
//! with RK4 on a uniform grid, interpolating forcings at half-steps.

use serde::{Deserialize, Serialize};

use crate::error::{HmfgError, Result};
use crate::metric::{EnsembleFlow, GridMeasure, Measure, MeasureEnsemble, StateGrid};
use crate::model::lq::LqBenchmark;
use crate::scalar::Scalar;

/// Picard convergence tolerance on the sup-norm of the mean paths.
const PICARD_TOL: f64 = 1e-13;
const PICARD_MAX_ITERS: usize = 500;

/// Quadratic value coefficients and Gaussian flow moments per type, on a
/// uniform time grid over `[0, T]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiccatiSolution<S> {
    pub bench: LqBenchmark<S>,
    pub times: Vec<S>,
    /// `a[l][i]` = quadratic coefficient of type `l` at time node `i`.
    pub a: Vec<Vec<S>>,
    pub b: Vec<Vec<S>>,
    pub c0: Vec<Vec<S>>,
    pub means: Vec<Vec<S>>,
    pub variances: Vec<Vec<S>>,
    /// Picard sweeps used to resolve the mean coupling.
    pub iterations: usize,
}

/// Closed-form Riccati coefficient `A(t) = -sqrt(c) tanh(sqrt(c)(T - t))`.
pub fn riccati_a<S: Scalar>(cost_weight: S, horizon: S, t: S) -> S {
    if cost_weight == S::zero() {
        return S::zero();
    }
    let r = cost_weight.sqrt();
    -r * (r * (horizon - t)).tanh()
}

/// Solve the coupled Riccati / moment system on `n_t` uniform time steps
/// over the full horizon, from the benchmark's own initial data.
pub fn riccati_oracle<S: Scalar>(bench: &LqBenchmark<S>, n_t: usize) -> Result<RiccatiSolution<S>> {
    let variances0: Vec<S> = bench.initial_std.iter().map(|&s| s * s).collect();
    riccati_from(bench, S::zero(), &bench.initial_mean.clone(), &variances0, n_t)
}

/// Solve the coupled Riccati / moment system on `[t_start, T]` from the
/// given per-type means and variances at `t_start`. This defines the
/// quadratic value coefficients as functions of an arbitrary ensemble
/// state `(t_start, means0)`, not just of the equilibrium path.
pub fn riccati_from<S: Scalar>(
    bench: &LqBenchmark<S>,
    t_start: S,
    means0: &[S],
    variances0: &[S],
    n_t: usize,
) -> Result<RiccatiSolution<S>> {
    if n_t < 2 {
        return Err(HmfgError::config("riccati oracle needs at least 2 time steps"));
    }
    let k = bench.n_types();
    if means0.len() != k || variances0.len() != k {
        return Err(HmfgError::config(format!(
            "need {k} initial means and variances, got {} / {}",
            means0.len(),
            variances0.len()
        )));
    }
    if !(t_start >= S::zero() && t_start < bench.horizon) {
        return Err(HmfgError::config("t_start must lie in [0, horizon)"));
    }
    let t1 = bench.horizon;
    let n = n_t;
    let dt = (t1 - t_start) / S::from_usize(n).unwrap();
    let times: Vec<S> = (0..=n)
        .map(|i| t_start + dt * S::from_usize(i).unwrap())
        .collect();

    // A in closed form at every node, per type.
    let a: Vec<Vec<S>> = (0..k)
        .map(|l| times.iter().map(|&t| riccati_a(bench.cost_weight[l], t1, t)).collect())
        .collect();

    // Picard over the average-mean path.
    let mut means: Vec<Vec<S>> = (0..k).map(|l| vec![means0[l]; n + 1]).collect();
    let mut b: Vec<Vec<S>> = vec![vec![S::zero(); n + 1]; k];
    let damping = S::of(0.5);
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mbar: Vec<S> = (0..=n)
            .map(|i| {
                means.iter().map(|m| m[i]).sum::<S>() / S::from_usize(k).unwrap()
            })
            .collect();
        // backward sweep for B_l: B' = -A B - c w mbar, B(T) = 0.
        for l in 0..k {
            let c = bench.cost_weight[l];
            let w = bench.coupling[l];
            let rhs = |t: S, bb: S| -riccati_a(c, t1, t) * bb - c * w * interp(&times, &mbar, t);
            b[l][n] = S::zero();
            for i in (0..n).rev() {
                b[l][i] = rk4_step(rhs, times[i + 1], b[l][i + 1], -dt);
            }
        }
        // forward sweep for the means: m' = A m + B, damped update.
        let mut sup_diff = S::zero();
        for l in 0..k {
            let c = bench.cost_weight[l];
            let bl = &b[l];
            let rhs = |t: S, m: S| riccati_a(c, t1, t) * m + interp(&times, bl, t);
            let mut fresh = vec![means0[l]; n + 1];
            for i in 0..n {
                fresh[i + 1] = rk4_step(rhs, times[i], fresh[i], dt);
            }
            for i in 0..=n {
                let next = means[l][i] + damping * (fresh[i] - means[l][i]);
                sup_diff = sup_diff.max((next - means[l][i]).abs());
                means[l][i] = next;
            }
        }
        if sup_diff <= S::of(PICARD_TOL) {
            break;
        }
        if iterations >= PICARD_MAX_ITERS {
            return Err(HmfgError::solver(format!(
                "riccati mean coupling did not converge in {PICARD_MAX_ITERS} sweeps \
                 (last update {})",
                sup_diff.to64()
            )));
        }
    }

    // With B and mbar fixed, integrate C backward and the variance forward.
    let mbar: Vec<S> = (0..=n)
        .map(|i| means.iter().map(|m| m[i]).sum::<S>() / S::from_usize(k).unwrap())
        .collect();
    let half = S::of(0.5);
    let mut c0: Vec<Vec<S>> = vec![vec![S::zero(); n + 1]; k];
    let mut variances: Vec<Vec<S>> = vec![vec![S::zero(); n + 1]; k];
    for l in 0..k {
        let c = bench.cost_weight[l];
        let w = bench.coupling[l];
        let s2 = bench.vol[l] * bench.vol[l];
        let bl = &b[l];
        let rhs_c = |t: S, _cc: S| {
            let bt = interp(&times, bl, t);
            let target = w * interp(&times, &mbar, t);
            -s2 * riccati_a(c, t1, t) * half - bt * bt * half + c * half * target * target
        };
        for i in (0..n).rev() {
            c0[l][i] = rk4_step(rhs_c, times[i + 1], c0[l][i + 1], -dt);
        }
        let rhs_v = |t: S, v: S| S::of(2.0) * riccati_a(c, t1, t) * v + s2;
        variances[l][0] = variances0[l];
        for i in 0..n {
            variances[l][i + 1] = rk4_step(rhs_v, times[i], variances[l][i], dt);
        }
    }

    // The unclamped feedback must stay inside the action interval, else the
    // quadratic ansatz is not the true value function.
    let six = S::of(6.0);
    for l in 0..k {
        for i in 0..=n {
            let spread = six * variances[l][i].max(S::zero()).sqrt();
            let reach = (a[l][i].abs() * (means[l][i].abs() + spread) + b[l][i].abs()).abs();
            if reach > bench.action_bound {
                return Err(HmfgError::solver(format!(
                    "feedback magnitude {} exceeds the action bound {} for type {l}; \
                     the quadratic reference solution is invalid here",
                    reach.to64(),
                    bench.action_bound.to64()
                )));
            }
        }
    }

    Ok(RiccatiSolution {
        bench: bench.clone(),
        times,
        a,
        b,
        c0,
        means,
        variances,
        iterations,
    })
}

impl<S: Scalar> RiccatiSolution<S> {
    pub fn n_types(&self) -> usize {
        self.a.len()
    }

    /// Value `u_l(t, x) = A x^2/2 + B x + C`.
    pub fn value_on(&self, l: usize, t: S, x: S) -> S {
        let a = riccati_a(self.bench.cost_weight[l], self.bench.horizon, t);
        let b = interp(&self.times, &self.b[l], t);
        let c = interp(&self.times, &self.c0[l], t);
        a * x * x * S::of(0.5) + b * x + c
    }

    /// Optimal feedback / spatial value gradient `A x + B`.
    pub fn feedback_on(&self, l: usize, t: S, x: S) -> S {
        riccati_a(self.bench.cost_weight[l], self.bench.horizon, t) * x
            + interp(&self.times, &self.b[l], t)
    }

    pub fn mean_on(&self, l: usize, t: S) -> S {
        interp(&self.times, &self.means[l], t)
    }

    pub fn variance_on(&self, l: usize, t: S) -> S {
        interp(&self.times, &self.variances[l], t)
    }

    pub fn mean_functional_on(&self, t: S) -> S {
        let k = S::from_usize(self.n_types()).unwrap();
        (0..self.n_types()).map(|l| self.mean_on(l, t)).sum::<S>() / k
    }

    /// Gaussian equilibrium ensemble at time `t`, discretized on `grid`.
    pub fn ensemble_at(&self, grid: StateGrid<S>, t: S) -> Result<MeasureEnsemble<S>> {
        let measures = (0..self.n_types())
            .map(|l| {
                let std = self.variance_on(l, t).max(S::of(1e-30)).sqrt();
                GridMeasure::gaussian(grid, self.mean_on(l, t), std).map(Measure::Grid)
            })
            .collect::<Result<Vec<_>>>()?;
        MeasureEnsemble::new(measures)
    }

    /// Gaussian equilibrium flow sampled at the given time nodes.
    pub fn gaussian_flow(&self, grid: StateGrid<S>, times: &[S]) -> Result<EnsembleFlow<S>> {
        let snapshots = times
            .iter()
            .map(|&t| self.ensemble_at(grid, t))
            .collect::<Result<Vec<_>>>()?;
        EnsembleFlow::new(times.to_vec(), snapshots)
    }
}

/// Derivatives of the Riccati/moment solution with respect to the initial
/// per-type means: `dm[l][j][i] = d m_l(t_i) / d m_j(t_0)`, analogously
/// `db` for `B_l` and `dc` for `C_l`.
#[derive(Debug, Clone)]
pub struct MeanSensitivities<S> {
    pub times: Vec<S>,
    pub dm: Vec<Vec<Vec<S>>>,
    pub db: Vec<Vec<Vec<S>>>,
    pub dc: Vec<Vec<Vec<S>>>,
}

/// Solve the linearized forward-backward system for the sensitivities of
/// `(m, B, C)` to the initial means. Differentiating the moment coupling
/// gives, per initial-mean direction `j`,
///
/// ```text
/// P_l' =  A_l P_l + Q_l                 P_l(t_0) = delta_{lj}
/// Q_l' = -A_l Q_l - c_l w_l Pbar(t)     Q_l(T) = 0
/// ```
///
/// with `Pbar = (1/K) sum_k P_k`, and then
/// `(dC_l)' = -B_l Q_l + c_l w_l^2 mbar Pbar`, `dC_l(T) = 0`.
pub fn mean_sensitivities<S: Scalar>(sol: &RiccatiSolution<S>) -> Result<MeanSensitivities<S>> {
    let k = sol.n_types();
    let bench = &sol.bench;
    let t1 = bench.horizon;
    let times = &sol.times;
    let n = times.len() - 1;
    let dt = times[1] - times[0];
    let kk = S::from_usize(k).unwrap();
    let mbar: Vec<S> = (0..=n)
        .map(|i| sol.means.iter().map(|m| m[i]).sum::<S>() / kk)
        .collect();

    let mut dm = vec![vec![vec![S::zero(); n + 1]; k]; k];
    let mut db = vec![vec![vec![S::zero(); n + 1]; k]; k];
    let mut dc = vec![vec![vec![S::zero(); n + 1]; k]; k];
    for j in 0..k {
        // Picard on the linear sensitivity coupling, same scheme as the
        // main solve.
        let mut p: Vec<Vec<S>> = (0..k)
            .map(|l| vec![if l == j { S::one() } else { S::zero() }; n + 1])
            .collect();
        let mut q: Vec<Vec<S>> = vec![vec![S::zero(); n + 1]; k];
        let damping = S::of(0.5);
        let mut iterations = 0;
        loop {
            iterations += 1;
            let pbar: Vec<S> = (0..=n)
                .map(|i| p.iter().map(|pl| pl[i]).sum::<S>() / kk)
                .collect();
            for l in 0..k {
                let c = bench.cost_weight[l];
                let w = bench.coupling[l];
                let rhs =
                    |t: S, qq: S| -riccati_a(c, t1, t) * qq - c * w * interp(times, &pbar, t);
                q[l][n] = S::zero();
                for i in (0..n).rev() {
                    q[l][i] = rk4_step(rhs, times[i + 1], q[l][i + 1], -dt);
                }
            }
            let mut sup_diff = S::zero();
            for l in 0..k {
                let c = bench.cost_weight[l];
                let ql = &q[l];
                let rhs = |t: S, pp: S| riccati_a(c, t1, t) * pp + interp(times, ql, t);
                let mut fresh = vec![if l == j { S::one() } else { S::zero() }; n + 1];
                for i in 0..n {
                    fresh[i + 1] = rk4_step(rhs, times[i], fresh[i], dt);
                }
                for i in 0..=n {
                    let next = p[l][i] + damping * (fresh[i] - p[l][i]);
                    sup_diff = sup_diff.max((next - p[l][i]).abs());
                    p[l][i] = next;
                }
            }
            if sup_diff <= S::of(PICARD_TOL) {
                break;
            }
            if iterations >= PICARD_MAX_ITERS {
                return Err(HmfgError::solver(format!(
                    "mean sensitivity coupling did not converge in {PICARD_MAX_ITERS} \
                     sweeps (last update {})",
                    sup_diff.to64()
                )));
            }
        }
        let pbar: Vec<S> = (0..=n)
            .map(|i| p.iter().map(|pl| pl[i]).sum::<S>() / kk)
            .collect();
        for l in 0..k {
            let c = bench.cost_weight[l];
            let w = bench.coupling[l];
            let bl = &sol.b[l];
            let ql = &q[l];
            let rhs = |t: S, _y: S| {
                -interp(times, bl, t) * interp(times, ql, t)
                    + c * w * w * interp(times, &mbar, t) * interp(times, &pbar, t)
            };
            for i in (0..n).rev() {
                dc[l][j][i] = rk4_step(&rhs, times[i + 1], dc[l][j][i + 1], -dt);
            }
            dm[l][j] = std::mem::take(&mut p[l]);
            db[l][j] = std::mem::take(&mut q[l]);
        }
    }
    Ok(MeanSensitivities { times: times.clone(), dm, db, dc })
}

/// Linear interpolation on a uniform ascending grid, clamped at the ends.
fn interp<S: Scalar>(times: &[S], values: &[S], t: S) -> S {
    let n = times.len() - 1;
    let t0 = times[0];
    let dt = times[1] - t0;
    let s = ((t - t0) / dt).max(S::zero());
    let i = (s.floor().to64() as usize).min(n - 1);
    let frac = (s - S::from_usize(i).unwrap()).max(S::zero()).min(S::one());
    values[i] + (values[i + 1] - values[i]) * frac
}

fn rk4_step<S: Scalar>(rhs: impl Fn(S, S) -> S, t: S, y: S, h: S) -> S {
    let half = S::of(0.5);
    let k1 = rhs(t, y);
    let k2 = rhs(t + h * half, y + h * half * k1);
    let k3 = rhs(t + h * half, y + h * half * k2);
    let k4 = rhs(t + h, y + h * k3);
    y + h * (k1 + S::of(2.0) * (k2 + k3) + k4) / S::of(6.0)
}
