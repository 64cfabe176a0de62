use rayon::prelude::*;

use crate::error::{HmfgError, Result};
use crate::hjb_fp::value::{gradient_into, SolveGrids, ValueField};
use crate::metric::{EnsembleFlow, GridMeasure, Measure, MeasureEnsemble};
use crate::model::problem::{HmfgProblem, TruncationGuard};
use crate::scalar::Scalar;

/// Hard cap on the per-step trapezoidal mass drift of the FP solver;
/// anything larger indicates boundary leakage or an unstable step.
const MASS_DRIFT_CAP: f64 = 1e-6;

/// Tridiagonal solve (Thomas algorithm). `lower[0]` and
/// `upper[n-1]` are ignored. Overwrites `rhs` with the solution.
fn thomas<S: Scalar>(lower: &[S], diag: &[S], upper: &[S], rhs: &mut [S]) -> Result<()> {
    let n = diag.len();
    let mut c_star = vec![S::zero(); n];
    let mut denom = diag[0];
    if denom.abs() < S::of(1e-300) {
        return Err(HmfgError::solver("singular tridiagonal system"));
    }
    c_star[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c_star[i - 1];
        if denom.abs() < S::of(1e-300) {
            return Err(HmfgError::solver("singular tridiagonal system"));
        }
        if i < n - 1 {
            c_star[i] = upper[i] / denom;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] -= c_star[i] * next;
    }
    Ok(())
}

/// Backward semi-implicit HJB solve for a single type against a frozen
/// ensemble flow. Returns the flattened time-major value array and the
/// truncation monitor for `sigma dx_u`.
pub fn solve_hjb<S: Scalar>(
    problem: &HmfgProblem<S>,
    grids: &SolveGrids<S>,
    theta: S,
    rho: &EnsembleFlow<S>,
    guard_bound: S,
) -> Result<(Vec<S>, TruncationGuard<S>)> {
    let n_x = grids.state.n_x;
    let n_t = grids.time.n_t;
    let dx = grids.state.dx;
    let dt = grids.time.dt;
    let mut u = vec![S::zero(); n_x * n_t];
    let mut guard = TruncationGuard::new(guard_bound)?;
    let type_idx = rho.snapshot(0).type_index(theta);

    // terminal condition
    {
        let mu_t = rho.snapshot_at(grids.time.t1)?;
        for j in 0..n_x {
            u[(n_t - 1) * n_x + j] = (problem.terminal_cost)(theta, grids.state.node(j), mu_t);
        }
    }

    let mut grad = vec![S::zero(); n_x];
    let mut lower = vec![S::zero(); n_x];
    let mut diag = vec![S::zero(); n_x];
    let mut upper = vec![S::zero(); n_x];
    let mut rhs = vec![S::zero(); n_x];

    for i in (0..n_t - 1).rev() {
        let t_now = grids.time.node(i);
        let t_next = grids.time.node(i + 1);
        let mu_now = rho.snapshot_at(t_now)?;
        let mu_next = rho.snapshot_at(t_next)?;
        let next = i + 1;
        {
            let row = &u[next * n_x..(next + 1) * n_x];
            gradient_into(row, dx, &mut grad);
            // explicit Hamiltonian at the later time level
            for j in 0..n_x {
                let x = grids.state.node(j);
                rhs[j] = row[j] + dt * (problem.hamiltonian)(theta, t_next, x, grad[j], mu_next);
                let sigma = (problem.vol)(theta, t_next, x, mu_next);
                guard.observe(sigma * grad[j], type_idx, t_next, x);
            }
        }
        // implicit diffusion (I - dt/2 sigma^2 dxx). Boundary rows use a
        // linear-extrapolation ghost (zero second difference), so affine
        // profiles pass through untouched and the artificial boundary only
        // perturbs a diffusion length near the edges of the box.
        for j in 0..n_x {
            let x = grids.state.node(j);
            let sigma = (problem.vol)(theta, t_now, x, mu_now);
            let lam = dt * sigma * sigma * S::of(0.5) / (dx * dx);
            if j == 0 || j == n_x - 1 {
                diag[j] = S::one();
                lower[j] = S::zero();
                upper[j] = S::zero();
            } else {
                diag[j] = S::one() + S::of(2.0) * lam;
                lower[j] = -lam;
                upper[j] = -lam;
            }
        }
        thomas(&lower, &diag, &upper, &mut rhs)?;
        u[i * n_x..(i + 1) * n_x].copy_from_slice(&rhs);
    }
    Ok((u, guard))
}

/// One FP run: grid densities at every time node plus the largest
/// pre-renormalization trapezoidal mass drift over all steps.
pub struct FpRun<S> {
    pub densities: Vec<GridMeasure<S>>,
    pub max_mass_drift: S,
}

/// Forward conservative Fokker-Planck solve. `drift(i, j)` and
/// `vol(i, j)` give the feedback drift and volatility at time node `i`,
/// state node `j`. Implicit upwind flux form with zero-flux boundaries.
pub fn solve_fp<S: Scalar>(
    grids: &SolveGrids<S>,
    initial: &GridMeasure<S>,
    drift: impl Fn(usize, usize) -> S,
    vol: impl Fn(usize, usize) -> S,
) -> Result<FpRun<S>> {
    if !initial.grid().matches(&grids.state) {
        return Err(HmfgError::validation("initial density is on a different grid"));
    }
    let n_x = grids.state.n_x;
    let n_t = grids.time.n_t;
    let dx = grids.state.dx;
    let dt = grids.time.dt;
    let r = dt / dx;
    let half = S::of(0.5);

    let mut out = Vec::with_capacity(n_t);
    out.push(initial.clone());
    let mut m: Vec<S> = initial.density().to_vec();
    let mut max_drift = S::zero();

    let mut lower = vec![S::zero(); n_x];
    let mut diag = vec![S::zero(); n_x];
    let mut upper = vec![S::zero(); n_x];

    for i in 0..n_t - 1 {
        // interface advection (upwind split) and diffusion coefficients;
        // interface j+1/2 sits between nodes j and j+1. Coefficients are
        // evaluated at the new time level for the implicit step.
        let mut a_plus = vec![S::zero(); n_x - 1];
        let mut a_minus = vec![S::zero(); n_x - 1];
        let mut dif = vec![S::zero(); n_x - 1];
        for j in 0..n_x - 1 {
            let a = (drift(i + 1, j) + drift(i + 1, j + 1)) * half;
            a_plus[j] = a.max(S::zero());
            a_minus[j] = a.min(S::zero());
            let s = (vol(i + 1, j) + vol(i + 1, j + 1)) * half;
            dif[j] = s * s * half / dx;
        }
        // row j: m_j + r (F_{j+1/2} - F_{j-1/2}) = m_j^old with
        // F_{j+1/2} = a+ m_j + a- m_{j+1} - dif (m_{j+1} - m_j)
        for j in 0..n_x {
            let mut d = S::one();
            let mut lo = S::zero();
            let mut up = S::zero();
            if j < n_x - 1 {
                d += r * (a_plus[j] + dif[j]);
                up = r * (a_minus[j] - dif[j]);
            }
            if j > 0 {
                d += r * (-a_minus[j - 1] + dif[j - 1]);
                lo = r * (-a_plus[j - 1] - dif[j - 1]);
            }
            diag[j] = d;
            lower[j] = lo;
            upper[j] = up;
        }
        thomas(&lower, &diag, &upper, &mut m)?;
        for v in &mut m {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        let mass = grids.state.trapz(&m);
        let drift_err = (mass - S::one()).abs();
        max_drift = max_drift.max(drift_err);
        if drift_err > S::of(MASS_DRIFT_CAP) {
            return Err(HmfgError::solver(format!(
                "mass drift {} at step {i} exceeds the cap {MASS_DRIFT_CAP:.1e}; \
                 the state box is likely too small",
                drift_err.to64()
            )));
        }
        if drift_err > S::zero() {
            log::debug!("fp step {i}: renormalizing mass drift {}", drift_err.to64());
            for v in &mut m {
                *v /= mass;
            }
        }
        out.push(GridMeasure::new(grids.state, m.clone())?);
    }
    Ok(FpRun { densities: out, max_mass_drift: max_drift })
}

/// Output of one application of the best-response map.
pub struct BestResponse<S> {
    pub flow: EnsembleFlow<S>,
    pub value: ValueField<S>,
    pub guard: TruncationGuard<S>,
    pub max_mass_drift: S,
}

/// Apply the best-response map: for each type, solve the backward HJB
/// against the frozen flow `rho`, extract the feedback drift, and push the
/// initial density forward. Types are solved in parallel; the collected
/// order (and hence every output bit) is independent of scheduling.
pub fn best_response_flow<S: Scalar>(
    problem: &HmfgProblem<S>,
    grids: &SolveGrids<S>,
    initial: &MeasureEnsemble<S>,
    rho: &EnsembleFlow<S>,
    guard_bound: S,
) -> Result<BestResponse<S>> {
    let k = initial.n_types();
    if rho.snapshot(0).n_types() != k {
        return Err(HmfgError::validation(format!(
            "frozen flow has {} types, initial ensemble has {k}",
            rho.snapshot(0).n_types()
        )));
    }
    let n_x = grids.state.n_x;
    let times = grids.time.nodes();

    let per_type: Vec<(Vec<S>, TruncationGuard<S>, Vec<GridMeasure<S>>, S)> = (0..k)
        .into_par_iter()
        .map(|l| -> Result<_> {
            let theta = initial.type_points()[l];
            let (u, guard) = solve_hjb(problem, grids, theta, rho, guard_bound)?;
            // feedback drift from the value gradient
            let mut grad = vec![S::zero(); n_x];
            let mut a = vec![S::zero(); u.len()];
            for i in 0..grids.time.n_t {
                let row = &u[i * n_x..(i + 1) * n_x];
                gradient_into(row, grids.state.dx, &mut grad);
                let t = times[i];
                let mu = rho.snapshot_at(t)?;
                for j in 0..n_x {
                    let x = grids.state.node(j);
                    let a_star = (problem.feedback)(theta, t, x, grad[j], mu);
                    a[i * n_x + j] = (problem.drift)(theta, t, x, mu, a_star);
                }
            }
            let init = initial
                .measure(l)
                .as_grid()
                .ok_or_else(|| {
                    HmfgError::unsupported("best response needs grid initial measures")
                })?
                .clone();
            let vol = |i: usize, j: usize| {
                let t = times[i];
                let mu = rho.snapshot_at(t).expect("flow coverage checked above");
                (problem.vol)(theta, t, grids.state.node(j), mu)
            };
            let run = solve_fp(grids, &init, |i, j| a[i * n_x + j], vol)?;
            Ok((u, guard, run.densities, run.max_mass_drift))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut guard = TruncationGuard::new(guard_bound)?;
    let mut max_drift = S::zero();
    let mut u_all = Vec::with_capacity(k);
    let mut dens_all = Vec::with_capacity(k);
    for (u, g, d, md) in per_type {
        guard.merge(&g);
        max_drift = max_drift.max(md);
        u_all.push(u);
        dens_all.push(d);
    }
    let snapshots = (0..grids.time.n_t)
        .map(|i| {
            MeasureEnsemble::new(
                (0..k).map(|l| Measure::Grid(dens_all[l][i].clone())).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let flow = EnsembleFlow::new(times, snapshots)?;
    let value = ValueField::new(*grids, u_all)?;
    Ok(BestResponse { flow, value, guard, max_mass_drift: max_drift })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use crate::metric::{EmpiricalMeasure, StateGrid, TimeGrid};
    use crate::model::lq::LqBenchmark;
    use crate::model::riccati::riccati_oracle;

    use super::*;

    fn free_problem(sigma: f64) -> HmfgProblem<f64> {
        // zero drift and costs: backward heat equation for the value.
        HmfgProblem {
            drift: Arc::new(|_, _, _, _, _| 0.0),
            vol: Arc::new(move |_, _, _, _| sigma),
            running_cost: Arc::new(|_, _, _, _, _| 0.0),
            terminal_cost: Arc::new(|_, x, _| x),
            hamiltonian: Arc::new(|_, _, _, _, _| 0.0),
            hamiltonian_grad: Arc::new(|_, _, _, _, _| 0.0),
            feedback: Arc::new(|_, _, _, _, _| 0.0),
            action_bounds: (-1.0, 1.0),
            lipschitz: 1.0 / sigma.min(1.0 / sigma),
            horizon: 0.5,
        }
    }

    fn dirac_flow(times: Vec<f64>) -> EnsembleFlow<f64> {
        EnsembleFlow::frozen(
            times,
            MeasureEnsemble::new(vec![Measure::Empirical(EmpiricalMeasure::dirac(0.0))]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn thomas_solves_small_system() {
        // [2 1 0; 1 2 1; 0 1 2] x = [4; 8; 8] -> x = [1; 2; 3]
        let mut rhs: Vec<f64> = vec![4.0, 8.0, 8.0];
        thomas(&[0.0, 1.0, 1.0], &[2.0, 2.0, 2.0], &[1.0, 1.0, 0.0], &mut rhs).unwrap();
        for (got, want) in rhs.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hjb_preserves_affine_terminal_data() {
        // linear functions are harmonic, so u(t, x) = x for all t; the
        // boundary treatment must not disturb this anywhere.
        let problem = free_problem(1.0);
        let grids = SolveGrids::new(
            StateGrid::new(-2.0, 2.0, 201).unwrap(),
            TimeGrid::new(0.0, 0.5, 501).unwrap(),
        );
        let rho = dirac_flow(grids.time.nodes());
        let (u, guard) = solve_hjb(&problem, &grids, 1.0, &rho, 50.0).unwrap();
        let mut worst: f64 = 0.0;
        for j in 0..grids.state.n_x {
            worst = worst.max((u[j] - grids.state.node(j)).abs());
        }
        assert!(worst < 1e-10, "affine invariance error {worst}");
        assert!(!guard.violated);
    }

    #[test]
    fn hjb_quadratic_heat_closed_form_in_interior() {
        // terminal u(T) = x^2 evolves backward as u(t, x) = x^2 + (T - t);
        // the boundary error stays within a diffusion length of the edges.
        let sigma = 1.0;
        let mut problem = free_problem(sigma);
        problem.terminal_cost = Arc::new(|_, x: f64, _| x * x);
        let grids = SolveGrids::new(
            StateGrid::new(-6.0, 6.0, 401).unwrap(),
            TimeGrid::new(0.0, 0.5, 1001).unwrap(),
        );
        let rho = dirac_flow(grids.time.nodes());
        let (u, _) = solve_hjb(&problem, &grids, 1.0, &rho, 1e6).unwrap();
        let mut worst: f64 = 0.0;
        for j in 0..grids.state.n_x {
            let x = grids.state.node(j);
            if x.abs() <= 2.0 {
                worst = worst.max((u[j] - (x * x + 0.5)).abs());
            }
        }
        assert!(worst < 1e-3, "heat closed-form interior error {worst}");
    }

    #[test]
    fn fp_pure_diffusion_matches_gaussian_widening() {
        let grids = SolveGrids::new(
            StateGrid::new(-6.0, 6.0, 401).unwrap(),
            TimeGrid::new(0.0, 0.5, 501).unwrap(),
        );
        let sigma = 0.7;
        let init = GridMeasure::<f64>::gaussian(grids.state, 0.3, 0.4).unwrap();
        let run = solve_fp(&grids, &init, |_, _| 0.0, |_, _| sigma).unwrap();
        assert!(run.max_mass_drift < 1e-8, "drift {}", run.max_mass_drift);
        let last = run.densities.last().unwrap();
        assert!((last.mean() - 0.3).abs() < 1e-3);
        let v_exact = 0.4 * 0.4 + sigma * sigma * 0.5;
        assert!(
            (last.variance() - v_exact).abs() < 5e-3,
            "variance {} vs {v_exact}",
            last.variance()
        );
    }

    #[test]
    fn fp_constant_drift_moves_the_mean() {
        let grids = SolveGrids::new(
            StateGrid::new(-6.0, 6.0, 801).unwrap(),
            TimeGrid::new(0.0, 0.5, 2001).unwrap(),
        );
        let init = GridMeasure::<f64>::gaussian(grids.state, -0.5, 0.3).unwrap();
        let run = solve_fp(&grids, &init, |_, _| 1.2, |_, _| 0.5).unwrap();
        let last = run.densities.last().unwrap();
        assert!(
            (last.mean() - (-0.5 + 1.2 * 0.5)).abs() < 5e-3,
            "mean {}",
            last.mean()
        );
    }

    #[test]
    fn decoupled_lq_best_response_tracks_riccati() {
        // with zero coupling the frozen flow is irrelevant and the PDE
        // best response must reproduce the Riccati reference.
        let bench = LqBenchmark::<f64>::decoupled(2, 0.4).unwrap();
        let sol = riccati_oracle(&bench, 2000).unwrap();
        let state = bench.default_grid(301).unwrap();
        let grids = SolveGrids::new(state, TimeGrid::new(0.0, 0.4, 801).unwrap());
        let x_bound = state.x_max.abs().max(state.x_min.abs());
        let problem = bench.problem(x_bound).unwrap();
        let initial = bench.initial_ensemble(state).unwrap();
        let rho = EnsembleFlow::frozen(grids.time.nodes(), initial.clone()).unwrap();
        let br = best_response_flow(&problem, &grids, &initial, &rho, 100.0).unwrap();
        assert!(br.max_mass_drift < 1e-8);

        // value field against the quadratic reference near the support
        let mut worst_u: f64 = 0.0;
        for l in 0..2 {
            for &t in &[0.0, 0.2] {
                for x in [-0.6, -0.2, 0.0, 0.3, 0.7] {
                    let got = br.value.value_at(l, t, x);
                    let want = sol.value_on(l, t, x);
                    worst_u = worst_u.max((got - want).abs());
                }
            }
        }
        assert!(worst_u < 5e-3, "value error {worst_u}");

        // pushed-forward means against the reference mean flow
        let mut worst_m: f64 = 0.0;
        for (i, &t) in br.flow.times().iter().enumerate() {
            for l in 0..2 {
                let got = br.flow.snapshot(i).measure(l).mean();
                worst_m = worst_m.max((got - sol.mean_on(l, t)).abs());
            }
        }
        assert!(worst_m < 5e-3, "mean error {worst_m}");
    }
}
