//! Fixed-point orchestration: damped Picard iteration of the best-response
//! map on ensemble flows, horizon splitting for long horizons, contraction
//! diagnostics, and feedback extraction from the converged value field.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::error::{HmfgError, Result};
use crate::hjb_fp::{best_response_flow, SolveGrids, ValueField};
use crate::metric::{
    flow_distance, EnsembleFlow, GridMeasure, Measure, MeasureEnsemble, TimeGrid,
};
use crate::model::problem::{HmfgProblem, TruncationGuard};
use crate::scalar::Scalar;

/// Picard iteration parameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FixedPointConfig<S> {
    /// Flow-distance residual target.
    pub tol: S,
    pub max_iter: usize,
    /// Damping in (0, 1]: 1 is pure Picard.
    pub damping: S,
    /// Route long horizons through [`solve_split_horizon`].
    pub split_horizon: bool,
    /// Window length for horizon splitting; `None` = adaptive.
    pub delta0_hint: Option<S>,
}

impl<S: Scalar> FixedPointConfig<S> {
    pub fn new(tol: S, max_iter: usize, damping: S) -> Result<Self> {
        let cfg = FixedPointConfig {
            tol,
            max_iter,
            damping,
            split_horizon: false,
            delta0_hint: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > S::zero()) {
            return Err(HmfgError::config("tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(HmfgError::config("max_iter must be positive"));
        }
        if !(self.damping > S::zero() && self.damping <= S::one()) {
            return Err(HmfgError::config("damping must lie in (0, 1]"));
        }
        if let Some(d) = self.delta0_hint {
            if !(d > S::zero()) {
                return Err(HmfgError::config("delta0_hint must be positive"));
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for FixedPointConfig<S> {
    fn default() -> Self {
        FixedPointConfig {
            tol: S::of(1e-6),
            max_iter: 100,
            damping: S::of(0.5),
            split_horizon: false,
            delta0_hint: None,
        }
    }
}

/// Iteration history and diagnostics of one fixed-point solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport<S> {
    pub residuals: Vec<S>,
    pub contraction_ratios: Vec<S>,
    pub converged: bool,
    pub iterations: usize,
    pub guard: TruncationGuard<S>,
    pub max_mass_drift: S,
    /// Not serialized: wall time belongs in the run manifest, so data
    /// outputs stay bit-identical across repeated runs.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Converged (or best-effort) equilibrium: the fixed-point flow, the
/// per-type value fields solved against it, and the iteration report.
pub struct EquilibriumSolution<S> {
    pub problem: HmfgProblem<S>,
    pub grids: SolveGrids<S>,
    pub rho_star: EnsembleFlow<S>,
    pub value: ValueField<S>,
    pub report: SolveReport<S>,
}

impl<S: Scalar> EquilibriumSolution<S> {
    /// Equilibrium feedback `a*(theta_l, t, x)` from the stored gradient
    /// by bilinear interpolation.
    pub fn feedback(&self, l: usize, t: S, x: S) -> Result<S> {
        let theta = self.value.type_points[l];
        let p = self.value.grad_at(l, t, x);
        let mu = self.rho_star.snapshot_at(t)?;
        Ok((self.problem.feedback)(theta, t, x, p, &mu.clone()))
    }

    /// Feedback drift `b(theta_l, t, x, rho*_t, a*)`.
    pub fn feedback_drift(&self, l: usize, t: S, x: S) -> Result<S> {
        let theta = self.value.type_points[l];
        let p = self.value.grad_at(l, t, x);
        let mu = self.rho_star.snapshot_at(t)?;
        let a = (self.problem.feedback)(theta, t, x, p, mu);
        Ok((self.problem.drift)(theta, t, x, mu, a))
    }

    pub fn n_types(&self) -> usize {
        self.value.n_types()
    }
}

/// Guard bound for `|sigma dx_u|`: generous multiple of the declared
/// constants — it is a diagnostic for runaway gradients, not a limiter.
fn default_guard_bound<S: Scalar>(problem: &HmfgProblem<S>, grids: &SolveGrids<S>) -> S {
    let x_bound = grids.state.x_max.abs().max(grids.state.x_min.abs());
    S::of(10.0) * problem.lipschitz * problem.lipschitz * (S::one() + x_bound)
}

/// Per-type, per-time convex combination of densities:
/// `(1 - lambda) old + lambda new`. Stays on the probability simplex.
fn damp_flows<S: Scalar>(
    old: &EnsembleFlow<S>,
    new: &EnsembleFlow<S>,
    lambda: S,
) -> Result<EnsembleFlow<S>> {
    if lambda >= S::one() {
        return Ok(new.clone());
    }
    let one_m = S::one() - lambda;
    let snapshots = old
        .snapshots()
        .iter()
        .zip(new.snapshots())
        .map(|(a, b)| {
            let measures = a
                .measures()
                .iter()
                .zip(b.measures())
                .map(|(ma, mb)| {
                    let (ga, gb) = match (ma.as_grid(), mb.as_grid()) {
                        (Some(ga), Some(gb)) => (ga, gb),
                        _ => {
                            return Err(HmfgError::unsupported(
                                "damping needs grid measures",
                            ))
                        }
                    };
                    let density: Vec<S> = ga
                        .density()
                        .iter()
                        .zip(gb.density())
                        .map(|(&da, &db)| one_m * da + lambda * db)
                        .collect();
                    GridMeasure::new(*ga.grid(), density).map(Measure::Grid)
                })
                .collect::<Result<Vec<_>>>()?;
            MeasureEnsemble::new(measures)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleFlow::new(old.times().to_vec(), snapshots)
}

/// Damped Picard iteration of the best-response map from the time-frozen
/// initial ensemble. The reported final residual is always a fresh
/// `d_1(Phi(rho), rho)` evaluation at the returned flow, so `converged`
/// certifies the fixed point rather than the update size.
pub fn solve_equilibrium<S: Scalar>(
    problem: &HmfgProblem<S>,
    mu0: &MeasureEnsemble<S>,
    grids: &SolveGrids<S>,
    config: &FixedPointConfig<S>,
) -> Result<EquilibriumSolution<S>> {
    let rho0 = EnsembleFlow::frozen(grids.time.nodes(), mu0.clone())?;
    solve_equilibrium_from(problem, mu0, grids, config, rho0)
}

/// [`solve_equilibrium`] with an explicit initial flow guess for the
/// Picard iteration (the fixed point must not depend on it — used by the
/// uniqueness diagnostics).
pub fn solve_equilibrium_from<S: Scalar>(
    problem: &HmfgProblem<S>,
    mu0: &MeasureEnsemble<S>,
    grids: &SolveGrids<S>,
    config: &FixedPointConfig<S>,
    rho0: EnsembleFlow<S>,
) -> Result<EquilibriumSolution<S>> {
    config.validate()?;
    let start = Instant::now();
    let guard_bound = default_guard_bound(problem, grids);
    let mut rho = rho0;
    let mut residuals: Vec<S> = Vec::new();
    let mut ratios = Vec::new();
    let mut guard = TruncationGuard::new(guard_bound)?;
    let mut max_drift = S::zero();
    let mut converged = false;
    let mut value = None;

    for iter in 1..=config.max_iter {
        let br = best_response_flow(problem, grids, mu0, &rho, guard_bound)?;
        let residual = flow_distance(&br.flow, &rho, 1)?;
        if !residual.is_finite() {
            return Err(HmfgError::solver(format!(
                "non-finite fixed-point residual at iteration {iter}"
            )));
        }
        if let Some(&prev) = residuals.last() {
            if prev > S::zero() {
                ratios.push(residual / prev);
            }
        }
        residuals.push(residual);
        guard.merge(&br.guard);
        max_drift = max_drift.max(br.max_mass_drift);
        if residual <= config.tol {
            converged = true;
            value = Some(br.value);
            break;
        }
        if iter == config.max_iter {
            value = Some(br.value);
            break;
        }
        rho = damp_flows(&rho, &br.flow, config.damping)?;
    }
    let value = value.expect("max_iter >= 1 guarantees at least one iterate");

    Ok(EquilibriumSolution {
        problem: problem.clone(),
        grids: *grids,
        rho_star: rho,
        value,
        report: SolveReport {
            iterations: residuals.len(),
            residuals,
            contraction_ratios: ratios,
            converged,
            guard,
            max_mass_drift: max_drift,
            wall_time: start.elapsed().as_secs_f64(),
        },
    })
}

/// One-step contraction estimate `d_1(Phi(rho1), Phi(rho2)) / d_1(rho1, rho2)`
/// of the best-response map with initial ensemble `mu0`.
pub fn estimate_contraction<S: Scalar>(
    problem: &HmfgProblem<S>,
    mu0: &MeasureEnsemble<S>,
    rho1: &EnsembleFlow<S>,
    rho2: &EnsembleFlow<S>,
    grids: &SolveGrids<S>,
) -> Result<S> {
    let denom = flow_distance(rho1, rho2, 1)?;
    if denom == S::zero() {
        return Err(HmfgError::validation(
            "identical inputs: contraction ratio undefined",
        ));
    }
    let guard_bound = default_guard_bound(problem, grids);
    let phi1 = best_response_flow(problem, grids, mu0, rho1, guard_bound)?;
    let phi2 = best_response_flow(problem, grids, mu0, rho2, guard_bound)?;
    Ok(flow_distance(&phi1.flow, &phi2.flow, 1)? / denom)
}

/// Maximum contraction ratio a window solve may exhibit before the
/// adaptive splitter shrinks the window.
const WINDOW_RATIO_CAP: f64 = 0.8;
const MAX_OUTER_SWEEPS: usize = 30;

/// Fixed-point solve by horizon splitting: partition `[t0, T]` into
/// windows short enough for the best-response map to contract, then
/// iterate forward-backward sweeps. Each backward sweep recomputes the
/// continuation values against the frozen global flow; each forward sweep
/// solves the window equilibria in order, chaining initial ensembles and
/// continuation terminal costs. Convergence is certified globally with a
/// fresh full-horizon best-response evaluation.
pub fn solve_split_horizon<S: Scalar>(
    problem: &HmfgProblem<S>,
    mu0: &MeasureEnsemble<S>,
    grids: &SolveGrids<S>,
    config: &FixedPointConfig<S>,
) -> Result<EquilibriumSolution<S>> {
    config.validate()?;
    let horizon = grids.time.t1 - grids.time.t0;
    let mut window = config.delta0_hint.unwrap_or(horizon).min(horizon);
    loop {
        let n_windows = (horizon / window).ceil().to64() as usize;
        let n_windows = n_windows.max(1);
        if n_windows == 1 {
            // single window: identical to the flat solve by construction
            return solve_equilibrium(problem, mu0, grids, config);
        }
        match split_attempt(problem, mu0, grids, config, n_windows)? {
            SplitOutcome::Done(sol) => return Ok(sol),
            SplitOutcome::Shrink => {
                window *= S::of(0.5);
                if window < grids.time.dt * S::of(2.0) {
                    return Err(HmfgError::solver(
                        "no contracting window: split width shrank below the time step",
                    ));
                }
            }
        }
    }
}

enum SplitOutcome<S> {
    Done(EquilibriumSolution<S>),
    Shrink,
}

fn split_attempt<S: Scalar>(
    problem: &HmfgProblem<S>,
    mu0: &MeasureEnsemble<S>,
    grids: &SolveGrids<S>,
    config: &FixedPointConfig<S>,
    n_windows: usize,
) -> Result<SplitOutcome<S>> {
    let start = Instant::now();
    let n_t = grids.time.n_t;
    if n_windows >= n_t {
        return Ok(SplitOutcome::Shrink);
    }
    // node-aligned window boundaries
    let bounds: Vec<usize> = (0..=n_windows)
        .map(|k| k * (n_t - 1) / n_windows)
        .collect();
    if bounds.windows(2).any(|w| w[1] - w[0] < 1) {
        return Ok(SplitOutcome::Shrink);
    }
    let window_grids: Vec<SolveGrids<S>> = bounds
        .windows(2)
        .map(|w| {
            TimeGrid::new(grids.time.node(w[0]), grids.time.node(w[1]), w[1] - w[0] + 1)
                .map(|tg| SolveGrids::new(grids.state, tg))
        })
        .collect::<Result<Vec<_>>>()?;

    let guard_bound = default_guard_bound(problem, grids);
    let k_types = mu0.n_types();
    let mut rho_g = EnsembleFlow::frozen(grids.time.nodes(), mu0.clone())?;
    let mut residuals = Vec::new();
    let mut ratios: Vec<S> = Vec::new();
    let mut guard = TruncationGuard::new(guard_bound)?;
    let mut max_drift = S::zero();

    for _sweep in 0..MAX_OUTER_SWEEPS {
        // backward sweep: full-horizon per-type values against the frozen
        // global flow provide the continuation values at window boundaries.
        let cont = best_response_flow(problem, grids, mu0, &rho_g, guard_bound)?;
        guard.merge(&cont.guard);

        // forward sweep: window equilibria chained through initial
        // ensembles and continuation terminal costs.
        let mut window_flows = Vec::with_capacity(n_windows);
        let mut init = mu0.clone();
        let wcfg = FixedPointConfig { split_horizon: false, ..*config };
        for (k, wg) in window_grids.iter().enumerate() {
            let wproblem = if k + 1 == n_windows {
                problem.with_horizon(wg.time.t1)
            } else {
                let boundary_node = bounds[k + 1];
                let cont_values: Vec<Vec<S>> = (0..k_types)
                    .map(|l| {
                        (0..grids.state.n_x)
                            .map(|j| cont.value.value(l, boundary_node, j))
                            .collect()
                    })
                    .collect();
                let state = grids.state;
                let terminal = Arc::new(move |theta: S, x: S, _mu: &MeasureEnsemble<S>| {
                    let kk = cont_values.len();
                    let idx = ((theta * S::from_usize(kk).unwrap()).ceil().to64() as isize - 1)
                        .clamp(0, kk as isize - 1) as usize;
                    interp_grid(&state, &cont_values[idx], x)
                });
                problem.with_terminal_cost(terminal).with_horizon(wg.time.t1)
            };
            let wsol = solve_equilibrium(&wproblem, &init, wg, &wcfg)?;
            if wsol
                .report
                .contraction_ratios
                .iter()
                .any(|&r| r > S::of(WINDOW_RATIO_CAP))
                && !wsol.report.converged
            {
                return Ok(SplitOutcome::Shrink);
            }
            guard.merge(&wsol.report.guard);
            max_drift = max_drift.max(wsol.report.max_mass_drift);
            init = wsol.rho_star.snapshots().last().unwrap().clone();
            window_flows.push(wsol.rho_star);
        }

        // assemble the global flow (windows share boundary nodes)
        let mut snapshots = Vec::with_capacity(n_t);
        for (k, wf) in window_flows.iter().enumerate() {
            let take = if k + 1 == n_windows { wf.n_times() } else { wf.n_times() - 1 };
            snapshots.extend(wf.snapshots()[..take].iter().cloned());
        }
        let rho_new = EnsembleFlow::new(grids.time.nodes(), snapshots)?;

        // global certificate
        let check = best_response_flow(problem, grids, mu0, &rho_new, guard_bound)?;
        let residual = flow_distance(&check.flow, &rho_new, 1)?;
        if !residual.is_finite() {
            return Err(HmfgError::solver("non-finite split-horizon residual"));
        }
        if let Some(&prev) = residuals.last() {
            if prev > S::zero() {
                ratios.push(residual / prev);
            }
        }
        residuals.push(residual);
        guard.merge(&check.guard);
        max_drift = max_drift.max(check.max_mass_drift);
        if residual <= config.tol {
            return Ok(SplitOutcome::Done(EquilibriumSolution {
                problem: problem.clone(),
                grids: *grids,
                rho_star: rho_new,
                value: check.value,
                report: SolveReport {
                    iterations: residuals.len(),
                    residuals,
                    contraction_ratios: ratios,
                    converged: true,
                    guard,
                    max_mass_drift: max_drift,
                    wall_time: start.elapsed().as_secs_f64(),
                },
            }));
        }
        rho_g = rho_new;
    }
    Err(HmfgError::solver(format!(
        "split-horizon sweeps did not reach tol within {MAX_OUTER_SWEEPS} passes \
         (last residual {})",
        residuals.last().map(|r| r.to64()).unwrap_or(f64::NAN)
    )))
}

/// Linear interpolation of node values on a state grid, clamped at the box.
fn interp_grid<S: Scalar>(
    grid: &crate::metric::StateGrid<S>,
    values: &[S],
    x: S,
) -> S {
    let s = ((x - grid.x_min) / grid.dx).max(S::zero());
    let j = (s.floor().to64() as usize).min(grid.n_x - 2);
    let f = (s - S::from_usize(j).unwrap()).max(S::zero()).min(S::one());
    values[j] + (values[j + 1] - values[j]) * f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::StateGrid;
    use crate::model::lq::LqBenchmark;
    use crate::model::riccati::riccati_oracle;

    fn setup(
        bench: &LqBenchmark<f64>,
        n_x: usize,
        n_t: usize,
    ) -> (HmfgProblem<f64>, MeasureEnsemble<f64>, SolveGrids<f64>) {
        let state = bench.default_grid(n_x).unwrap();
        let grids = SolveGrids::new(
            state,
            TimeGrid::new(0.0, bench.horizon, n_t).unwrap(),
        );
        let x_bound = state.x_max.abs().max(state.x_min.abs());
        let problem = bench.problem(x_bound).unwrap();
        let mu0 = bench.initial_ensemble(state).unwrap();
        (problem, mu0, grids)
    }

    #[test]
    fn decoupled_problem_converges_after_one_update() {
        let bench = LqBenchmark::<f64>::decoupled(2, 0.2).unwrap();
        let (problem, mu0, grids) = setup(&bench, 101, 101);
        let config = FixedPointConfig::new(1e-12, 10, 1.0).unwrap();
        let sol = solve_equilibrium(&problem, &mu0, &grids, &config).unwrap();
        assert!(sol.report.converged);
        // one effective update: the second residual certifies the fixed point
        assert_eq!(sol.report.iterations, 2);
        assert!(sol.report.residuals[1] <= 1e-12);
    }

    #[test]
    fn coupled_lq_matches_riccati_means() {
        let bench = LqBenchmark::<f64>::standard(2, 0.3).unwrap();
        let (problem, mu0, grids) = setup(&bench, 201, 201);
        let config = FixedPointConfig::new(1e-6, 60, 0.5).unwrap();
        let sol = solve_equilibrium(&problem, &mu0, &grids, &config).unwrap();
        assert!(sol.report.converged, "residuals {:?}", sol.report.residuals);
        let oracle = riccati_oracle(&bench, 2000).unwrap();
        let mut worst: f64 = 0.0;
        for (i, &t) in sol.rho_star.times().iter().enumerate() {
            for l in 0..2 {
                let got = sol.rho_star.snapshot(i).measure(l).mean();
                worst = worst.max((got - oracle.mean_on(l, t)).abs());
            }
        }
        assert!(worst < 1e-2, "mean error vs reference {worst}");
    }

    #[test]
    fn short_horizon_pure_picard_contracts() {
        let bench = LqBenchmark::<f64>::standard(2, 0.1).unwrap();
        let (problem, mu0, grids) = setup(&bench, 151, 101);
        let config = FixedPointConfig::new(1e-8, 25, 1.0).unwrap();
        let sol = solve_equilibrium(&problem, &mu0, &grids, &config).unwrap();
        assert!(sol.report.converged);
        for (i, &r) in sol.report.contraction_ratios.iter().enumerate() {
            // ignore ratios once the residual sits at rounding level
            if sol.report.residuals[i] > 1e-13 {
                assert!(r < 1.0, "ratio {r} at step {i}");
            }
        }
    }

    #[test]
    fn contraction_estimate_zero_for_constant_map() {
        let bench = LqBenchmark::<f64>::decoupled(2, 0.2).unwrap();
        let (problem, mu0, grids) = setup(&bench, 101, 81);
        let times = grids.time.nodes();
        let rho1 = EnsembleFlow::frozen(times.clone(), mu0.clone()).unwrap();
        let shifted = {
            let measures = (0..2)
                .map(|l| {
                    Measure::Grid(
                        GridMeasure::gaussian(
                            grids.state,
                            bench.initial_mean[l] + 0.2,
                            bench.initial_std[l],
                        )
                        .unwrap(),
                    )
                })
                .collect();
            MeasureEnsemble::new(measures).unwrap()
        };
        let rho2 = EnsembleFlow::frozen(times, shifted).unwrap();
        let ratio = estimate_contraction(&problem, &mu0, &rho1, &rho2, &grids).unwrap();
        assert!(ratio.abs() < 1e-12, "ratio {ratio}");
        assert!(estimate_contraction(&problem, &mu0, &rho1, &rho1, &grids).is_err());
    }

    #[test]
    fn single_window_split_equals_flat_solve() {
        let bench = LqBenchmark::<f64>::standard(2, 0.2).unwrap();
        let (problem, mu0, grids) = setup(&bench, 101, 81);
        let mut config = FixedPointConfig::new(1e-7, 40, 0.5).unwrap();
        config.delta0_hint = Some(1.0); // wider than the horizon
        let flat = solve_equilibrium(&problem, &mu0, &grids, &config).unwrap();
        let split = solve_split_horizon(&problem, &mu0, &grids, &config).unwrap();
        assert_eq!(flat.rho_star, split.rho_star);
        assert_eq!(flat.report.residuals, split.report.residuals);
    }

    #[test]
    fn two_window_split_of_decoupled_problem_matches_flat() {
        let bench = LqBenchmark::<f64>::decoupled(2, 0.2).unwrap();
        let (problem, mu0, grids) = setup(&bench, 101, 81);
        let mut config = FixedPointConfig::new(1e-9, 40, 1.0).unwrap();
        let flat = solve_equilibrium(&problem, &mu0, &grids, &config).unwrap();
        config.delta0_hint = Some(0.1);
        let split = solve_split_horizon(&problem, &mu0, &grids, &config).unwrap();
        let d = flow_distance(&flat.rho_star, &split.rho_star, 1).unwrap();
        assert!(d < 1e-10, "flat vs split distance {d}");
    }

    #[test]
    fn grid_interp_matches_nodes() {
        let g = StateGrid::<f64>::new(0.0, 1.0, 5).unwrap();
        let vals = vec![1.0, 3.0, 2.0, 5.0, 4.0];
        assert_eq!(interp_grid(&g, &vals, 0.25), 3.0);
        assert!((interp_grid(&g, &vals, 0.375) - 2.5).abs() < 1e-12);
        assert_eq!(interp_grid(&g, &vals, -1.0), 1.0);
        assert_eq!(interp_grid(&g, &vals, 2.0), 4.0);
    }
}
