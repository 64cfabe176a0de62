//! Monte-Carlo engine for the finite N-player game on K type nodes:
//! lifting the mean-field feedback to a step strategy, Euler-Maruyama path
//! simulation under the empirical ensemble coupling, propagation-of-chaos
//! statistics, and exploitability estimation.
//!
//! Every random draw is a pure function of `(seed, replication, player,
//! step)` through the counter-based generator, so all statistics are
//! bit-identical across runs and worker counts.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium::EquilibriumSolution;
use crate::error::{HmfgError, Result};
use crate::hjb_fp::{solve_hjb, ValueField};
use crate::metric::{ensemble_distance, wasserstein_p, EmpiricalMeasure, Measure, MeasureEnsemble};
use crate::model::problem::HmfgProblem;
use crate::rng::{mix_key, normal_u64, uniform_u64};
use crate::scalar::Scalar;

/// Stream labels for the independent random substreams.
const LABEL_INCREMENTS: u64 = 0x494e_4352;
const LABEL_INITIAL: u64 = 0x5830_4452;

/// Finite-game simulation parameters.
#[derive(Debug, Clone, Serialize)]
pub struct NPlayerConfig<S> {
    pub n: usize,
    pub k: usize,
    pub cluster_sizes: Vec<usize>,
    pub dt: S,
    pub n_paths: usize,
    pub seed: u64,
}

impl<S: Scalar> NPlayerConfig<S> {
    pub fn new(cluster_sizes: Vec<usize>, dt: S, n_paths: usize, seed: u64) -> Result<Self> {
        let k = cluster_sizes.len();
        if k == 0 {
            return Err(HmfgError::config("need at least one cluster"));
        }
        let n: usize = cluster_sizes.iter().sum();
        if cluster_sizes.iter().any(|&c| c == 0) {
            return Err(HmfgError::config("cluster sizes must be positive"));
        }
        if !(dt > S::zero()) {
            return Err(HmfgError::config("dt must be positive"));
        }
        if n_paths == 0 {
            return Err(HmfgError::config("n_paths must be positive"));
        }
        Ok(NPlayerConfig { n, k, cluster_sizes, dt, n_paths, seed })
    }

    /// Equal clusters of size `per_cluster` across `k` types.
    pub fn uniform(k: usize, per_cluster: usize, dt: S, n_paths: usize, seed: u64) -> Result<Self> {
        NPlayerConfig::new(vec![per_cluster; k], dt, n_paths, seed)
    }

    /// Smallest cluster size `n_{N,K}`.
    pub fn n_min(&self) -> usize {
        *self.cluster_sizes.iter().min().unwrap()
    }

    /// Type index of each player, cluster-major.
    pub fn player_types(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n);
        for (l, &c) in self.cluster_sizes.iter().enumerate() {
            out.extend(std::iter::repeat(l).take(c));
        }
        out
    }
}

/// A feedback policy `(t, x) -> action` for one player.
pub type PlayerPolicy<S> = Arc<dyn Fn(S, S) -> S + Send + Sync>;

/// Step-strategy lift: player `i` in cluster `l` plays the type-`l`
/// mean-field feedback evaluated on the stored equilibrium gradient.
pub fn lift_strategy<S: Scalar>(
    solution: &EquilibriumSolution<S>,
    config: &NPlayerConfig<S>,
) -> Result<Vec<PlayerPolicy<S>>> {
    if solution.n_types() != config.k {
        return Err(HmfgError::config(format!(
            "solution has {} types but config.k = {}",
            solution.n_types(),
            config.k
        )));
    }
    let per_type: Vec<PlayerPolicy<S>> = (0..config.k)
        .map(|l| type_policy(solution, l))
        .collect();
    Ok(config
        .player_types()
        .into_iter()
        .map(|l| per_type[l].clone())
        .collect())
}

/// Feedback policy of one type from a value field solved against `rho`:
/// `a*(t, x)` on the interpolated gradient, with the frozen-flow ensemble
/// argument resolved by nearest time node.
fn value_policy<S: Scalar>(
    problem: &HmfgProblem<S>,
    value: &ValueField<S>,
    rho: &crate::metric::EnsembleFlow<S>,
    l: usize,
) -> PlayerPolicy<S> {
    let problem = problem.clone();
    let value = value.clone();
    let rho = rho.clone();
    let theta = value.type_points[l];
    Arc::new(move |t: S, x: S| {
        let p = value.grad_at(l, t, x);
        let i = rho.nearest_index(t);
        (problem.feedback)(theta, t, x, p, rho.snapshot(i))
    })
}

fn type_policy<S: Scalar>(solution: &EquilibriumSolution<S>, l: usize) -> PlayerPolicy<S> {
    value_policy(&solution.problem, &solution.value, &solution.rho_star, l)
}

/// Simulated N-player trajectories and realized payoffs.
#[derive(Debug, Clone, Serialize)]
pub struct PathBundle<S> {
    pub times: Vec<S>,
    /// `states[i_t][player]`.
    pub states: Vec<Vec<S>>,
    pub player_types: Vec<usize>,
    /// Realized payoff of each player: running cost quadrature plus
    /// terminal cost.
    pub payoffs: Vec<S>,
    pub seed: u64,
}

impl<S: Scalar> PathBundle<S> {
    /// Empirical measure ensemble at time node `i_t`: per cluster, the
    /// uniform empirical law of its players.
    pub fn empirical_ensemble(&self, i_t: usize) -> Result<MeasureEnsemble<S>> {
        let states = &self.states[i_t];
        let k = self.player_types.iter().max().unwrap() + 1;
        let mut per_cluster: Vec<Vec<S>> = vec![Vec::new(); k];
        for (i, &l) in self.player_types.iter().enumerate() {
            per_cluster[l].push(states[i]);
        }
        MeasureEnsemble::new(
            per_cluster
                .into_iter()
                .map(|xs| EmpiricalMeasure::from_samples(xs).map(Measure::Empirical))
                .collect::<Result<Vec<_>>>()?,
        )
    }
}

/// Euler-Maruyama simulation of the N-player dynamics under the given
/// per-player policies. At every step the empirical ensemble is rebuilt
/// from the current states and passed to the coefficients.
pub fn simulate_nplayer<S: Scalar>(
    problem: &HmfgProblem<S>,
    policies: &[PlayerPolicy<S>],
    x0: &[S],
    config: &NPlayerConfig<S>,
) -> Result<PathBundle<S>> {
    if policies.len() != config.n || x0.len() != config.n {
        return Err(HmfgError::config(format!(
            "need {} policies and initial states, got {} / {}",
            config.n,
            policies.len(),
            x0.len()
        )));
    }
    if x0.iter().any(|x| !x.is_finite()) {
        return Err(HmfgError::validation("non-finite initial state"));
    }
    let horizon = problem.horizon;
    if config.dt > horizon / S::of(10.0) {
        return Err(HmfgError::config("dt must be at most horizon / 10"));
    }
    let steps_f = (horizon / config.dt).to64();
    let n_steps = steps_f.round() as usize;
    if (steps_f - n_steps as f64).abs() > 1e-9 * steps_f.max(1.0) {
        return Err(HmfgError::config("dt must divide the horizon evenly"));
    }
    let player_types = config.player_types();
    let type_points: Vec<S> = {
        let kk = S::from_usize(config.k).unwrap();
        (1..=config.k)
            .map(|l| S::from_usize(l).unwrap() / kk)
            .collect()
    };
    let sqrt_dt = config.dt.sqrt();

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x: Vec<S> = x0.to_vec();
    let mut payoffs = vec![S::zero(); config.n];
    times.push(S::zero());
    states.push(x.clone());

    for step in 0..n_steps {
        let t = config.dt * S::from_usize(step).unwrap();
        let phi = ensemble_from_states(&x, &player_types, config.k)?;
        let mut next = vec![S::zero(); config.n];
        for i in 0..config.n {
            let theta = type_points[player_types[i]];
            let a = (policies[i])(t, x[i]);
            let b = (problem.drift)(theta, t, x[i], &phi, a);
            let sigma = (problem.vol)(theta, t, x[i], &phi);
            payoffs[i] += (problem.running_cost)(theta, t, x[i], &phi, a) * config.dt;
            let key = mix_key(config.seed, &[LABEL_INCREMENTS, i as u64]);
            let dw = S::of(normal_u64(key, step as u64)) * sqrt_dt;
            let xi = x[i] + b * config.dt + sigma * dw;
            if !xi.is_finite() {
                return Err(HmfgError::solver(format!(
                    "non-finite state for player {i} at step {step}"
                )));
            }
            next[i] = xi;
        }
        x = next;
        times.push(config.dt * S::from_usize(step + 1).unwrap());
        states.push(x.clone());
    }

    let phi_t = ensemble_from_states(&x, &player_types, config.k)?;
    for i in 0..config.n {
        let theta = type_points[player_types[i]];
        payoffs[i] += (problem.terminal_cost)(theta, x[i], &phi_t);
    }

    Ok(PathBundle { times, states, player_types, payoffs, seed: config.seed })
}

fn ensemble_from_states<S: Scalar>(
    x: &[S],
    player_types: &[usize],
    k: usize,
) -> Result<MeasureEnsemble<S>> {
    let mut per_cluster: Vec<Vec<S>> = vec![Vec::new(); k];
    for (i, &l) in player_types.iter().enumerate() {
        per_cluster[l].push(x[i]);
    }
    MeasureEnsemble::new(
        per_cluster
            .into_iter()
            .map(|xs| EmpiricalMeasure::from_samples(xs).map(Measure::Empirical))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Draw i.i.d. initial states: player `i` in cluster `l` samples the
/// type-`l` marginal of `mu0` by inverse-CDF on a counter-based uniform.
pub fn draw_initial_states<S: Scalar>(
    mu0: &MeasureEnsemble<S>,
    config: &NPlayerConfig<S>,
    replication: u64,
) -> Result<Vec<S>> {
    let player_types = config.player_types();
    let key = mix_key(config.seed, &[LABEL_INITIAL, replication]);
    player_types
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let g = mu0.measure(l).as_grid().ok_or_else(|| {
                HmfgError::unsupported("initial draws need grid marginals")
            })?;
            let u = S::of(uniform_u64(key, i as u64));
            Ok(g.quantile(u))
        })
        .collect()
}

/// Propagation-of-chaos statistics over independent replications.
#[derive(Debug, Clone, Serialize)]
pub struct ChaosReport<S> {
    /// `sup_t` over time nodes of the replication mean of
    /// `d_1^2(phi^N_t, rho*_t)`.
    pub sup_t_e_d1_sq: S,
    pub ci_low: S,
    pub ci_high: S,
    /// Time at which the supremum is attained.
    pub argmax_time: S,
    /// Design-assumption discretization proxy `1/K`.
    pub rho_k_proxy: S,
    /// Replication mean of the initial-data term
    /// `(1/K) sum_l W_1^2(phi^N_0(l), mu0_l)`.
    pub delta_nk_initial: S,
    /// Cluster-size term `1/(K n_min^3)`.
    pub cluster_term: S,
    pub n: usize,
    pub k: usize,
    pub n_min: usize,
    pub replications: usize,
    pub seed: u64,
}

/// Chaos statistic of a set of replication bundles against the
/// equilibrium flow: exact empirical-vs-grid `W_1` per type, squared,
/// averaged over replications, sup over time nodes. The confidence
/// interval is a normal interval from the replication variance at the
/// maximizing time node.
pub fn chaos_statistic<S: Scalar>(
    bundles: &[PathBundle<S>],
    rho_star: &crate::metric::EnsembleFlow<S>,
    config: &NPlayerConfig<S>,
) -> Result<ChaosReport<S>> {
    if bundles.is_empty() {
        return Err(HmfgError::config("chaos statistic needs at least one bundle"));
    }
    let n_times = bundles[0].times.len();
    if bundles.iter().any(|b| b.times.len() != n_times) {
        return Err(HmfgError::validation("bundles disagree on the time grid"));
    }
    // per-replication d_1^2 paths, replications in parallel
    let d_sq: Vec<Vec<S>> = bundles
        .par_iter()
        .map(|b| -> Result<Vec<S>> {
            (0..n_times)
                .map(|i| {
                    let phi = b.empirical_ensemble(i)?;
                    let target = rho_star.snapshot_at(b.times[i])?;
                    let d = ensemble_distance(&phi, target, 1)?;
                    Ok(d * d)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let r = bundles.len();
    let rr = S::from_usize(r).unwrap();
    let mut best = (S::neg_infinity(), 0usize);
    for i in 0..n_times {
        let mean = d_sq.iter().map(|path| path[i]).sum::<S>() / rr;
        if mean > best.0 {
            best = (mean, i);
        }
    }
    let (sup, i_star) = best;
    let var = if r > 1 {
        d_sq
            .iter()
            .map(|path| {
                let d = path[i_star] - sup;
                d * d
            })
            .sum::<S>()
            / S::from_usize(r - 1).unwrap()
    } else {
        S::zero()
    };
    let half = S::of(1.96) * (var / rr).sqrt();

    // initial-data term of the chaos bound against rho* at time zero
    let mu0 = rho_star.snapshot(0);
    let kk = S::from_usize(config.k).unwrap();
    let delta0 = bundles
        .iter()
        .map(|b| -> Result<S> {
            let phi0 = b.empirical_ensemble(0)?;
            let mut acc = S::zero();
            for l in 0..config.k {
                let w = wasserstein_p(phi0.measure(l), mu0.measure(l), 1)?;
                acc += w * w;
            }
            Ok(acc / kk)
        })
        .sum::<Result<S>>()?
        / rr;

    let n_min = config.n_min();
    let cluster_term = S::one() / (kk * S::from_usize(n_min.pow(3)).unwrap());
    Ok(ChaosReport {
        sup_t_e_d1_sq: sup,
        ci_low: sup - half,
        ci_high: sup + half,
        argmax_time: bundles[0].times[i_star],
        rho_k_proxy: S::one() / kk,
        delta_nk_initial: delta0,
        cluster_term,
        n: config.n,
        k: config.k,
        n_min,
        replications: r,
        seed: config.seed,
    })
}

/// Simulate `config.n_paths` independent replications under the lifted
/// equilibrium strategy, initial states drawn from the equilibrium's
/// time-zero ensemble.
pub fn simulate_replications<S: Scalar>(
    solution: &EquilibriumSolution<S>,
    config: &NPlayerConfig<S>,
) -> Result<Vec<PathBundle<S>>> {
    let policies = lift_strategy(solution, config)?;
    let mu0 = solution.rho_star.snapshot(0).clone();
    (0..config.n_paths as u64)
        .into_par_iter()
        .map(|rep| {
            let rep_config = NPlayerConfig {
                seed: mix_key(config.seed, &[rep]),
                ..config.clone()
            };
            let x0 = draw_initial_states(&mu0, &rep_config, 0)?;
            simulate_nplayer(&solution.problem, &policies, &x0, &rep_config)
        })
        .collect()
}

/// Exploitability estimate for one deviating player.
#[derive(Debug, Clone, Serialize)]
pub struct ExploitabilityReport<S> {
    /// `max(0, j_dev - j_eq)`.
    pub eps_hat: S,
    pub j_eq: S,
    pub j_dev: S,
    /// Standard error of the paired difference `j_dev - j_eq`.
    pub diff_se: S,
    pub deviating_player: usize,
    pub replications: usize,
    pub seed: u64,
}

/// Monte-Carlo exploitability of the lifted equilibrium profile: the
/// deviation policy is the best response against the frozen `rho*`
/// (one fresh HJB solve for the deviator's type), re-simulated against
/// the others at equilibrium with common random numbers.
pub fn exploitability<S: Scalar>(
    problem: &HmfgProblem<S>,
    solution: &EquilibriumSolution<S>,
    config: &NPlayerConfig<S>,
    deviating_player: usize,
) -> Result<ExploitabilityReport<S>> {
    let l_dev = config
        .player_types()
        .get(deviating_player)
        .copied()
        .ok_or_else(|| HmfgError::config("deviating player index out of range"))?;
    let theta = solution.value.type_points[l_dev];
    let guard_bound = solution.report.guard.m;
    let (u_dev, _) = solve_hjb(
        problem,
        &solution.grids,
        theta,
        &solution.rho_star,
        guard_bound,
    )?;
    let dev_value = ValueField::new(solution.grids, vec![u_dev])?;
    let deviation = value_policy(problem, &dev_value, &solution.rho_star, 0);
    exploitability_with_policy(problem, solution, config, deviating_player, deviation)
}

/// Exploitability against an explicit deviation policy (exposed for the
/// equilibrium-vs-equilibrium identity test and diagnostics).
pub fn exploitability_with_policy<S: Scalar>(
    problem: &HmfgProblem<S>,
    solution: &EquilibriumSolution<S>,
    config: &NPlayerConfig<S>,
    deviating_player: usize,
    deviation: PlayerPolicy<S>,
) -> Result<ExploitabilityReport<S>> {
    if deviating_player >= config.n {
        return Err(HmfgError::config("deviating player index out of range"));
    }
    let policies_eq = lift_strategy(solution, config)?;
    let mut policies_dev = policies_eq.clone();
    policies_dev[deviating_player] = deviation;
    let mu0 = solution.rho_star.snapshot(0).clone();

    let diffs: Vec<(S, S)> = (0..config.n_paths as u64)
        .into_par_iter()
        .map(|rep| -> Result<(S, S)> {
            let rep_config = NPlayerConfig {
                seed: mix_key(config.seed, &[rep]),
                ..config.clone()
            };
            let x0 = draw_initial_states(&mu0, &rep_config, 0)?;
            // common random numbers: both runs share rep_config.seed
            let eq = simulate_nplayer(problem, &policies_eq, &x0, &rep_config)?;
            let dev = simulate_nplayer(problem, &policies_dev, &x0, &rep_config)?;
            Ok((eq.payoffs[deviating_player], dev.payoffs[deviating_player]))
        })
        .collect::<Result<Vec<_>>>()?;

    let r = diffs.len();
    let rr = S::from_usize(r).unwrap();
    let j_eq = diffs.iter().map(|&(e, _)| e).sum::<S>() / rr;
    let j_dev = diffs.iter().map(|&(_, d)| d).sum::<S>() / rr;
    let mean_diff = j_dev - j_eq;
    let var = if r > 1 {
        diffs
            .iter()
            .map(|&(e, d)| {
                let x = (d - e) - mean_diff;
                x * x
            })
            .sum::<S>()
            / S::from_usize(r - 1).unwrap()
    } else {
        S::zero()
    };
    Ok(ExploitabilityReport {
        eps_hat: mean_diff.max(S::zero()),
        j_eq,
        j_dev,
        diff_se: (var / rr).sqrt(),
        deviating_player,
        replications: r,
        seed: config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_equilibrium, FixedPointConfig};
    use crate::hjb_fp::SolveGrids;
    use crate::metric::{EnsembleFlow, GridMeasure, TimeGrid};
    use crate::model::lq::LqBenchmark;

    fn const_problem(b: f64, sigma: f64) -> HmfgProblem<f64> {
        HmfgProblem {
            drift: Arc::new(move |_, _, _, _, _| b),
            vol: Arc::new(move |_, _, _, _| sigma),
            running_cost: Arc::new(|_, _, _, _, _| 0.0),
            terminal_cost: Arc::new(|_, x, _| x),
            hamiltonian: Arc::new(move |_, _, _, p, _| b * p),
            hamiltonian_grad: Arc::new(move |_, _, _, _, _| b),
            feedback: Arc::new(|_, _, _, _, _| 0.0),
            action_bounds: (-1.0, 1.0),
            lipschitz: 2.0,
            horizon: 1.0,
        }
    }

    fn zero_policies(n: usize) -> Vec<PlayerPolicy<f64>> {
        (0..n).map(|_| Arc::new(|_, _| 0.0) as PlayerPolicy<f64>).collect()
    }

    #[test]
    fn deterministic_drift_is_exact() {
        let problem = const_problem(1.0, 0.0);
        let config = NPlayerConfig::uniform(2, 3, 0.05, 1, 7).unwrap();
        let x0 = vec![0.0; 6];
        let bundle = simulate_nplayer(&problem, &zero_policies(6), &x0, &config).unwrap();
        for (i, &t) in bundle.times.iter().enumerate() {
            for p in 0..6 {
                assert!((bundle.states[i][p] - t).abs() < 1e-12);
            }
        }
        // payoff = terminal cost x_T = 1
        for p in 0..6 {
            assert!((bundle.payoffs[p] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_brownian_variance_matches_t() {
        let problem = const_problem(0.0, 1.0);
        let config = NPlayerConfig::uniform(1, 500, 0.01, 1, 42).unwrap();
        let x0 = vec![0.0; 500];
        let bundle = simulate_nplayer(&problem, &zero_policies(500), &x0, &config).unwrap();
        let last = bundle.states.last().unwrap();
        let mean: f64 = last.iter().sum::<f64>() / 500.0;
        let var: f64 = last.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 499.0;
        // Var(sample variance) ~ 2 T^2 / n -> se ~ 0.063
        assert!((var - 1.0).abs() < 3.0 * 0.0633, "var {var}");
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let problem = const_problem(0.3, 0.8);
        let config = NPlayerConfig::uniform(2, 10, 0.02, 1, 99).unwrap();
        let x0: Vec<f64> = (0..20).map(|i| -1.0 + 0.1 * i as f64).collect();
        let a = simulate_nplayer(&problem, &zero_policies(20), &x0, &config).unwrap();
        let b = simulate_nplayer(&problem, &zero_policies(20), &x0, &config).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.payoffs, b.payoffs);
    }

    #[test]
    fn config_validation_and_assignment() {
        assert!(NPlayerConfig::<f64>::new(vec![], 0.01, 1, 0).is_err());
        assert!(NPlayerConfig::<f64>::new(vec![2, 0], 0.01, 1, 0).is_err());
        let c = NPlayerConfig::<f64>::new(vec![2, 3, 1], 0.01, 4, 0).unwrap();
        assert_eq!(c.n, 6);
        assert_eq!(c.n_min(), 1);
        assert_eq!(c.player_types(), vec![0, 0, 1, 1, 1, 2]);
    }

    fn small_solution() -> (HmfgProblem<f64>, EquilibriumSolution<f64>) {
        let bench = LqBenchmark::<f64>::decoupled(2, 0.2).unwrap();
        let state = bench.default_grid(101).unwrap();
        let grids = SolveGrids::new(state, TimeGrid::new(0.0, 0.2, 81).unwrap());
        let problem = bench.problem(state.x_max.abs().max(state.x_min.abs())).unwrap();
        let mu0 = bench.initial_ensemble(state).unwrap();
        let config = FixedPointConfig::new(1e-10, 10, 1.0).unwrap();
        let sol = solve_equilibrium(&problem, &mu0, &grids, &config).unwrap();
        (problem, sol)
    }

    #[test]
    fn lift_matches_cluster_table() {
        let (_, sol) = small_solution();
        let config = NPlayerConfig::new(vec![3, 2], 0.01, 1, 5).unwrap();
        let policies = lift_strategy(&sol, &config).unwrap();
        assert_eq!(policies.len(), 5);
        // players 0-2 share type 0's policy, players 3-4 type 1's
        let t = 0.1;
        let x = 0.2;
        assert_eq!(policies[0](t, x), policies[2](t, x));
        assert_eq!(policies[3](t, x), policies[4](t, x));
        let p0 = sol.value.grad_at(0, t, x);
        assert_eq!(policies[0](t, x), p0.clamp(-6.0, 6.0));
    }

    #[test]
    fn chaos_statistic_small_for_stratified_samples() {
        // per-type stratified quantile atoms approximate the grid marginal
        // with O(1/n) W1 error, so the squared statistic is tiny.
        let (_, sol) = small_solution();
        let n_atoms = 800;
        let config = NPlayerConfig::uniform(2, n_atoms, 0.02, 1, 3).unwrap();
        let times: Vec<f64> = vec![0.0, 0.1, 0.2];
        let states: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| {
                let snap = sol.rho_star.snapshot_at(t).unwrap();
                let mut row = Vec::new();
                for l in 0..2 {
                    let g = snap.measure(l).as_grid().unwrap();
                    for i in 0..n_atoms {
                        row.push(g.quantile((i as f64 + 0.5) / n_atoms as f64));
                    }
                }
                row
            })
            .collect();
        let bundle = PathBundle {
            times,
            states,
            player_types: config.player_types(),
            payoffs: vec![0.0; config.n],
            seed: 3,
        };
        let report = chaos_statistic(&[bundle], &sol.rho_star, &config).unwrap();
        assert!(report.sup_t_e_d1_sq < 1e-4, "stat {}", report.sup_t_e_d1_sq);
    }

    #[test]
    fn equilibrium_vs_equilibrium_exploitability_is_zero() {
        let (problem, sol) = small_solution();
        let config = NPlayerConfig::uniform(2, 5, 0.02, 4, 11).unwrap();
        let deviation = type_policy(&sol, 0);
        let report =
            exploitability_with_policy(&problem, &sol, &config, 0, deviation).unwrap();
        assert_eq!(report.j_eq, report.j_dev);
        assert_eq!(report.eps_hat, 0.0);
        assert_eq!(report.diff_se, 0.0);
    }

    #[test]
    fn decoupled_exploitability_ci_contains_zero() {
        let (problem, sol) = small_solution();
        let config = NPlayerConfig::uniform(2, 8, 0.01, 24, 17).unwrap();
        let report = exploitability(&problem, &sol, &config, 0).unwrap();
        let diff = report.j_dev - report.j_eq;
        // discretization slack: the fresh HJB deviation equals the stored
        // equilibrium policy up to solver tolerance
        assert!(
            diff.abs() <= 3.0 * report.diff_se + 1e-3,
            "diff {diff}, se {}",
            report.diff_se
        );
    }

    #[test]
    fn replications_are_deterministic() {
        let (_, sol) = small_solution();
        let config = NPlayerConfig::uniform(2, 6, 0.02, 3, 23).unwrap();
        let a = simulate_replications(&sol, &config).unwrap();
        let b = simulate_replications(&sol, &config).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.states, y.states);
        }
        // distinct replications genuinely differ
        assert_ne!(a[0].states, a[1].states);
    }

    #[test]
    fn chaos_decreases_with_n_for_iid_clouds() {
        // i.i.d. draws from the equilibrium marginals: the statistic must
        // drop when the cluster size grows fourfold.
        let (_, sol) = small_solution();
        let mut stats = Vec::new();
        for &per in &[25usize, 100, 400] {
            let config = NPlayerConfig::uniform(2, per, 0.02, 6, 31).unwrap();
            let mu0 = sol.rho_star.snapshot(0).clone();
            let bundles: Vec<PathBundle<f64>> = (0..6u64)
                .map(|rep| {
                    let x0 = draw_initial_states(&mu0, &config, rep).unwrap();
                    PathBundle {
                        times: vec![0.0],
                        states: vec![x0],
                        player_types: config.player_types(),
                        payoffs: vec![0.0; config.n],
                        seed: config.seed,
                    }
                })
                .collect();
            let rho0 = EnsembleFlow::new(vec![0.0], vec![mu0]).unwrap();
            let report = chaos_statistic(&bundles, &rho0, &config).unwrap();
            stats.push(report.sup_t_e_d1_sq);
        }
        assert!(stats[0] > stats[1] && stats[1] > stats[2], "{stats:?}");
    }

    #[test]
    fn initial_draws_match_marginal_mean() {
        let state = crate::metric::StateGrid::new(-4.0, 4.0, 401).unwrap();
        let g = GridMeasure::gaussian(state, 0.7, 0.5).unwrap();
        let mu0 = MeasureEnsemble::new(vec![Measure::Grid(g)]).unwrap();
        let config = NPlayerConfig::uniform(1, 4000, 0.01, 1, 77).unwrap();
        let draws = draw_initial_states(&mu0, &config, 0).unwrap();
        let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.7).abs() < 0.03, "mean {mean}");
    }
}
