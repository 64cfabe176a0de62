//! Calculus on measure ensembles: linear functional derivatives for a
//! closed-form test-functional family, Monte-Carlo verification of the
//! ensemble Ito formula, a decoupling-field (BSDE) residual check on
//! simulated paths, and a master-equation residual check on the
//! linear-quadratic benchmark.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium::EquilibriumSolution;
use crate::error::{HmfgError, Result};
use crate::metric::MeasureEnsemble;
use crate::model::lq::LqBenchmark;
use crate::model::problem::HmfgProblem;
use crate::model::riccati::{mean_sensitivities, riccati_a, riccati_from, riccati_oracle, RiccatiSolution};
use crate::rng::{mix_key, normal_u64, uniform_u64};
use crate::scalar::Scalar;

const LABEL_ITO_INIT: u64 = 0x4954_4f30;
const LABEL_ITO_NOISE: u64 = 0x4954_4f57;
const LABEL_BSDE_INIT: u64 = 0x4253_4430;
const LABEL_BSDE_NOISE: u64 = 0x4253_4457;

/// Scalar field over `(theta, t, x)`.
pub type TypeField<S> = Arc<dyn Fn(S, S, S) -> S + Send + Sync>;

type ScalarFn<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

/// Test functional `f(mu) = h((1/K) sum_l psi-average under mu_l times
/// b_w(theta_l))`, with all derivatives supplied analytically. Its linear
/// functional derivative is `h'(aggregate) psi(x) b_w(theta)`.
#[derive(Clone)]
pub struct TestFunctional<S> {
    pub h: ScalarFn<S>,
    pub h_prime: ScalarFn<S>,
    pub psi: ScalarFn<S>,
    pub psi_prime: ScalarFn<S>,
    pub psi_second: ScalarFn<S>,
    pub b_w: ScalarFn<S>,
}

impl<S: Scalar> TestFunctional<S> {
    /// K-average of the per-type means.
    pub fn mean_functional() -> Self {
        TestFunctional {
            h: Arc::new(|y| y),
            h_prime: Arc::new(|_| S::one()),
            psi: Arc::new(|x| x),
            psi_prime: Arc::new(|_| S::one()),
            psi_second: Arc::new(|_| S::zero()),
            b_w: Arc::new(|_| S::one()),
        }
    }

    /// K-average of the per-type second moments.
    pub fn second_moment() -> Self {
        TestFunctional {
            h: Arc::new(|y| y),
            h_prime: Arc::new(|_| S::one()),
            psi: Arc::new(|x| x * x),
            psi_prime: Arc::new(|x| S::of(2.0) * x),
            psi_second: Arc::new(|_| S::of(2.0)),
            b_w: Arc::new(|_| S::one()),
        }
    }

    /// Nonlinear outer function with heterogeneous type weight:
    /// `h(y) = y^2`, `psi(x) = x`, `b_w(theta) = theta`.
    pub fn squared_weighted_mean() -> Self {
        TestFunctional {
            h: Arc::new(|y| y * y),
            h_prime: Arc::new(|y| S::of(2.0) * y),
            psi: Arc::new(|x| x),
            psi_prime: Arc::new(|_| S::one()),
            psi_second: Arc::new(|_| S::zero()),
            b_w: Arc::new(|t| t),
        }
    }

    /// Inner aggregate `(1/K) sum_l b_w(theta_l) E_{mu_l}[psi]`.
    pub fn aggregate(&self, mu: &MeasureEnsemble<S>) -> S {
        let k = S::from_usize(mu.n_types()).unwrap();
        mu.measures()
            .iter()
            .zip(mu.type_points())
            .map(|(m, &theta)| (self.b_w)(theta) * m.expect(|x| (self.psi)(x)))
            .sum::<S>()
            / k
    }

    pub fn evaluate(&self, mu: &MeasureEnsemble<S>) -> S {
        (self.h)(self.aggregate(mu))
    }

    /// Aggregate over particle clouds, one cloud per type point.
    pub fn aggregate_cloud(&self, clouds: &[Vec<S>], type_points: &[S]) -> S {
        let k = S::from_usize(clouds.len()).unwrap();
        clouds
            .iter()
            .zip(type_points)
            .map(|(cloud, &theta)| {
                let m = S::from_usize(cloud.len()).unwrap();
                (self.b_w)(theta) * cloud.iter().map(|&x| (self.psi)(x)).sum::<S>() / m
            })
            .sum::<S>()
            / k
    }
}

/// Closed-form linear functional derivative of the test-functional family
/// at `(mu, x, theta)`: `h'(aggregate(mu)) psi(x) b_w(theta)`.
pub fn linear_functional_derivative<S: Scalar>(
    tf: &TestFunctional<S>,
    mu: &MeasureEnsemble<S>,
    x: S,
    theta: S,
) -> S {
    (tf.h_prime)(tf.aggregate(mu)) * (tf.psi)(x) * (tf.b_w)(theta)
}

/// Both sides of the measure-flow chain rule, estimated on one particle
/// system.
#[derive(Debug, Clone, Serialize)]
pub struct FlowDerivativeReport<S> {
    /// `f(mu_T) - f(mu_0)` on the empirical clouds.
    pub lhs: S,
    /// Time quadrature of the drift and second-order diffusion terms.
    pub rhs: S,
    pub abs_err: S,
    pub rel_err: S,
    pub particles: usize,
    pub dt: S,
    pub horizon: S,
    pub seed: u64,
}

/// Monte-Carlo parameters for `ito_check`.
#[derive(Debug, Clone, Serialize)]
pub struct ItoParams<S> {
    pub horizon: S,
    pub dt: S,
    pub n_types: usize,
    pub m_per_type: usize,
    pub seed: u64,
}

impl<S: Scalar> ItoParams<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > S::zero() && self.dt > S::zero()) {
            return Err(HmfgError::config("horizon and dt must be positive"));
        }
        if self.n_types == 0 || self.m_per_type == 0 {
            return Err(HmfgError::config("need at least one type and one particle"));
        }
        let steps = (self.horizon / self.dt).to64();
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(HmfgError::config("dt must divide the horizon evenly"));
        }
        Ok(())
    }
}

/// Verify the measure-flow chain rule on independent per-type particle
/// clouds driven by `x' = b(theta, t, x) dt + sigma(theta, t, x) dB`:
/// the change of `f` along the flow against the time quadrature of
/// `E[d_x (df/dmu) b] + (1/2) E[d_xx (df/dmu) sigma^2]`, both evaluated
/// on the same clouds.
pub fn ito_check<S: Scalar>(
    tf: &TestFunctional<S>,
    drift: &TypeField<S>,
    vol: &TypeField<S>,
    mu0: &MeasureEnsemble<S>,
    params: &ItoParams<S>,
) -> Result<FlowDerivativeReport<S>> {
    params.validate()?;
    if mu0.n_types() != params.n_types {
        return Err(HmfgError::config("mu0 type count must match params.n_types"));
    }
    let k = params.n_types;
    let m = params.m_per_type;
    let n_steps = (params.horizon / params.dt).to64().round() as usize;
    let type_points: Vec<S> = mu0.type_points().to_vec();
    let sqrt_dt = params.dt.sqrt();

    // initial clouds by inverse CDF on counter-based uniforms
    let mut clouds: Vec<Vec<S>> = (0..k)
        .map(|l| -> Result<Vec<S>> {
            let g = mu0.measure(l).as_grid().ok_or_else(|| {
                HmfgError::unsupported("ito_check needs grid initial marginals")
            })?;
            let key = mix_key(params.seed, &[LABEL_ITO_INIT, l as u64]);
            Ok((0..m).map(|p| g.quantile(S::of(uniform_u64(key, p as u64)))).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let f0 = (tf.h)(tf.aggregate_cloud(&clouds, &type_points));
    let kk = S::from_usize(k).unwrap();
    let mm = S::from_usize(m).unwrap();
    let mut rhs = S::zero();
    for step in 0..n_steps {
        let t = params.dt * S::from_usize(step).unwrap();
        let agg = tf.aggregate_cloud(&clouds, &type_points);
        let hp = (tf.h_prime)(agg);
        // per-type expectation of the first- and second-order terms, and
        // the Euler update, fused over the cloud
        let contributions: Vec<(S, Vec<S>)> = clouds
            .par_iter()
            .enumerate()
            .map(|(l, cloud)| -> Result<(S, Vec<S>)> {
                let theta = type_points[l];
                let key = mix_key(params.seed, &[LABEL_ITO_NOISE, l as u64]);
                let half = S::of(0.5);
                let mut acc = S::zero();
                let mut next = Vec::with_capacity(cloud.len());
                for (p, &x) in cloud.iter().enumerate() {
                    let b = drift(theta, t, x);
                    let s = vol(theta, t, x);
                    acc += (tf.psi_prime)(x) * b + half * (tf.psi_second)(x) * s * s;
                    let ctr = (p * n_steps + step) as u64;
                    let dw = S::of(normal_u64(key, ctr)) * sqrt_dt;
                    let xn = x + b * params.dt + s * dw;
                    if !xn.is_finite() {
                        return Err(HmfgError::solver(format!(
                            "non-finite particle in type {l} at step {step}"
                        )));
                    }
                    next.push(xn);
                }
                Ok(((tf.b_w)(theta) * acc / mm, next))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut term = S::zero();
        for (l, (c, next)) in contributions.into_iter().enumerate() {
            term += c;
            clouds[l] = next;
        }
        rhs += params.dt * hp * term / kk;
    }
    let f1 = (tf.h)(tf.aggregate_cloud(&clouds, &type_points));

    let lhs = f1 - f0;
    let abs_err = (lhs - rhs).abs();
    let scale = lhs.abs().max(rhs.abs()).max(S::of(1e-12));
    Ok(FlowDerivativeReport {
        lhs,
        rhs,
        abs_err,
        rel_err: abs_err / scale,
        particles: k * m,
        dt: params.dt,
        horizon: params.horizon,
        seed: params.seed,
    })
}

/// Residuals of the discrete backward-equation identity along simulated
/// forward paths.
#[derive(Debug, Clone, Serialize)]
pub struct DecouplingReport<S> {
    /// Max over time steps of `|E[Y_s - Y_{s+dt} - Fhat dt]| / dt`,
    /// estimated with the martingale increments projected out.
    pub drift_residual: S,
    /// Max over time steps of the root-mean-square of
    /// `(Y_s - Y_{s+dt} - Fhat dt + Z dB) / sqrt(dt)`.
    pub martingale_residual: S,
    /// Max over particles of `|Y_T - G(theta, X_T, rho_T)|`.
    pub terminal_error: S,
    pub particles: usize,
    pub dt: S,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecouplingParams<S> {
    pub dt: S,
    pub m_per_type: usize,
    pub seed: u64,
}

/// Check that `(Y, Z) = (u_theta(s, X_s), sigma d_x u_theta(s, X_s))`
/// satisfies the discrete backward identity
/// `Y_s - Y_{s+dt} = Fhat(theta, s, X_s, Z_s, rho_s) dt - Z_s dB_s`
/// with `Fhat(z) = H(theta, s, x, z / sigma, rho) - a*(z / sigma) z / sigma`
/// along forward equilibrium paths. With `oracle` given, `Y`, `Z` and the
/// second derivative come from the quadratic closed form instead of the
/// interpolated numerical field, which isolates the O(dt) time
/// discretization of the identity.
pub fn decoupling_residual<S: Scalar>(
    problem: &HmfgProblem<S>,
    solution: &EquilibriumSolution<S>,
    params: &DecouplingParams<S>,
    oracle: Option<&RiccatiSolution<S>>,
) -> Result<DecouplingReport<S>> {
    if !(params.dt > S::zero()) || params.m_per_type == 0 {
        return Err(HmfgError::config("dt and m_per_type must be positive"));
    }
    let horizon = problem.horizon;
    let steps_f = (horizon / params.dt).to64();
    let n_steps = steps_f.round() as usize;
    if (steps_f - n_steps as f64).abs() > 1e-9 * steps_f.max(1.0) || n_steps == 0 {
        return Err(HmfgError::config("dt must divide the horizon evenly"));
    }
    let k = solution.n_types();
    let m = params.m_per_type;
    let type_points = solution.value.type_points.clone();
    let dx = solution.grids.state.dx;
    let sqrt_dt = params.dt.sqrt();

    // Y, Z / sigma (the value gradient), and the gradient's x-derivative
    let val = |l: usize, t: S, x: S| -> S {
        match oracle {
            Some(o) => o.value_on(l, t, x),
            None => solution.value.value_at(l, t, x),
        }
    };
    let grad = |l: usize, t: S, x: S| -> S {
        match oracle {
            Some(o) => o.feedback_on(l, t, x),
            None => solution.value.grad_at(l, t, x),
        }
    };
    let gamma = |l: usize, t: S, x: S| -> S {
        match oracle {
            Some(o) => riccati_a(o.bench.cost_weight[l], o.bench.horizon, t),
            None => {
                (solution.value.grad_at(l, t, x + dx) - solution.value.grad_at(l, t, x - dx))
                    / (S::of(2.0) * dx)
            }
        }
    };

    // ensemble seen by the coefficients at each step time: the oracle's
    // exact Gaussian flow when available (so the identity is probed at
    // the closed form's own consistency), else the nearest stored
    // snapshot of the numerical equilibrium flow
    let rho = &solution.rho_star;
    let snapshots: Vec<std::borrow::Cow<'_, MeasureEnsemble<S>>> = (0..=n_steps)
        .map(|s| -> Result<_> {
            let t = params.dt * S::from_usize(s).unwrap();
            match oracle {
                Some(o) => Ok(std::borrow::Cow::Owned(
                    o.ensemble_at(solution.grids.state, t)?,
                )),
                None => Ok(std::borrow::Cow::Borrowed(rho.snapshot(rho.nearest_index(t)))),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let per_type: Vec<(S, S, S)> = (0..k)
        .into_par_iter()
        .map(|l| -> Result<(S, S, S)> {
            let theta = type_points[l];
            let g0 = rho.snapshot(0).measure(l).as_grid().ok_or_else(|| {
                HmfgError::unsupported("decoupling check needs grid marginals at t = 0")
            })?;
            let init_key = mix_key(params.seed, &[LABEL_BSDE_INIT, l as u64]);
            let noise_key = mix_key(params.seed, &[LABEL_BSDE_NOISE, l as u64]);
            let mut x: Vec<S> =
                (0..m).map(|p| g0.quantile(S::of(uniform_u64(init_key, p as u64)))).collect();
            let mm = S::from_usize(m).unwrap();
            let half = S::of(0.5);
            let mut drift_res = S::zero();
            let mut mart_res = S::zero();
            for step in 0..n_steps {
                let t = params.dt * S::from_usize(step).unwrap();
                let t_next = params.dt * S::from_usize(step + 1).unwrap();
                let mu: &MeasureEnsemble<S> = &snapshots[step];
                let mut mean_r = S::zero();
                let mut mean_sq = S::zero();
                for p in 0..m {
                    let xp = x[p];
                    let pgrad = grad(l, t, xp);
                    let a = (problem.feedback)(theta, t, xp, pgrad, mu);
                    let b = (problem.drift)(theta, t, xp, mu, a);
                    let sigma = (problem.vol)(theta, t, xp, mu);
                    let z = sigma * pgrad;
                    let fhat =
                        (problem.hamiltonian)(theta, t, xp, pgrad, mu) - a * pgrad;
                    let ctr = (p * n_steps + step) as u64;
                    let db = S::of(normal_u64(noise_key, ctr)) * sqrt_dt;
                    let xn = xp + b * params.dt + sigma * db;
                    if !xn.is_finite() {
                        return Err(HmfgError::solver(format!(
                            "non-finite path in type {l} at step {step}"
                        )));
                    }
                    let incr = val(l, t, xp) - val(l, t_next, xn) - fhat * params.dt;
                    // project out the span of {dB, dB^2 - dt} with
                    // predictable coefficients chosen so the projection
                    // is exact for values quadratic in x
                    let g_next = gamma(l, t_next, xp);
                    let c1 = sigma * grad(l, t_next, xp) + g_next * sigma * b * params.dt;
                    let c2 = half * g_next * sigma * sigma;
                    let corrected = incr + c1 * db + c2 * (db * db - params.dt);
                    mean_r += corrected;
                    let mart = incr + z * db;
                    mean_sq += mart * mart;
                    x[p] = xn;
                }
                drift_res = drift_res.max((mean_r / mm).abs() / params.dt);
                mart_res = mart_res.max((mean_sq / mm).sqrt() / sqrt_dt);
            }
            let mu_t: &MeasureEnsemble<S> = &snapshots[n_steps];
            let mut term_err = S::zero();
            for p in 0..m {
                let diff = val(l, horizon, x[p]) - (problem.terminal_cost)(theta, x[p], mu_t);
                term_err = term_err.max(diff.abs());
            }
            Ok((drift_res, mart_res, term_err))
        })
        .collect::<Result<Vec<_>>>()?;

    let fold = |f: fn(&(S, S, S)) -> S| per_type.iter().map(f).fold(S::zero(), S::max);
    Ok(DecouplingReport {
        drift_residual: fold(|r| r.0),
        martingale_residual: fold(|r| r.1),
        terminal_error: fold(|r| r.2),
        particles: k * m,
        dt: params.dt,
        seed: params.seed,
    })
}

/// One sampled evaluation point of the master-equation residual.
#[derive(Debug, Clone, Serialize)]
pub struct MasterSample<S> {
    pub theta: S,
    pub t: S,
    pub x: S,
    /// Residual with the mean-derivative terms from the linearized
    /// sensitivity system.
    pub residual_analytic: S,
    /// Residual with finite-difference mean derivatives.
    pub residual_fd: S,
}

#[derive(Debug, Clone, Serialize)]
pub struct MasterReport<S> {
    pub samples: Vec<MasterSample<S>>,
    pub max_abs_analytic: S,
    pub max_abs_fd: S,
}

#[derive(Debug, Clone, Serialize)]
pub struct MasterParams<S> {
    /// Time steps for each Riccati sub-solve.
    pub n_t: usize,
    /// Fractions of the horizon at which to place `t` samples (all must
    /// leave room for the centered time stencil).
    pub t_fractions: Vec<S>,
    /// State-space sample points.
    pub xs: Vec<S>,
    /// Deterministic perturbation applied to the equilibrium means so the
    /// residual is probed off the equilibrium path.
    pub mean_jitter: S,
    /// Central-difference step for the finite-difference mean-derivative
    /// route.
    pub fd_step: S,
    /// Step of the five-point time stencil for the partial t-derivative.
    pub t_step: S,
}

impl<S: Scalar> MasterParams<S> {
    pub fn standard() -> Self {
        MasterParams {
            n_t: 2000,
            t_fractions: vec![S::of(0.15), S::of(0.45), S::of(0.75)],
            xs: vec![S::of(-1.4), S::of(0.3), S::of(1.1)],
            mean_jitter: S::of(0.12),
            fd_step: S::of(1e-5),
            t_step: S::of(1e-3),
        }
    }
}

/// Evaluate the five master-equation terms for the LQ benchmark at
/// sampled `(theta, t, x, ensemble)` points, where the value surface
/// `V(theta, t, x, rho)` is quadratic in `x` with coefficients determined
/// by `(t, per-type means of rho)` through the Riccati system. The
/// ensemble-derivative terms reduce to derivatives with respect to the K
/// type means; both an analytic (linearized sensitivity system) and a
/// finite-difference route are reported.
pub fn master_residual_lq<S: Scalar>(
    bench: &LqBenchmark<S>,
    params: &MasterParams<S>,
) -> Result<MasterReport<S>> {
    let k = bench.n_types();
    let t1 = bench.horizon;
    let kk = S::from_usize(k).unwrap();
    let base = riccati_oracle(bench, params.n_t)?;
    let delta = params.t_step;
    let mut samples = Vec::new();

    for &frac in &params.t_fractions {
        let t0 = frac * t1;
        if t0 - S::of(2.0) * delta < S::zero() || t0 + S::of(2.0) * delta >= t1 {
            return Err(HmfgError::config("t sample too close to the horizon ends"));
        }
        // off-equilibrium ensemble state: jittered type means
        let means: Vec<S> = (0..k)
            .map(|j| {
                let sign = if j % 2 == 0 { S::one() } else { -S::one() };
                base.mean_on(j, t0)
                    + params.mean_jitter * sign * (S::one() + S::from_usize(j).unwrap() / kk)
            })
            .collect();
        let vars: Vec<S> = (0..k).map(|j| base.variance_on(j, t0)).collect();
        let mbar = means.iter().copied().sum::<S>() / kk;

        let sol = riccati_from(bench, t0, &means, &vars, params.n_t)?;
        let sens = mean_sensitivities(&sol)?;

        // five-point stencil in the start time for the partial
        // t-derivative of (B, C) with the means held fixed
        let stencil: Vec<RiccatiSolution<S>> = [-2.0f64, -1.0, 1.0, 2.0]
            .iter()
            .map(|&sgn| riccati_from(bench, t0 + S::of(sgn) * delta, &means, &vars, params.n_t))
            .collect::<Result<Vec<_>>>()?;
        let d12 = S::of(12.0) * delta;
        let dt_of = |f: &dyn Fn(&RiccatiSolution<S>) -> S| -> S {
            (f(&stencil[0]) - S::of(8.0) * f(&stencil[1]) + S::of(8.0) * f(&stencil[2])
                - f(&stencil[3]))
                / d12
        };

        // finite-difference mean derivatives of (B, C) at the start node
        let mut fd_b = vec![vec![S::zero(); k]; k];
        let mut fd_c = vec![vec![S::zero(); k]; k];
        for j in 0..k {
            let mut up = means.clone();
            let mut dn = means.clone();
            up[j] += params.fd_step;
            dn[j] -= params.fd_step;
            let su = riccati_from(bench, t0, &up, &vars, params.n_t)?;
            let sd = riccati_from(bench, t0, &dn, &vars, params.n_t)?;
            let two_eps = S::of(2.0) * params.fd_step;
            for l in 0..k {
                fd_b[l][j] = (su.b[l][0] - sd.b[l][0]) / two_eps;
                fd_c[l][j] = (su.c0[l][0] - sd.c0[l][0]) / two_eps;
            }
        }

        // forward velocity of each type mean at the sample point
        let mdot: Vec<S> = (0..k)
            .map(|j| riccati_a(bench.cost_weight[j], t1, t0) * means[j] + sol.b[j][0])
            .collect();

        for l in 0..k {
            let theta = S::from_usize(l + 1).unwrap() / kk;
            let c = bench.cost_weight[l];
            let w = bench.coupling[l];
            let s2 = bench.vol[l] * bench.vol[l];
            let a = riccati_a(c, t1, t0);
            let a_prime = c - a * a;
            let b0 = sol.b[l][0];
            let dt_b = dt_of(&|s: &RiccatiSolution<S>| s.b[l][0]);
            let dt_c = dt_of(&|s: &RiccatiSolution<S>| s.c0[l][0]);
            let half = S::of(0.5);
            for &x in &params.xs {
                let p = a * x + b0;
                if p.abs() > bench.action_bound {
                    return Err(HmfgError::solver(
                        "sample point leaves the unclamped feedback region",
                    ));
                }
                let dt_v = half * a_prime * x * x + dt_b * x + dt_c;
                let target = x - w * mbar;
                let ham = half * p * p - half * c * target * target;
                let diffusion = half * s2 * a;
                let mut ens_an = S::zero();
                let mut ens_fd = S::zero();
                for j in 0..k {
                    ens_an += (sens.db[l][j][0] * x + sens.dc[l][j][0]) * mdot[j];
                    ens_fd += (fd_b[l][j] * x + fd_c[l][j]) * mdot[j];
                }
                samples.push(MasterSample {
                    theta,
                    t: t0,
                    x,
                    residual_analytic: dt_v + ham + diffusion + ens_an,
                    residual_fd: dt_v + ham + diffusion + ens_fd,
                });
            }
        }
    }

    let max_abs = |f: fn(&MasterSample<S>) -> S| {
        samples.iter().map(|s| f(s).abs()).fold(S::zero(), S::max)
    };
    Ok(MasterReport {
        max_abs_analytic: max_abs(|s| s.residual_analytic),
        max_abs_fd: max_abs(|s| s.residual_fd),
        samples,
    })
}
