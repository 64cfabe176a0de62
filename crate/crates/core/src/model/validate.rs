//! Numerical audit of the standing assumptions on a problem instance.
//!
//! The assumptions cannot be proven from closures, so they are sampled:
//! Lipschitz difference quotients of every coefficient in (x, a, ensemble
//! mean), the uniform ellipticity floor `sigma >= 1/L`, the envelope
//! identity `dH/dp = b(a*)`, and consistency of the supplied Hamiltonian
//! with the sup over the action grid.

use serde::Serialize;

use crate::error::{HmfgError, Result};
use crate::metric::{GridMeasure, Measure, MeasureEnsemble, StateGrid};
use crate::model::problem::{hamiltonian_from_sup, HmfgProblem};
use crate::rng::CounterRng;
use crate::scalar::Scalar;

/// Tolerance multiplier on the declared Lipschitz constant: sampled
/// difference quotients may exceed `L` by at most 1%.
const LIPSCHITZ_SLACK: f64 = 1.01;
const ENVELOPE_TOL: f64 = 1e-8;
const SUP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub declared_lipschitz: f64,
    pub max_quotient: f64,
    /// Coefficient and argument of the worst difference quotient.
    pub max_quotient_site: String,
    pub min_vol: f64,
    pub envelope_error: f64,
    pub sup_gap: f64,
    pub samples: usize,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Sample the assumptions on the box `[grid.x_min, grid.x_max]` with
/// `samples` random probes per coefficient.
pub fn validate_problem<S: Scalar>(
    problem: &HmfgProblem<S>,
    grid: StateGrid<S>,
    n_types: usize,
    seed: u64,
    samples: usize,
) -> Result<ValidationReport> {
    if samples == 0 || n_types == 0 {
        return Err(HmfgError::config("validation needs samples > 0 and n_types > 0"));
    }
    let l_decl = problem.lipschitz.to64();
    if !(l_decl >= 1.0) {
        return Err(HmfgError::config(format!(
            "declared Lipschitz constant must be >= 1, got {l_decl}"
        )));
    }
    let mut rng = CounterRng::new(seed, &[0x5641_4c49]);
    let (a_lo, a_hi) = problem.action_bounds;
    let p_span = problem.lipschitz * (S::one() + grid.x_max.abs().max(grid.x_min.abs()));

    // Base ensemble plus shifted variants for measure-direction quotients.
    let center = (grid.x_min + grid.x_max) * S::of(0.5);
    let width = (grid.x_max - grid.x_min) * S::of(0.1);
    let make_ensemble = |shift: S| -> Result<MeasureEnsemble<S>> {
        let measures = (0..n_types)
            .map(|l| {
                let off = S::from_usize(l).unwrap() * width * S::of(0.1);
                GridMeasure::gaussian(grid, center + shift + off, width).map(Measure::Grid)
            })
            .collect::<Result<Vec<_>>>()?;
        MeasureEnsemble::new(measures)
    };
    let mu0 = make_ensemble(S::zero())?;
    let mu_shift = S::of(0.05) * (grid.x_max - grid.x_min);
    let mu1 = make_ensemble(mu_shift)?;
    // Wasserstein distance between the shifted ensembles is the shift.
    let d_mu = mu_shift;

    let mut max_q = 0.0f64;
    let mut max_site = String::from("none");
    let mut record = |q: f64, site: &str, arg: f64| {
        if q > max_q {
            max_q = q;
            max_site = format!("{site} near {arg:.4}");
        }
    };

    let eval = |which: usize, theta: S, t: S, x: S, mu: &MeasureEnsemble<S>, a: S| -> S {
        match which {
            0 => (problem.drift)(theta, t, x, mu, a),
            1 => (problem.running_cost)(theta, t, x, mu, a),
            2 => (problem.vol)(theta, t, x, mu),
            _ => (problem.terminal_cost)(theta, x, mu),
        }
    };
    let names = ["drift", "running_cost", "vol", "terminal_cost"];

    let mut min_vol = f64::INFINITY;
    let mut envelope_err = 0.0f64;
    let mut sup_gap = 0.0f64;
    let h = (grid.x_max - grid.x_min) * S::of(1e-4);

    for _ in 0..samples {
        let theta = rng.range(S::of(1e-6), S::one());
        let t = rng.range(S::zero(), problem.horizon);
        let x = rng.range(grid.x_min + h, grid.x_max - h);
        let a = rng.range(a_lo, a_hi);
        let p = rng.range(-p_span, p_span);

        for which in 0..4 {
            // state direction
            let fp = eval(which, theta, t, x + h, &mu0, a);
            let fm = eval(which, theta, t, x - h, &mu0, a);
            record(
                ((fp - fm) / (S::of(2.0) * h)).abs().to64(),
                &format!("{}/x", names[which]),
                x.to64(),
            );
            // measure direction (1-Wasserstein quotient)
            let g0 = eval(which, theta, t, x, &mu0, a);
            let g1 = eval(which, theta, t, x, &mu1, a);
            record(
                ((g1 - g0) / d_mu).abs().to64(),
                &format!("{}/mu", names[which]),
                x.to64(),
            );
        }
        // action direction for drift and running cost
        let ha = (a_hi - a_lo) * S::of(1e-4);
        if a - ha > a_lo && a + ha < a_hi {
            for which in 0..2 {
                let fp = eval(which, theta, t, x, &mu0, a + ha);
                let fm = eval(which, theta, t, x, &mu0, a - ha);
                record(
                    ((fp - fm) / (S::of(2.0) * ha)).abs().to64(),
                    &format!("{}/a", names[which]),
                    a.to64(),
                );
            }
        }

        min_vol = min_vol.min((problem.vol)(theta, t, x, &mu0).to64());

        // envelope identity at the supplied feedback
        let a_star = (problem.feedback)(theta, t, x, p, &mu0);
        let dh = (problem.hamiltonian_grad)(theta, t, x, p, &mu0);
        let b_star = (problem.drift)(theta, t, x, &mu0, a_star);
        envelope_err = envelope_err.max((dh - b_star).abs().to64());

        // supplied H vs grid-search sup
        let h_closed = (problem.hamiltonian)(theta, t, x, p, &mu0);
        let (h_sup, _) = hamiltonian_from_sup(problem, p, theta, t, x, &mu0, 257)?;
        sup_gap = sup_gap.max((h_closed - h_sup).abs().to64() / (1.0 + h_closed.abs().to64()));
    }

    let mut failures = Vec::new();
    if max_q > LIPSCHITZ_SLACK * l_decl {
        failures.push(format!(
            "difference quotient {max_q:.6} at {max_site} exceeds declared L = {l_decl}"
        ));
    }
    if min_vol < 1.0 / l_decl - 1e-12 {
        failures.push(format!(
            "volatility floor violated: min sigma {min_vol:.6} < 1/L = {:.6}",
            1.0 / l_decl
        ));
    }
    if envelope_err > ENVELOPE_TOL {
        failures.push(format!(
            "envelope identity |dH/dp - b(a*)| = {envelope_err:.3e} exceeds {ENVELOPE_TOL:.1e}"
        ));
    }
    if sup_gap > SUP_TOL {
        failures.push(format!(
            "supplied Hamiltonian differs from action-grid sup by {sup_gap:.3e}"
        ));
    }

    Ok(ValidationReport {
        declared_lipschitz: l_decl,
        max_quotient: max_q,
        max_quotient_site: max_site,
        min_vol,
        envelope_error: envelope_err,
        sup_gap,
        samples,
        passed: failures.is_empty(),
        failures,
    })
}
