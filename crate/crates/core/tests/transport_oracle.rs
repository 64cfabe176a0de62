//! Independent cross-checks of the 1-D optimal transport kernel: a
//! brute-force assignment oracle on small atomic instances, and
//! property-based metric axioms for the ensemble distance.

use hmfg::metric::{
    ensemble_distance, wasserstein_p, EmpiricalMeasure, GridMeasure, Measure, MeasureEnsemble,
    StateGrid,
};
use hmfg::rng::CounterRng;
use proptest::prelude::*;

/// Exact W_p^p between two equal-size equal-weight atom lists by full
/// enumeration of assignments: the transport polytope with uniform
/// marginals has permutation matrices as extreme points, so the linear
/// program attains its optimum on one of them.
fn brute_force_wp(xs: &[f64], ys: &[f64], p: u8) -> f64 {
    fn permute(ys: &mut Vec<f64>, k: usize, xs: &[f64], p: u8, best: &mut f64) {
        if k == ys.len() {
            let cost: f64 = xs
                .iter()
                .zip(ys.iter())
                .map(|(&x, &y)| (x - y).abs().powi(p as i32))
                .sum();
            if cost < *best {
                *best = cost;
            }
            return;
        }
        for i in k..ys.len() {
            ys.swap(k, i);
            permute(ys, k + 1, xs, p, best);
            ys.swap(k, i);
        }
    }
    let mut best = f64::INFINITY;
    let mut ys = ys.to_vec();
    permute(&mut ys, 0, xs, p, &mut best);
    let n = xs.len() as f64;
    (best / n).powf(1.0 / p as f64)
}

/// Expand a weighted atom list with weights that are multiples of `1/l`
/// into `l` equal-weight atoms.
fn expand(atoms: &[f64], numerators: &[usize], l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l);
    for (&a, &m) in atoms.iter().zip(numerators) {
        out.extend(std::iter::repeat(a).take(m));
    }
    assert_eq!(out.len(), l);
    out
}

#[test]
fn wasserstein_matches_assignment_oracle_equal_weights() {
    let mut rng = CounterRng::new(91, &[0x4f52_4143]);
    for case in 0..60 {
        let n = 1 + case % 5;
        let xs: Vec<f64> = (0..n).map(|_| rng.range(-3.0, 3.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.range(-3.0, 3.0)).collect();
        let mx = Measure::Empirical(EmpiricalMeasure::from_samples(xs.clone()).unwrap());
        let my = Measure::Empirical(EmpiricalMeasure::from_samples(ys.clone()).unwrap());
        for p in [1u8, 2] {
            let fast = wasserstein_p(&mx, &my, p).unwrap();
            let slow = brute_force_wp(&xs, &ys, p);
            assert!(
                (fast - slow).abs() < 1e-9,
                "case {case} p = {p}: {fast} vs {slow}"
            );
        }
    }
}

#[test]
fn wasserstein_matches_assignment_oracle_rational_weights() {
    // weights on a common denominator l <= 7; the weighted instance is
    // equivalent to an equal-weight instance with repeated atoms
    let mut rng = CounterRng::new(17, &[0x4f52_4144]);
    for case in 0..40 {
        let l = 4 + case % 4; // common denominator 4..7
        // random composition: drop each of the l unit weights into one of
        // `parts` buckets, keep the non-empty buckets
        let split = |rng: &mut CounterRng, parts: usize, total: usize| -> Vec<usize> {
            let mut buckets = vec![0usize; parts];
            for _ in 0..total {
                let i = (rng.uniform::<f64>() * parts as f64) as usize;
                buckets[i.min(parts - 1)] += 1;
            }
            buckets.retain(|&b| b > 0);
            buckets
        };
        let wx = split(&mut rng, 1 + case % 3, l);
        let wy = split(&mut rng, 1 + (case / 2) % 3, l);
        let ax: Vec<f64> = wx.iter().map(|_| rng.range(-2.0, 2.0)).collect();
        let ay: Vec<f64> = wy.iter().map(|_| rng.range(-2.0, 2.0)).collect();
        let mx = Measure::Empirical(
            EmpiricalMeasure::new(ax.clone(), wx.iter().map(|&w| w as f64 / l as f64).collect())
                .unwrap(),
        );
        let my = Measure::Empirical(
            EmpiricalMeasure::new(ay.clone(), wy.iter().map(|&w| w as f64 / l as f64).collect())
                .unwrap(),
        );
        let ex = expand(&ax, &wx, l);
        let ey = expand(&ay, &wy, l);
        for p in [1u8, 2] {
            let fast = wasserstein_p(&mx, &my, p).unwrap();
            let slow = brute_force_wp(&ex, &ey, p);
            assert!(
                (fast - slow).abs() < 1e-9,
                "case {case} p = {p}: {fast} vs {slow}"
            );
        }
    }
}

// --- metric axioms for the ensemble distance -----------------------------

fn ensemble_strategy(k: usize) -> impl Strategy<Value = MeasureEnsemble<f64>> {
    let grid = StateGrid::new(-5.0, 5.0, 201).unwrap();
    prop::collection::vec((-2.0f64..2.0, 0.2f64..1.0, prop::bool::ANY), k).prop_map(
        move |specs| {
            let measures = specs
                .into_iter()
                .map(|(mean, std, empirical)| {
                    if empirical {
                        // five-atom stand-in with the same location scale
                        let atoms = vec![
                            mean - std,
                            mean - 0.3 * std,
                            mean,
                            mean + 0.4 * std,
                            mean + std,
                        ];
                        Measure::Empirical(EmpiricalMeasure::from_samples(atoms).unwrap())
                    } else {
                        Measure::Grid(GridMeasure::gaussian(grid, mean, std).unwrap())
                    }
                })
                .collect();
            MeasureEnsemble::new(measures).unwrap()
        },
    )
}

fn triple_strategy(
) -> impl Strategy<Value = (MeasureEnsemble<f64>, MeasureEnsemble<f64>, MeasureEnsemble<f64>)> {
    (1usize..=8).prop_flat_map(|k| {
        (ensemble_strategy(k), ensemble_strategy(k), ensemble_strategy(k))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ensemble_distance_metric_axioms((a, b, c) in triple_strategy()) {
        for p in [1u8, 2] {
            let dab = ensemble_distance(&a, &b, p).unwrap();
            let dba = ensemble_distance(&b, &a, p).unwrap();
            let dac = ensemble_distance(&a, &c, p).unwrap();
            let dbc = ensemble_distance(&b, &c, p).unwrap();
            let daa = ensemble_distance(&a, &a, p).unwrap();
            // non-negativity and identity
            prop_assert!(dab >= 0.0);
            prop_assert!(daa.abs() < 1e-12);
            // symmetry
            prop_assert!((dab - dba).abs() < 1e-12);
            // triangle inequality
            prop_assert!(dac <= dab + dbc + 1e-9);
        }
    }
}
