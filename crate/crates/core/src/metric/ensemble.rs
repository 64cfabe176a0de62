use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{HmfgError, Result};
use crate::metric::grid::StateGrid;
use crate::metric::measure::Measure;
use crate::metric::wasserstein::wasserstein_p;
use crate::scalar::Scalar;

/// K-type ensemble of measures with type points `theta_l = l/K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureEnsemble<S> {
    measures: Vec<Measure<S>>,
    type_points: Vec<S>,
}

impl<S: Scalar> MeasureEnsemble<S> {
    pub fn new(measures: Vec<Measure<S>>) -> Result<Self> {
        if measures.is_empty() {
            return Err(HmfgError::validation("ensemble needs at least one type"));
        }
        let grids: Vec<&StateGrid<S>> = measures
            .iter()
            .filter_map(|m| m.as_grid().map(|g| g.grid()))
            .collect();
        if let Some(first) = grids.first() {
            if grids.iter().any(|g| !g.matches(first)) {
                return Err(HmfgError::validation(
                    "all grid measures in an ensemble must share one state grid",
                ));
            }
        }
        let k = measures.len();
        let kk = S::from_usize(k).unwrap();
        let type_points = (1..=k)
            .map(|l| S::from_usize(l).unwrap() / kk)
            .collect();
        Ok(MeasureEnsemble { measures, type_points })
    }

    pub fn n_types(&self) -> usize {
        self.measures.len()
    }

    pub fn measures(&self) -> &[Measure<S>] {
        &self.measures
    }

    pub fn measure(&self, l: usize) -> &Measure<S> {
        &self.measures[l]
    }

    pub fn type_points(&self) -> &[S] {
        &self.type_points
    }

    /// Type index whose point `l/K` covers `theta` (ceil(theta K), 1-based).
    pub fn type_index(&self, theta: S) -> usize {
        let k = self.measures.len();
        let idx = (theta * S::from_usize(k).unwrap()).ceil().to64() as isize - 1;
        idx.clamp(0, k as isize - 1) as usize
    }

    /// Uniform average of the per-type means.
    pub fn mean_functional(&self) -> S {
        let k = S::from_usize(self.measures.len()).unwrap();
        self.measures.iter().map(|m| m.mean()).sum::<S>() / k
    }

    pub fn state_grid(&self) -> Option<StateGrid<S>> {
        self.measures.first().and_then(|m| m.as_grid().map(|g| *g.grid()))
    }
}

/// `d_p(phi, psi) = (1/K) sum_l W_p(phi_l, psi_l)` over matching type points.
pub fn ensemble_distance<S: Scalar>(
    phi: &MeasureEnsemble<S>,
    psi: &MeasureEnsemble<S>,
    p: u8,
) -> Result<S> {
    if phi.n_types() != psi.n_types() {
        return Err(HmfgError::validation(format!(
            "ensembles have different type counts: {} vs {}",
            phi.n_types(),
            psi.n_types()
        )));
    }
    let k = S::from_usize(phi.n_types()).unwrap();
    let mut acc = S::zero();
    for (a, b) in phi.measures().iter().zip(psi.measures()) {
        acc += wasserstein_p(a, b, p)?;
    }
    Ok(acc / k)
}

/// Time-indexed flow of measure ensembles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFlow<S> {
    times: Vec<S>,
    snapshots: Vec<MeasureEnsemble<S>>,
}

impl<S: Scalar> EnsembleFlow<S> {
    pub fn new(times: Vec<S>, snapshots: Vec<MeasureEnsemble<S>>) -> Result<Self> {
        if times.is_empty() || times.len() != snapshots.len() {
            return Err(HmfgError::validation(format!(
                "flow needs equal nonzero time/snapshot counts, got {}/{}",
                times.len(),
                snapshots.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(HmfgError::validation("flow times must be strictly increasing"));
        }
        let k = snapshots[0].n_types();
        if snapshots.iter().any(|s| s.n_types() != k) {
            return Err(HmfgError::validation("all snapshots must share the type count"));
        }
        Ok(EnsembleFlow { times, snapshots })
    }

    /// The given ensemble frozen at every node of `times`.
    pub fn frozen(times: Vec<S>, ensemble: MeasureEnsemble<S>) -> Result<Self> {
        let snapshots = vec![ensemble; times.len()];
        EnsembleFlow::new(times, snapshots)
    }

    pub fn times(&self) -> &[S] {
        &self.times
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn snapshot(&self, i: usize) -> &MeasureEnsemble<S> {
        &self.snapshots[i]
    }

    pub fn snapshots(&self) -> &[MeasureEnsemble<S>] {
        &self.snapshots
    }

    /// Snapshot at the time node nearest to `t` (validated to be close).
    pub fn snapshot_at(&self, t: S) -> Result<&MeasureEnsemble<S>> {
        let i = self.nearest_index(t);
        let tol = S::of(1e-9) * (S::one() + t.abs());
        if (self.times[i] - t).abs() > tol + self.spacing_hint() {
            return Err(HmfgError::validation(format!(
                "time {} outside flow coverage [{}, {}]",
                t.to64(),
                self.times[0].to64(),
                self.times[self.times.len() - 1].to64()
            )));
        }
        Ok(&self.snapshots[i])
    }

    pub fn nearest_index(&self, t: S) -> usize {
        let mut best = 0;
        let mut bd = S::infinity();
        for (i, &ti) in self.times.iter().enumerate() {
            let d = (ti - t).abs();
            if d < bd {
                bd = d;
                best = i;
            }
        }
        best
    }

    fn spacing_hint(&self) -> S {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            S::zero()
        }
    }

    pub fn aligned_with(&self, other: &Self) -> bool {
        self.times.len() == other.times.len()
            && self
                .times
                .iter()
                .zip(&other.times)
                .all(|(&a, &b)| (a - b).abs() <= S::of(1e-9) * (S::one() + a.abs()))
    }
}

/// Sup over shared time nodes of the per-node ensemble distance.
pub fn flow_distance<S: Scalar>(
    rho: &EnsembleFlow<S>,
    rho_bar: &EnsembleFlow<S>,
    p: u8,
) -> Result<S> {
    if !rho.aligned_with(rho_bar) {
        return Err(HmfgError::validation("flow time grids are not aligned"));
    }
    let mut sup = S::zero();
    for (a, b) in rho.snapshots().iter().zip(rho_bar.snapshots()) {
        sup = sup.max(ensemble_distance(a, b, p)?);
    }
    Ok(sup)
}

fn fmt<S: Scalar>(x: S) -> String {
    format!("{:.17e}", x.to64())
}

/// CSV `theta,x,density`, type-major. Grid ensembles only.
pub fn ensemble_to_csv<S: Scalar>(ens: &MeasureEnsemble<S>, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "theta,x,density").map_err(|e| HmfgError::validation(e.to_string()))?;
    write_ensemble_rows(ens, None, out)
}

/// CSV `t,theta,x,density`, time-major then type-major.
pub fn flow_to_csv<S: Scalar>(flow: &EnsembleFlow<S>, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "t,theta,x,density").map_err(|e| HmfgError::validation(e.to_string()))?;
    for (i, snap) in flow.snapshots().iter().enumerate() {
        write_ensemble_rows(snap, Some(flow.times()[i]), out)?;
    }
    Ok(())
}

fn write_ensemble_rows<S: Scalar>(
    ens: &MeasureEnsemble<S>,
    t: Option<S>,
    out: &mut dyn Write,
) -> Result<()> {
    for (l, m) in ens.measures().iter().enumerate() {
        let g = m.as_grid().ok_or_else(|| {
            HmfgError::unsupported("CSV serialization requires grid measures")
        })?;
        let theta = ens.type_points()[l];
        for (i, &d) in g.density().iter().enumerate() {
            let row = match t {
                Some(t) => format!(
                    "{},{},{},{}",
                    fmt(t),
                    fmt(theta),
                    fmt(g.grid().node(i)),
                    fmt(d)
                ),
                None => format!("{},{},{}", fmt(theta), fmt(g.grid().node(i)), fmt(d)),
            };
            writeln!(out, "{row}").map_err(|e| HmfgError::validation(e.to_string()))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::measure::EmpiricalMeasure;

    fn dirac_ensemble(k: usize, x: f64) -> MeasureEnsemble<f64> {
        MeasureEnsemble::new(
            (0..k)
                .map(|_| Measure::Empirical(EmpiricalMeasure::dirac(x)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_distance() {
        let e = dirac_ensemble(4, 0.0);
        assert_eq!(ensemble_distance(&e, &e, 1).unwrap(), 0.0);
    }

    #[test]
    fn constant_shift() {
        let a = dirac_ensemble(5, 0.0);
        let b = dirac_ensemble(5, 2.5);
        assert!((ensemble_distance(&a, &b, 1).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_k_rejected() {
        let a = dirac_ensemble(3, 0.0);
        let b = dirac_ensemble(4, 0.0);
        assert!(ensemble_distance(&a, &b, 1).is_err());
    }

    #[test]
    fn flow_distance_final_shift() {
        let times = vec![0.0, 0.5, 1.0];
        let a = EnsembleFlow::frozen(times.clone(), dirac_ensemble(2, 0.0)).unwrap();
        let mut snaps = vec![dirac_ensemble(2, 0.0), dirac_ensemble(2, 0.0)];
        snaps.push(dirac_ensemble(2, 0.75));
        let b = EnsembleFlow::new(times, snaps).unwrap();
        assert!((flow_distance(&a, &b, 1).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(flow_distance(&a, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_flows_rejected() {
        let a = EnsembleFlow::frozen(vec![0.0, 1.0], dirac_ensemble(2, 0.0)).unwrap();
        let b = EnsembleFlow::frozen(vec![0.0, 0.5, 1.0], dirac_ensemble(2, 0.0)).unwrap();
        assert!(flow_distance(&a, &b, 1).is_err());
    }

    #[test]
    fn type_points_and_index() {
        let e = dirac_ensemble(4, 0.0);
        assert_eq!(e.type_points(), &[0.25, 0.5, 0.75, 1.0]);
        assert_eq!(e.type_index(0.1), 0);
        assert_eq!(e.type_index(0.25), 0);
        assert_eq!(e.type_index(0.26), 1);
        assert_eq!(e.type_index(1.0), 3);
    }
}
