//! One-dimensional Wasserstein distances via quantile functions.
//!
//! Both measure representations are reduced to a list of segments on which
//! the quantile function is linear in the probability level `u`. `W_p` is
//! then the exact `L^p(du)` distance between the two piecewise-linear
//! quantile functions, integrated over the merged breakpoint partition.

use crate::error::{HmfgError, Result};
use crate::metric::measure::{EmpiricalMeasure, GridMeasure, Measure};
use crate::scalar::Scalar;

/// `Q` is linear from `x0` to `x1` on the probability interval `[u0, u1]`.
#[derive(Debug, Clone, Copy)]
struct QuantileSegment<S> {
    u0: S,
    u1: S,
    x0: S,
    x1: S,
}

impl<S: Scalar> QuantileSegment<S> {
    fn eval(&self, u: S) -> S {
        if self.u1 <= self.u0 {
            return self.x0;
        }
        let t = (u - self.u0) / (self.u1 - self.u0);
        self.x0 + (self.x1 - self.x0) * t
    }
}

fn grid_segments<S: Scalar>(m: &GridMeasure<S>) -> Vec<QuantileSegment<S>> {
    let cdf = m.cdf_nodes();
    let mut segs = Vec::new();
    for i in 0..cdf.len() - 1 {
        if cdf[i + 1] > cdf[i] {
            segs.push(QuantileSegment {
                u0: cdf[i],
                u1: cdf[i + 1],
                x0: m.grid().node(i),
                x1: m.grid().node(i + 1),
            });
        }
    }
    if segs.is_empty() {
        // degenerate: all mass in one cell boundary; treat as a point mass
        segs.push(QuantileSegment {
            u0: S::zero(),
            u1: S::one(),
            x0: m.grid().x_min,
            x1: m.grid().x_min,
        });
    }
    segs
}

fn empirical_segments<S: Scalar>(m: &EmpiricalMeasure<S>) -> Vec<QuantileSegment<S>> {
    let mut segs = Vec::new();
    let mut acc = S::zero();
    for (x, w) in m.sorted() {
        if w > S::zero() {
            segs.push(QuantileSegment { u0: acc, u1: (acc + w).min(S::one()), x0: x, x1: x });
            acc += w;
        }
    }
    if let Some(last) = segs.last_mut() {
        last.u1 = S::one();
    }
    segs
}

fn segments<S: Scalar>(m: &Measure<S>) -> Vec<QuantileSegment<S>> {
    match m {
        Measure::Grid(g) => grid_segments(g),
        Measure::Empirical(e) => empirical_segments(e),
    }
}

/// Exact integral of `|Q1 - Q2|^p du`, `p` in {1, 2}.
fn quantile_lp<S: Scalar>(a: &[QuantileSegment<S>], b: &[QuantileSegment<S>], p: u8) -> S {
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = S::zero();
    let mut total = S::zero();
    let half = S::of(0.5);
    let third = S::of(1.0 / 3.0);
    while i < a.len() && j < b.len() {
        let sa = a[i];
        let sb = b[j];
        let hi = sa.u1.min(sb.u1);
        if hi > u {
            let d0 = sa.eval(u) - sb.eval(u);
            let d1 = sa.eval(hi) - sb.eval(hi);
            let w = hi - u;
            total += match p {
                1 => {
                    if d0 * d1 >= S::zero() {
                        (d0.abs() + d1.abs()) * half * w
                    } else {
                        // linear difference crosses zero inside the interval
                        w * (d0 * d0 + d1 * d1) * half / (d0 - d1).abs()
                    }
                }
                2 => w * (d0 * d0 + d0 * d1 + d1 * d1) * third,
                _ => unreachable!("p must be 1 or 2"),
            };
            u = hi;
        }
        if sa.u1 <= u {
            i += 1;
        }
        if sb.u1 <= u {
            j += 1;
        }
    }
    total
}

fn check_pair<S: Scalar>(mu: &Measure<S>, nu: &Measure<S>) -> Result<()> {
    if let (Measure::Grid(a), Measure::Grid(b)) = (mu, nu) {
        if !a.grid().matches(b.grid()) {
            return Err(HmfgError::validation(
                "grid measures live on different state grids",
            ));
        }
    }
    Ok(())
}

/// 1-Wasserstein distance between two measures on the line.
pub fn wasserstein1<S: Scalar>(mu: &Measure<S>, nu: &Measure<S>) -> Result<S> {
    check_pair(mu, nu)?;
    Ok(quantile_lp(&segments(mu), &segments(nu), 1))
}

/// 2-Wasserstein distance between two measures on the line.
pub fn wasserstein2<S: Scalar>(mu: &Measure<S>, nu: &Measure<S>) -> Result<S> {
    check_pair(mu, nu)?;
    Ok(quantile_lp(&segments(mu), &segments(nu), 2).max(S::zero()).sqrt())
}

/// `W_p` dispatch used by the ensemble metric.
pub fn wasserstein_p<S: Scalar>(mu: &Measure<S>, nu: &Measure<S>, p: u8) -> Result<S> {
    match p {
        1 => wasserstein1(mu, nu),
        2 => wasserstein2(mu, nu),
        _ => Err(HmfgError::config(format!("unsupported order p = {p}"))),
    }
}
