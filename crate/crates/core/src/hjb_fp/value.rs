use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{HmfgError, Result};
use crate::metric::{StateGrid, TimeGrid};
use crate::scalar::Scalar;

/// Paired space/time discretization for one solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveGrids<S> {
    pub state: StateGrid<S>,
    pub time: TimeGrid<S>,
}

impl<S: Scalar> SolveGrids<S> {
    pub fn new(state: StateGrid<S>, time: TimeGrid<S>) -> Self {
        SolveGrids { state, time }
    }

    pub fn n_nodes(&self) -> usize {
        self.state.n_x * self.time.n_t
    }

    #[inline]
    pub fn idx(&self, i_t: usize, j_x: usize) -> usize {
        i_t * self.state.n_x + j_x
    }
}

/// Per-type value function and its spatial gradient on a [`SolveGrids`].
///
/// Layout is time-major: entry `i_t * n_x + j_x`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueField<S> {
    pub grids: SolveGrids<S>,
    pub type_points: Vec<S>,
    u: Vec<Vec<S>>,
    p: Vec<Vec<S>>,
}

impl<S: Scalar> ValueField<S> {
    /// Wrap per-type flattened value arrays, deriving gradients by
    /// second-order finite differences.
    pub fn new(grids: SolveGrids<S>, u: Vec<Vec<S>>) -> Result<Self> {
        if u.is_empty() {
            return Err(HmfgError::validation("value field needs at least one type"));
        }
        let expect = grids.n_nodes();
        if let Some(bad) = u.iter().find(|v| v.len() != expect) {
            return Err(HmfgError::validation(format!(
                "value array has {} entries, grid has {expect}",
                bad.len()
            )));
        }
        let n_x = grids.state.n_x;
        let dx = grids.state.dx;
        let p = u
            .iter()
            .map(|ul| {
                let mut pl = vec![S::zero(); expect];
                for i in 0..grids.time.n_t {
                    let row = &ul[i * n_x..(i + 1) * n_x];
                    let out = &mut pl[i * n_x..(i + 1) * n_x];
                    gradient_into(row, dx, out);
                }
                pl
            })
            .collect();
        let k = u.len();
        let kk = S::from_usize(k).unwrap();
        let type_points = (1..=k).map(|l| S::from_usize(l).unwrap() / kk).collect();
        Ok(ValueField { grids, type_points, u, p })
    }

    pub fn n_types(&self) -> usize {
        self.u.len()
    }

    pub fn value(&self, l: usize, i_t: usize, j_x: usize) -> S {
        self.u[l][self.grids.idx(i_t, j_x)]
    }

    pub fn grad(&self, l: usize, i_t: usize, j_x: usize) -> S {
        self.p[l][self.grids.idx(i_t, j_x)]
    }

    pub fn values(&self, l: usize) -> &[S] {
        &self.u[l]
    }

    pub fn grads(&self, l: usize) -> &[S] {
        &self.p[l]
    }

    /// Value at an off-node point by bilinear interpolation, clamped to
    /// the grid box.
    pub fn value_at(&self, l: usize, t: S, x: S) -> S {
        self.bilinear(&self.u[l], t, x)
    }

    /// Gradient at an off-node point by bilinear interpolation.
    pub fn grad_at(&self, l: usize, t: S, x: S) -> S {
        self.bilinear(&self.p[l], t, x)
    }

    fn bilinear(&self, field: &[S], t: S, x: S) -> S {
        let tg = &self.grids.time;
        let sg = &self.grids.state;
        let st = ((t - tg.t0) / tg.dt).max(S::zero());
        let it = (st.floor().to64() as usize).min(tg.n_t - 2);
        let ft = (st - S::from_usize(it).unwrap()).max(S::zero()).min(S::one());
        let sx = ((x - sg.x_min) / sg.dx).max(S::zero());
        let jx = (sx.floor().to64() as usize).min(sg.n_x - 2);
        let fx = (sx - S::from_usize(jx).unwrap()).max(S::zero()).min(S::one());
        let g = |i: usize, j: usize| field[self.grids.idx(i, j)];
        let one = S::one();
        (one - ft) * ((one - fx) * g(it, jx) + fx * g(it, jx + 1))
            + ft * ((one - fx) * g(it + 1, jx) + fx * g(it + 1, jx + 1))
    }
}

/// Second-order spatial gradient: central differences inside, one-sided
/// three-point stencils at the boundary.
pub fn gradient_into<S: Scalar>(u: &[S], dx: S, out: &mut [S]) {
    let n = u.len();
    debug_assert!(n >= 3);
    let two_dx = S::of(2.0) * dx;
    out[0] = (-S::of(3.0) * u[0] + S::of(4.0) * u[1] - u[2]) / two_dx;
    for j in 1..n - 1 {
        out[j] = (u[j + 1] - u[j - 1]) / two_dx;
    }
    out[n - 1] = (S::of(3.0) * u[n - 1] - S::of(4.0) * u[n - 2] + u[n - 3]) / two_dx;
}

fn fmt<S: Scalar>(x: S) -> String {
    format!("{:.17e}", x.to64())
}

/// CSV `theta,t,x,u,p`, type-major then time-major.
pub fn value_to_csv<S: Scalar>(field: &ValueField<S>, out: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| HmfgError::validation(e.to_string());
    writeln!(out, "theta,t,x,u,p").map_err(io)?;
    for l in 0..field.n_types() {
        let theta = field.type_points[l];
        for i in 0..field.grids.time.n_t {
            let t = field.grids.time.node(i);
            for j in 0..field.grids.state.n_x {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    fmt(theta),
                    fmt(t),
                    fmt(field.grids.state.node(j)),
                    fmt(field.value(l, i, j)),
                    fmt(field.grad(l, i, j))
                )
                .map_err(io)?;
            }
        }
    }
    Ok(())
}
