//! Discrete-time linear time-varying models, path constraints and time grids.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default tolerance used when testing `h(x, u) <= 0`.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Step used by the central finite-difference fallback in [`ConstraintSet::linearize`].
pub const FD_STEP: f64 = 1e-6;

type DynamicsFn = dyn Fn(usize) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync;

/// `x_{k+1} = A_k x_k + B_k u_k`, with `(A_k, B_k)` produced on demand.
#[derive(Clone)]
pub struct LtvModel {
    n_x: usize,
    n_u: usize,
    ts: f64,
    dynamics: Arc<DynamicsFn>,
}

impl fmt::Debug for LtvModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LtvModel")
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .field("ts", &self.ts)
            .finish()
    }
}

impl LtvModel {
    pub fn from_fn<F>(n_x: usize, n_u: usize, ts: f64, dynamics: F) -> Result<Self>
    where
        F: Fn(usize) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync + 'static,
    {
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(Error::Rejected(format!("sampling time must be positive, got {ts}")));
        }
        if n_x == 0 || n_u == 0 {
            return Err(Error::Rejected("state and input dimensions must be positive".into()));
        }
        let (a, b) = dynamics(0);
        check_shape("A_0", &a, n_x, n_x)?;
        check_shape("B_0", &b, n_x, n_u)?;
        Ok(Self {
            n_x,
            n_u,
            ts,
            dynamics: Arc::new(dynamics),
        })
    }

    pub fn time_invariant(a: DMatrix<f64>, b: DMatrix<f64>, ts: f64) -> Result<Self> {
        let (n_x, n_u) = (a.nrows(), b.ncols());
        check_shape("A", &a, n_x, n_x)?;
        check_shape("B", &b, n_x, n_u)?;
        Self::from_fn(n_x, n_u, ts, move |_| (a.clone(), b.clone()))
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    /// `(A_k, B_k)`. Panics if the generator breaks its declared shape.
    pub fn matrices(&self, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b) = (self.dynamics)(k);
        assert!(
            a.shape() == (self.n_x, self.n_x) && b.shape() == (self.n_x, self.n_u),
            "dynamics generator returned wrong shapes at step {k}"
        );
        (a, b)
    }

    pub fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n_x {
            return Err(Error::dim("state", self.n_x, x.len()));
        }
        if u.len() != self.n_u {
            return Err(Error::dim("input", self.n_u, u.len()));
        }
        let (a, b) = self.matrices(k);
        Ok(a * x + b * u)
    }

    /// Roll the model forward from `x0` at step `k0`; returns `inputs.len() + 1` states.
    pub fn rollout(&self, k0: usize, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        for (i, u) in inputs.iter().enumerate() {
            let next = self.step(k0 + i, &states[i], u)?;
            states.push(next);
        }
        Ok(states)
    }
}

fn check_shape(what: &'static str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::dim(what, rows, m.nrows()));
    }
    if m.ncols() != cols {
        return Err(Error::dim(what, cols, m.ncols()));
    }
    Ok(())
}

/// Maps step indices to reference time: `t(k) = t0 + (k - k0) * ts`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub k0: usize,
    pub t0: f64,
    pub ts: f64,
    pub len: usize,
}

impl TimeGrid {
    pub fn new(k0: usize, t0: f64, ts: f64, len: usize) -> Self {
        Self { k0, t0, ts, len }
    }

    /// Grid anchored so that step `k` sits at `k * ts`.
    pub fn absolute(k0: usize, ts: f64, len: usize) -> Self {
        Self::new(k0, k0 as f64 * ts, ts, len)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + (k as f64 - self.k0 as f64) * self.ts
    }

    /// Last step index covered (`k0 + len`).
    pub fn end(&self) -> usize {
        self.k0 + self.len
    }

    /// A grid sharing this clock but starting at `k`.
    pub fn window(&self, k: usize, len: usize) -> Self {
        Self::new(k, self.time(k), self.ts, len)
    }

    pub fn steps(&self) -> impl Iterator<Item = usize> {
        self.k0..self.k0 + self.len
    }
}

/// First-order data of `h` at a point: `h(x+dx, u+du) ≈ residual + jx dx + ju du`.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub jx: DMatrix<f64>,
    pub ju: DMatrix<f64>,
    pub residual: DVector<f64>,
}

/// Path constraints `h(x, u) <= 0`, element-wise, with a fixed number of rows.
pub trait ConstraintSet: Send + Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_h(&self) -> usize;

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Analytic Jacobians when available; central differences otherwise.
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Linearization {
        fd_linearize(self, x, u, FD_STEP)
    }

    /// Affine sets are reproduced exactly by their linearization.
    fn is_affine(&self) -> bool {
        false
    }
}

pub fn fd_linearize<C: ConstraintSet + ?Sized>(
    cs: &C,
    x: &DVector<f64>,
    u: &DVector<f64>,
    step: f64,
) -> Linearization {
    let n_h = cs.n_h();
    let mut jx = DMatrix::zeros(n_h, x.len());
    let mut ju = DMatrix::zeros(n_h, u.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let col = (cs.eval(&xp, u) - cs.eval(&xm, u)) / (2.0 * step);
        jx.set_column(j, &col);
    }
    for j in 0..u.len() {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += step;
        um[j] -= step;
        let col = (cs.eval(x, &up) - cs.eval(x, &um)) / (2.0 * step);
        ju.set_column(j, &col);
    }
    Linearization {
        jx,
        ju,
        residual: cs.eval(x, u),
    }
}

/// True iff every component of `h(x, u)` is at most `tol`.
pub fn check_feasible<C: ConstraintSet + ?Sized>(
    cs: &C,
    x: &DVector<f64>,
    u: &DVector<f64>,
    tol: f64,
) -> bool {
    max_violation(cs, x, u) <= tol
}

/// `max_i h_i(x, u)`, or `-inf` for an empty set.
pub fn max_violation<C: ConstraintSet + ?Sized>(cs: &C, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    cs.eval(x, u).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// No path constraints.
#[derive(Debug, Clone)]
pub struct Unconstrained {
    n_x: usize,
    n_u: usize,
}

impl Unconstrained {
    pub fn new(n_x: usize, n_u: usize) -> Self {
        Self { n_x, n_u }
    }
}

impl ConstraintSet for Unconstrained {
    fn n_x(&self) -> usize {
        self.n_x
    }
    fn n_u(&self) -> usize {
        self.n_u
    }
    fn n_h(&self) -> usize {
        0
    }
    fn eval(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Linearization {
        Linearization {
            jx: DMatrix::zeros(0, x.len()),
            ju: DMatrix::zeros(0, u.len()),
            residual: DVector::zeros(0),
        }
    }
    fn is_affine(&self) -> bool {
        true
    }
}

/// `cx x + cu u + d <= 0`.
#[derive(Debug, Clone)]
pub struct AffineConstraints {
    pub cx: DMatrix<f64>,
    pub cu: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl AffineConstraints {
    pub fn new(cx: DMatrix<f64>, cu: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if cu.nrows() != cx.nrows() {
            return Err(Error::dim("constraint input rows", cx.nrows(), cu.nrows()));
        }
        if d.len() != cx.nrows() {
            return Err(Error::dim("constraint offset", cx.nrows(), d.len()));
        }
        Ok(Self { cx, cu, d })
    }

    /// Element-wise bounds; infinite bounds produce no row.
    pub fn boxes(
        x_lo: &[f64],
        x_hi: &[f64],
        u_lo: &[f64],
        u_hi: &[f64],
    ) -> Result<Self> {
        if x_lo.len() != x_hi.len() {
            return Err(Error::dim("state bounds", x_lo.len(), x_hi.len()));
        }
        if u_lo.len() != u_hi.len() {
            return Err(Error::dim("input bounds", u_lo.len(), u_hi.len()));
        }
        let (n_x, n_u) = (x_lo.len(), u_lo.len());
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..n_x {
            if x_hi[i].is_finite() {
                rows.push((i, 1.0, -x_hi[i]));
            }
            if x_lo[i].is_finite() {
                rows.push((i, -1.0, x_lo[i]));
            }
        }
        for i in 0..n_u {
            if u_hi[i].is_finite() {
                rows.push((n_x + i, 1.0, -u_hi[i]));
            }
            if u_lo[i].is_finite() {
                rows.push((n_x + i, -1.0, u_lo[i]));
            }
        }
        let mut cx = DMatrix::zeros(rows.len(), n_x);
        let mut cu = DMatrix::zeros(rows.len(), n_u);
        let mut d = DVector::zeros(rows.len());
        for (r, &(col, sign, off)) in rows.iter().enumerate() {
            if col < n_x {
                cx[(r, col)] = sign;
            } else {
                cu[(r, col - n_x)] = sign;
            }
            d[r] = off;
        }
        Self::new(cx, cu, d)
    }
}

impl ConstraintSet for AffineConstraints {
    fn n_x(&self) -> usize {
        self.cx.ncols()
    }
    fn n_u(&self) -> usize {
        self.cu.ncols()
    }
    fn n_h(&self) -> usize {
        self.d.len()
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.cx * x + &self.cu * u + &self.d
    }
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Linearization {
        Linearization {
            jx: self.cx.clone(),
            ju: self.cu.clone(),
            residual: self.eval(x, u),
        }
    }
    fn is_affine(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn double_integrator(ts: f64) -> LtvModel {
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = ts;
        a[(1, 3)] = ts;
        let mut b = DMatrix::zeros(4, 2);
        b[(0, 0)] = 0.5 * ts * ts;
        b[(1, 1)] = 0.5 * ts * ts;
        b[(2, 0)] = ts;
        b[(3, 1)] = ts;
        LtvModel::time_invariant(a, b, ts).unwrap()
    }

    #[test]
    fn step_examples() {
        let m = double_integrator(0.03);
        let z = m.step(0, &DVector::zeros(4), &DVector::zeros(2)).unwrap();
        assert_eq!(z, DVector::zeros(4));

        let next = m
            .step(3, &DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]), &DVector::zeros(2))
            .unwrap();
        assert_eq!(next, DVector::from_vec(vec![0.03, 0.03, 1.0, 1.0]));

        let id = LtvModel::time_invariant(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), 1.0).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(id.step(0, &x, &DVector::zeros(1)).unwrap(), x);
    }

    #[test]
    fn step_rejects_bad_dimensions() {
        let m = double_integrator(0.03);
        let err = m.step(0, &DVector::zeros(3), &DVector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(m.step(0, &DVector::zeros(4), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn model_rejects_nonpositive_ts() {
        assert!(LtvModel::time_invariant(DMatrix::identity(1, 1), DMatrix::identity(1, 1), 0.0).is_err());
    }

    #[test]
    fn time_grid_formula() {
        let g = TimeGrid::new(167, 5.01, 0.03, 10);
        assert_eq!(g.time(167), 5.01);
        assert_eq!(g.time(170), 5.01 + 3.0 * 0.03);
        assert_eq!(g.end(), 177);
        assert_eq!(g.window(170, 2).time(171), g.time(171));
    }

    #[test]
    fn box_feasibility() {
        let v = 1.5 * std::f64::consts::PI;
        let inf = f64::INFINITY;
        let cs = AffineConstraints::boxes(&[-inf, -inf, -v, -v], &[inf, inf, v, v], &[-inf; 2], &[inf; 2]).unwrap();
        assert_eq!(cs.n_h(), 4);
        let u = DVector::zeros(2);
        assert!(check_feasible(&cs, &DVector::zeros(4), &u, FEASIBILITY_TOL));
        let x = DVector::from_vec(vec![0.0, 0.0, 4.72, 0.0]);
        assert!(!check_feasible(&cs, &x, &u, FEASIBILITY_TOL));
        let x = DVector::from_vec(vec![0.0, 0.0, v, 0.0]);
        assert!(check_feasible(&cs, &x, &u, 1e-9));
    }

    struct Circle;
    impl ConstraintSet for Circle {
        fn n_x(&self) -> usize {
            2
        }
        fn n_u(&self) -> usize {
            1
        }
        fn n_h(&self) -> usize {
            1
        }
        fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, x[0] * x[0] + x[1].sin() * u[0] - 1.0)
        }
    }

    #[test]
    fn affine_linearization_is_exact() {
        let cs = AffineConstraints::new(
            DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]),
            DMatrix::from_row_slice(2, 1, &[4.0, -1.0]),
            DVector::from_vec(vec![0.3, -0.7]),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.2, -1.0]);
        let u = DVector::from_vec(vec![0.9]);
        let lin = cs.linearize(&x, &u);
        let dx = DVector::from_vec(vec![3.0, 5.0]);
        let du = DVector::from_vec(vec![-2.0]);
        let pred = &lin.residual + &lin.jx * &dx + &lin.ju * &du;
        let actual = cs.eval(&(&x + &dx), &(&u + &du));
        assert!((pred - actual).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn step_is_linear(x1 in prop::collection::vec(-10.0..10.0f64, 4),
                          x2 in prop::collection::vec(-10.0..10.0f64, 4),
                          u1 in prop::collection::vec(-10.0..10.0f64, 2),
                          u2 in prop::collection::vec(-10.0..10.0f64, 2),
                          k in 0usize..1000) {
            let m = double_integrator(0.05);
            let (x1, x2) = (DVector::from_vec(x1), DVector::from_vec(x2));
            let (u1, u2) = (DVector::from_vec(u1), DVector::from_vec(u2));
            let lhs = m.step(k, &(&x1 + &x2), &(&u1 + &u2)).unwrap();
            let rhs = m.step(k, &x1, &u1).unwrap() + m.step(k, &x2, &u2).unwrap();
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn fd_linearization_second_order(x0 in -1.0..1.0f64, x1 in -1.0..1.0f64, u0 in -1.0..1.0f64,
                                         dir in prop::collection::vec(-1.0..1.0f64, 3),
                                         scale in 1e-6..1e-3f64) {
            let cs = Circle;
            let x = DVector::from_vec(vec![x0, x1]);
            let u = DVector::from_vec(vec![u0]);
            let lin = cs.linearize(&x, &u);
            let d = DVector::from_vec(dir).normalize() * scale;
            let dx = DVector::from_vec(vec![d[0], d[1]]);
            let du = DVector::from_vec(vec![d[2]]);
            let pred = &lin.jx * &dx + &lin.ju * &du;
            let actual = cs.eval(&(&x + &dx), &(&u + &du)) - cs.eval(&x, &u);
            // Hessian entries of the test function are bounded by 2.
            prop_assert!((pred - actual).amax() <= 4.0 * scale * scale + 1e-9);
        }
    }
}
