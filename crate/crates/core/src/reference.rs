//! Time-parameterized reference trajectories and their dynamics infeasibility.
//!
//! A reference is a pair of functions of time `(r_x(t), r_u(t))`. Nothing forces it
//! to satisfy the model; [`infeasibility_profile`] measures by how much it does not.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ltv::{LtvModel, TimeGrid};

/// Slack allowed at the ends of a reference domain to absorb `t0 + k * ts` rounding.
const DOMAIN_SLACK: f64 = 1e-9;

pub trait Reference: Send + Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;

    /// Closed interval of valid times; either end may be infinite.
    fn domain(&self) -> (f64, f64);

    /// Evaluate without a domain check.
    fn eval_unchecked(&self, t: f64) -> (DVector<f64>, DVector<f64>);

    fn eval(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let (lo, hi) = self.domain();
        if !(t >= lo - DOMAIN_SLACK && t <= hi + DOMAIN_SLACK) {
            return Err(Error::Domain { t, lo, hi });
        }
        Ok(self.eval_unchecked(t))
    }
}

/// Pointwise evaluation of `reference` at every step of `grid`.
pub fn sample<R: Reference + ?Sized>(reference: &R, grid: &TimeGrid) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    grid.steps().map(|k| reference.eval(grid.time(k))).collect()
}

/// `eps_k = || r_x(t_{k+1}) - A_k r_x(t_k) - B_k r_u(t_k) ||_2` for every step of `grid`.
pub fn infeasibility_profile<R: Reference + ?Sized>(
    reference: &R,
    model: &LtvModel,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    if reference.n_x() != model.n_x() {
        return Err(Error::dim("reference state", model.n_x(), reference.n_x()));
    }
    if reference.n_u() != model.n_u() {
        return Err(Error::dim("reference input", model.n_u(), reference.n_u()));
    }
    let mut eps = Vec::with_capacity(grid.len);
    let (mut rx, mut ru) = reference.eval(grid.time(grid.k0))?;
    for k in grid.steps() {
        let (rx_next, ru_next) = reference.eval(grid.time(k + 1))?;
        let pred = model.step(k, &rx, &ru)?;
        eps.push((&rx_next - pred).norm());
        rx = rx_next;
        ru = ru_next;
    }
    Ok(eps)
}

/// Time-invariant reference.
#[derive(Debug, Clone)]
pub struct ConstantReference {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

impl ConstantReference {
    pub fn new(x: DVector<f64>, u: DVector<f64>) -> Self {
        Self { x, u }
    }
}

impl Reference for ConstantReference {
    fn n_x(&self) -> usize {
        self.x.len()
    }
    fn n_u(&self) -> usize {
        self.u.len()
    }
    fn domain(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
    fn eval_unchecked(&self, _t: f64) -> (DVector<f64>, DVector<f64>) {
        (self.x.clone(), self.u.clone())
    }
}

/// Values stored on a time grid, held constant between grid points.
///
/// Holds `states.len() == inputs.len() + 1`; the last input is repeated at the final
/// state so that every grid point has a full `(x, u)` pair.
#[derive(Debug, Clone)]
pub struct TabulatedReference {
    grid: TimeGrid,
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
}

impl TabulatedReference {
    pub fn new(grid: TimeGrid, states: Vec<DVector<f64>>, inputs: Vec<DVector<f64>>) -> Result<Self> {
        if states.len() != grid.len + 1 {
            return Err(Error::dim("tabulated states", grid.len + 1, states.len()));
        }
        if inputs.len() != grid.len || inputs.is_empty() {
            return Err(Error::dim("tabulated inputs", grid.len.max(1), inputs.len()));
        }
        Ok(Self { grid, states, inputs })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    fn index(&self, t: f64) -> usize {
        let i = ((t - self.grid.t0) / self.grid.ts).round();
        i.clamp(0.0, self.grid.len as f64) as usize
    }
}

impl Reference for TabulatedReference {
    fn n_x(&self) -> usize {
        self.states[0].len()
    }
    fn n_u(&self) -> usize {
        self.inputs[0].len()
    }
    fn domain(&self) -> (f64, f64) {
        (self.grid.t0, self.grid.time(self.grid.end()))
    }
    fn eval_unchecked(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let i = self.index(t);
        let u = self.inputs.get(i).unwrap_or_else(|| self.inputs.last().unwrap());
        (self.states[i].clone(), u.clone())
    }
}

/// A geometric path `p(theta)` with its first two derivatives.
pub trait Path: Send + Sync {
    fn dim(&self) -> usize;
    fn point(&self, theta: f64) -> DVector<f64>;
    fn tangent(&self, theta: f64) -> DVector<f64>;
    fn curvature(&self, theta: f64) -> DVector<f64>;
}

/// `p(theta) = (theta - pi/3, 5 sin(0.6 (theta - pi/3)))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RobotPath;

impl RobotPath {
    const SHIFT: f64 = std::f64::consts::FRAC_PI_3;
}

impl Path for RobotPath {
    fn dim(&self) -> usize {
        2
    }
    fn point(&self, theta: f64) -> DVector<f64> {
        let s = theta - Self::SHIFT;
        DVector::from_vec(vec![s, 5.0 * (0.6 * s).sin()])
    }
    fn tangent(&self, theta: f64) -> DVector<f64> {
        let s = theta - Self::SHIFT;
        DVector::from_vec(vec![1.0, 3.0 * (0.6 * s).cos()])
    }
    fn curvature(&self, theta: f64) -> DVector<f64> {
        let s = theta - Self::SHIFT;
        DVector::from_vec(vec![0.0, -1.8 * (0.6 * s).sin()])
    }
}

/// Path progress `theta(t)` with `theta' = v_ref / ||p'(theta)||`, where `v_ref = speed`
/// while `theta < theta_end` and zero afterwards.
///
/// Integrated with fixed-step RK4 on `substeps` knots per sampling period and
/// tabulated; off-knot queries take one partial RK4 step from the previous knot.
pub struct PathTimingLaw<P: Path> {
    path: P,
    theta0: f64,
    theta_end: f64,
    speed: f64,
    knot_dt: f64,
    table: Vec<f64>,
}

impl<P: Path> PathTimingLaw<P> {
    pub fn new(path: P, theta0: f64, theta_end: f64, speed: f64, ts: f64, substeps: usize, horizon: f64) -> Self {
        let knot_dt = ts / substeps as f64;
        let n = (horizon / knot_dt).ceil() as usize + 1;
        let mut law = Self {
            path,
            theta0,
            theta_end,
            speed,
            knot_dt,
            table: Vec::with_capacity(n + 1),
        };
        let mut theta = theta0;
        law.table.push(theta);
        for _ in 0..n {
            theta = law.rk4(theta, knot_dt);
            law.table.push(theta);
        }
        law
    }

    pub fn path(&self) -> &P {
        &self.path
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    fn rate(&self, theta: f64) -> f64 {
        if theta < self.theta_end {
            self.speed / self.path.tangent(theta).norm()
        } else {
            0.0
        }
    }

    fn rk4(&self, theta: f64, h: f64) -> f64 {
        if theta >= self.theta_end {
            return theta;
        }
        let k1 = self.rate(theta);
        let k2 = self.rate(theta + 0.5 * h * k1);
        let k3 = self.rate(theta + 0.5 * h * k2);
        let k4 = self.rate(theta + h * k3);
        let next = theta + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        next.min(self.theta_end)
    }

    pub fn theta(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.theta0;
        }
        let pos = t / self.knot_dt;
        let nearest = pos.round();
        if (pos - nearest).abs() < 1e-9 {
            let j = (nearest as usize).min(self.table.len() - 1);
            if j as f64 == nearest {
                return self.table[j];
            }
        }
        let j = (pos.floor() as usize).min(self.table.len() - 1);
        let dt = t - j as f64 * self.knot_dt;
        self.rk4(self.table[j], dt)
    }

    pub fn theta_dot(&self, t: f64) -> f64 {
        self.rate(self.theta(t))
    }

    /// Analytic derivative of `theta_dot`; zero where `v_ref` is zero.
    pub fn theta_ddot(&self, t: f64) -> f64 {
        let theta = self.theta(t);
        if theta >= self.theta_end {
            return 0.0;
        }
        let d1 = self.path.tangent(theta);
        let d2 = self.path.curvature(theta);
        let n2 = d1.norm_squared();
        -self.speed * self.speed * d1.dot(&d2) / (n2 * n2)
    }

    /// First time at which the tabulated progress reaches `theta_end`.
    pub fn arrival_time(&self) -> Option<f64> {
        self.table
            .iter()
            .position(|&th| th >= self.theta_end)
            .map(|j| j as f64 * self.knot_dt)
    }
}

/// `r_x = (p(theta), p'(theta) theta')`, `r_u = p'' theta'^2 + p' theta''`.
pub struct PathReference<P: Path> {
    law: PathTimingLaw<P>,
    t_max: f64,
}

impl<P: Path> PathReference<P> {
    pub fn new(law: PathTimingLaw<P>, t_max: f64) -> Self {
        Self { law, t_max }
    }

    pub fn law(&self) -> &PathTimingLaw<P> {
        &self.law
    }

    /// First step of `grid` at which the path end has been reached, if any.
    pub fn jump_step(&self, grid: &TimeGrid) -> Option<usize> {
        let end = self.law.theta_end;
        (grid.k0..=grid.end()).find(|&k| self.law.theta(grid.time(k)) >= end)
            .filter(|&k| k > 0 && self.law.theta(grid.time(k) - grid.ts) < end)
    }
}

impl<P: Path> Reference for PathReference<P> {
    fn n_x(&self) -> usize {
        2 * self.law.path.dim()
    }
    fn n_u(&self) -> usize {
        self.law.path.dim()
    }
    fn domain(&self) -> (f64, f64) {
        (0.0, self.t_max)
    }
    fn eval_unchecked(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let theta = self.law.theta(t);
        let d = self.law.path.dim();
        let (th_d, th_dd) = (self.law.rate(theta), self.law.theta_ddot(t));
        let d1 = self.law.path.tangent(theta);
        let d2 = self.law.path.curvature(theta);
        let mut x = DVector::zeros(2 * d);
        x.rows_mut(0, d).copy_from(&self.law.path.point(theta));
        x.rows_mut(d, d).copy_from(&(&d1 * th_d));
        let u = d2 * (th_d * th_d) + d1 * th_dd;
        (x, u)
    }
}

/// The robot benchmark reference: `theta(0) = -5.3`, unit joint-space speed until
/// `theta = 0`, then at rest. Domain is `[0, horizon_len * ts]`.
pub fn robot_reference(ts: f64, horizon_len: usize) -> Result<PathReference<RobotPath>> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::Rejected(format!("sampling time must be positive, got {ts}")));
    }
    let t_max = horizon_len as f64 * ts;
    let law = PathTimingLaw::new(RobotPath, -5.3, 0.0, 1.0, ts, 10, t_max);
    Ok(PathReference::new(law, t_max))
}

/// Shared handle to any reference.
pub type SharedReference = Arc<dyn Reference>;

/// Stack of `(x, u)` pairs as one matrix per component, convenient for export.
pub fn to_columns(samples: &[(DVector<f64>, DVector<f64>)]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = samples.len();
    let (nx, nu) = samples.first().map(|(x, u)| (x.len(), u.len())).unwrap_or((0, 0));
    let mut xs = DMatrix::zeros(n, nx);
    let mut us = DMatrix::zeros(n, nu);
    for (i, (x, u)) in samples.iter().enumerate() {
        xs.set_row(i, &x.transpose());
        us.set_row(i, &u.transpose());
    }
    (xs, us)
}
