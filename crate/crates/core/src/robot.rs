//! Two-link planar robot benchmark.
//!
//! The rigid-body model is feedback-linearized through
//! `tau = C(q, qd) qd + g(q) + B(q) v`, which leaves a double integrator in each
//! joint with input `v`. The torque bound stays as a nonlinear constraint on `(x, v)`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::cost::{QuadraticStageCost, StageCost};
use crate::error::{Error, Result};
use crate::ltv::{ConstraintSet, Linearization, LtvModel, TimeGrid};
use crate::mpc::{ControllerMode, MpcConfig, MpcController, TerminalPolicy};
use crate::ocp::{solve_reference_ocp, OcpSolution};
use crate::reference::{robot_reference, Reference, SharedReference};
use crate::rotation::{RotatedCost, RotatedTerminal, RotationData};
use crate::simulator::{run_closed_loop, Certifier, ClosedLoopTrace};
use crate::terminal::{lqr_synthesis, max_feasible_level, LqrSolution, TerminalIngredients, TerminalSampler};

pub const TORQUE_LIMIT: f64 = 4000.0;
pub const VELOCITY_LIMIT: f64 = 1.5 * PI;

/// Inertia, Coriolis and gravity terms of the manipulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct RobotParams;

impl RobotParams {
    pub fn inertia(&self, q: &Vector2<f64>) -> Matrix2<f64> {
        let c2 = q[1].cos();
        let off = 23.5 + 25.0 * c2;
        Matrix2::new(200.0 + 50.0 * c2, off, off, 122.5)
    }

    pub fn coriolis(&self, q: &Vector2<f64>, qd: &Vector2<f64>) -> Matrix2<f64> {
        let s = 25.0 * q[1].sin();
        Matrix2::new(s * qd[0], s * (qd[0] + qd[1]), -s * qd[0], 0.0)
    }

    pub fn gravity(&self, q: &Vector2<f64>) -> Vector2<f64> {
        let c12 = (q[0] + q[1]).cos();
        Vector2::new(784.8 * q[0].cos() + 245.3 * c12, 245.3 * c12)
    }

    /// Joint torque realizing the joint acceleration `v`.
    pub fn torque(&self, x: &DVector<f64>, v: &DVector<f64>) -> Vector2<f64> {
        let (q, qd) = split(x);
        let v = Vector2::new(v[0], v[1]);
        self.coriolis(&q, &qd) * qd + self.gravity(&q) + self.inertia(&q) * v
    }

    /// Inverse of [`RobotParams::torque`] in `v`.
    pub fn recover_v(&self, x: &DVector<f64>, tau: &Vector2<f64>) -> Result<Vector2<f64>> {
        let (q, qd) = split(x);
        let b_inv = self
            .inertia(&q)
            .try_inverse()
            .ok_or_else(|| Error::IllPosed("inertia matrix is singular".into()))?;
        Ok(b_inv * (tau - self.coriolis(&q, &qd) * qd - self.gravity(&q)))
    }

    /// `(d tau / dx, d tau / dv)`.
    pub fn torque_jacobians(&self, x: &DVector<f64>, v: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (q, qd) = split(x);
        let (s1, s2, c2) = (q[0].sin(), q[1].sin(), q[1].cos());
        let s12 = (q[0] + q[1]).sin();
        let (a, b) = (qd[0], qd[1]);
        let quad = a * a + a * b + b * b;
        let mut jx = DMatrix::zeros(2, 4);
        jx[(0, 0)] = -784.8 * s1 - 245.3 * s12;
        jx[(0, 1)] = 25.0 * c2 * quad - 245.3 * s12 - 50.0 * s2 * v[0] - 25.0 * s2 * v[1];
        jx[(0, 2)] = 25.0 * s2 * (2.0 * a + b);
        jx[(0, 3)] = 25.0 * s2 * (a + 2.0 * b);
        jx[(1, 0)] = -245.3 * s12;
        jx[(1, 1)] = -25.0 * c2 * a * a - 245.3 * s12 - 25.0 * s2 * v[0];
        jx[(1, 2)] = -50.0 * s2 * a;
        let bm = self.inertia(&q);
        let ju = DMatrix::from_fn(2, 2, |i, j| bm[(i, j)]);
        (jx, ju)
    }
}

fn split(x: &DVector<f64>) -> (Vector2<f64>, Vector2<f64>) {
    (Vector2::new(x[0], x[1]), Vector2::new(x[2], x[3]))
}

/// Exact zero-order-hold discretization of two decoupled double integrators.
pub fn linearized_model(ts: f64) -> Result<LtvModel> {
    let mut a = DMatrix::identity(4, 4);
    a[(0, 2)] = ts;
    a[(1, 3)] = ts;
    let mut b = DMatrix::zeros(4, 2);
    b[(0, 0)] = 0.5 * ts * ts;
    b[(1, 1)] = 0.5 * ts * ts;
    b[(2, 0)] = ts;
    b[(3, 1)] = ts;
    LtvModel::time_invariant(a, b, ts)
}

/// `|tau(x, v)|_inf <= torque_limit` and `|qd|_inf <= velocity_limit`, as
/// eight rows: `tau1, -tau1, tau2, -tau2, qd1, -qd1, qd2, -qd2` minus their bounds.
#[derive(Debug, Clone, Copy)]
pub struct RobotConstraints {
    pub params: RobotParams,
    pub torque_limit: f64,
    pub velocity_limit: f64,
}

impl Default for RobotConstraints {
    fn default() -> Self {
        Self {
            params: RobotParams,
            torque_limit: TORQUE_LIMIT,
            velocity_limit: VELOCITY_LIMIT,
        }
    }
}

impl RobotConstraints {
    pub fn new(torque_limit: f64, velocity_limit: f64) -> Result<Self> {
        if !(torque_limit > 0.0 && velocity_limit > 0.0) {
            return Err(Error::Rejected("constraint bounds must be positive".into()));
        }
        Ok(Self {
            params: RobotParams,
            torque_limit,
            velocity_limit,
        })
    }
}

impl ConstraintSet for RobotConstraints {
    fn n_x(&self) -> usize {
        4
    }
    fn n_u(&self) -> usize {
        2
    }
    fn n_h(&self) -> usize {
        8
    }

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let tau = self.params.torque(x, u);
        let (l, v) = (self.torque_limit, self.velocity_limit);
        DVector::from_vec(vec![
            tau[0] - l,
            -tau[0] - l,
            tau[1] - l,
            -tau[1] - l,
            x[2] - v,
            -x[2] - v,
            x[3] - v,
            -x[3] - v,
        ])
    }

    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Linearization {
        let (tx, tu) = self.params.torque_jacobians(x, u);
        let mut jx = DMatrix::zeros(8, 4);
        let mut ju = DMatrix::zeros(8, 2);
        for i in 0..2 {
            jx.set_row(2 * i, &tx.row(i));
            jx.set_row(2 * i + 1, &(-tx.row(i)));
            ju.set_row(2 * i, &tu.row(i));
            ju.set_row(2 * i + 1, &(-tu.row(i)));
        }
        jx[(4, 2)] = 1.0;
        jx[(5, 2)] = -1.0;
        jx[(6, 3)] = 1.0;
        jx[(7, 3)] = -1.0;
        Linearization {
            jx,
            ju,
            residual: self.eval(x, u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotBenchConfig {
    pub ts: f64,
    pub horizon: usize,
    /// Length of the long-horizon problem that defines the feasible reference.
    pub long_horizon: usize,
    pub q: [f64; 4],
    pub r: [f64; 2],
    pub torque_limit: f64,
    pub velocity_limit: f64,
    pub x0: [f64; 4],
    pub k0: usize,
    /// Terminal level.
    pub alpha: f64,
}

impl Default for RobotBenchConfig {
    fn default() -> Self {
        Self {
            ts: 0.03,
            horizon: 10,
            long_horizon: 1200,
            q: [10.0, 10.0, 1.0, 1.0],
            r: [1.0, 1.0],
            torque_limit: TORQUE_LIMIT,
            velocity_limit: VELOCITY_LIMIT,
            x0: [-4.69, -1.62, 0.0, 0.0],
            k0: 167,
            alpha: 61.39,
        }
    }
}

impl RobotBenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Rejected(msg.to_string()));
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return bad("ts must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.long_horizon < 10 {
            return bad("long horizon must be at least 10");
        }
        if self.q.iter().chain(&self.r).any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad("weights must be positive");
        }
        if !(self.torque_limit > 0.0 && self.velocity_limit > 0.0) {
            return bad("constraint bounds must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("terminal level must be positive");
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return bad("initial state must be finite");
        }
        Ok(())
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.q))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.r))
    }

    pub fn x0_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.x0)
    }

    pub fn t0(&self) -> f64 {
        self.k0 as f64 * self.ts
    }
}

/// Everything the controllers need, built once from a [`RobotBenchConfig`].
pub struct RobotBench {
    pub config: RobotBenchConfig,
    pub model: LtvModel,
    pub constraints: Arc<RobotConstraints>,
    pub reference: SharedReference,
    pub cost: QuadraticStageCost,
    pub lqr: LqrSolution,
    pub reference_solution: OcpSolution,
    pub rotation: Arc<RotationData>,
}

impl RobotBench {
    pub fn build(config: RobotBenchConfig) -> Result<Self> {
        config.validate()?;
        let model = linearized_model(config.ts)?;
        let constraints = Arc::new(RobotConstraints::new(config.torque_limit, config.velocity_limit)?);
        let (a, b) = model.matrices(config.k0);
        let lqr = lqr_synthesis(&a, &b, &config.q_matrix(), &config.r_matrix())?;
        let reference: SharedReference = Arc::new(robot_reference(config.ts, config.k0 + config.long_horizon)?);
        let cost = QuadraticStageCost::block_diagonal(
            &config.q_matrix(),
            &config.r_matrix(),
            lqr.p.clone(),
            reference.clone(),
        )?;
        let grid = TimeGrid::absolute(config.k0, config.ts, config.long_horizon);
        let reference_solution = solve_reference_ocp(
            &model,
            Arc::new(cost.clone()),
            constraints.clone(),
            reference.as_ref(),
            grid,
            config.x0_vector(),
        )?;
        let rotation = Arc::new(RotationData::from_solution(&model, &reference_solution)?);
        Ok(Self {
            config,
            model,
            constraints,
            reference,
            cost,
            lqr,
            reference_solution,
            rotation,
        })
    }

    pub fn with_rotation(&self, rotation: Arc<RotationData>) -> Self {
        Self {
            config: self.config.clone(),
            model: self.model.clone(),
            constraints: self.constraints.clone(),
            reference: self.reference.clone(),
            cost: self.cost.clone(),
            lqr: self.lqr.clone(),
            reference_solution: self.reference_solution.clone(),
            rotation,
        }
    }

    /// The same bench tracking its own feasible reference, for which the
    /// multipliers vanish identically.
    pub fn with_feasible_reference(&self) -> Result<Self> {
        let yr: SharedReference = Arc::new(self.rotation.as_reference()?);
        let mut reference_solution = self.reference_solution.clone();
        for l in reference_solution.lam.iter_mut().chain(reference_solution.mu.iter_mut()) {
            l.fill(0.0);
        }
        Ok(Self {
            config: self.config.clone(),
            model: self.model.clone(),
            constraints: self.constraints.clone(),
            reference: yr.clone(),
            cost: self.cost.with_reference(yr),
            lqr: self.lqr.clone(),
            reference_solution,
            rotation: Arc::new(self.rotation.with_scaled_multipliers(0.0)),
        })
    }

    pub fn x0(&self) -> DVector<f64> {
        self.config.x0_vector()
    }

    /// Terminal ingredients centered on the infeasible reference at the configured level.
    pub fn terminal(&self) -> Result<TerminalIngredients> {
        TerminalIngredients::new(self.lqr.p.clone(), self.lqr.k.clone(), self.config.alpha, self.reference.clone())
    }

    /// Terminal ingredients centered on the feasible reference.
    pub fn feasible_terminal(&self) -> Result<TerminalIngredients> {
        let center: Arc<dyn Reference> = Arc::new(self.rotation.as_reference()?);
        self.terminal()?.with_center(center)
    }

    /// Rotated cost with the shifted terminal center.
    pub fn rotated_cost(&self) -> Result<RotatedCost> {
        let base: Arc<dyn StageCost> = Arc::new(self.cost.clone());
        RotatedCost::new(base, self.rotation.clone(), RotatedTerminal::ShiftedCenter(self.lqr.p.clone()))
    }

    /// Steps `k0 .. k0 + steps` at which terminal conditions are exercised by a
    /// closed loop of `steps` steps.
    pub fn terminal_grid(&self, steps: usize) -> Result<TimeGrid> {
        let len = steps + self.config.horizon;
        if len + 1 >= self.config.long_horizon {
            return Err(Error::Rejected(format!(
                "{steps} steps exceed the feasible reference of length {}",
                self.config.long_horizon
            )));
        }
        Ok(TimeGrid::absolute(self.config.k0, self.config.ts, len))
    }

    /// Largest level at which the terminal conditions hold on every sample, with
    /// the center on the feasible reference and rotated costs.
    pub fn terminal_level(&self, steps: usize, n_samples: usize, seed: u64) -> Result<f64> {
        let ti = self.feasible_terminal()?;
        let cost = self.rotated_cost()?;
        let grid = self.terminal_grid(steps)?;
        max_feasible_level(&ti, &self.model, &cost, self.constraints.as_ref(), &grid, n_samples, seed)
    }

    pub fn terminal_sampler<'a>(
        &'a self,
        ti: &'a TerminalIngredients,
        cost: &RotatedCost,
        steps: usize,
        n_samples: usize,
        seed: u64,
    ) -> Result<TerminalSampler<'a>> {
        let grid = self.terminal_grid(steps)?;
        TerminalSampler::new(ti, &self.model, cost, self.constraints.as_ref(), &grid, n_samples, seed)
    }

    fn mpc_config(&self, policy: TerminalPolicy) -> Result<MpcConfig> {
        MpcConfig::new(self.config.horizon, self.cost.clone(), self.terminal()?, policy)
    }

    /// Controller in `mode`. The practical one prices terminal-set violation, since
    /// the infeasible reference can leave the hard terminal set out of reach.
    pub fn controller(&self, mode: ControllerMode) -> Result<MpcController> {
        let constraints: Arc<dyn ConstraintSet> = self.constraints.clone();
        match mode {
            ControllerMode::Practical => {
                let hard = MpcController::practical(
                    self.model.clone(),
                    constraints.clone(),
                    self.mpc_config(TerminalPolicy::Hard)?,
                    Some(self.rotation.clone()),
                )?;
                let weight = hard.calibrate_penalty(&self.x0(), self.config.k0)?;
                MpcController::practical(
                    self.model.clone(),
                    constraints,
                    self.mpc_config(TerminalPolicy::Penalty(weight))?,
                    Some(self.rotation.clone()),
                )
            }
            _ => MpcController::build(
                mode,
                self.model.clone(),
                constraints,
                self.mpc_config(TerminalPolicy::Hard)?,
                self.rotation.clone(),
            ),
        }
    }

    /// Closed loop of `steps` steps from `(x0, k0)` with a rotated-ideal certifier.
    pub fn run(&self, mode: ControllerMode, steps: usize) -> Result<ClosedLoopTrace> {
        self.terminal_grid(steps)?;
        let mut ctrl = self.controller(mode)?;
        let mut cert = self.controller(ControllerMode::RotatedIdeal)?;
        run_closed_loop(
            &self.model,
            &mut ctrl,
            self.reference.as_ref(),
            &self.x0(),
            self.config.k0,
            steps,
            Some(Certifier { controller: &mut cert }),
        )
    }

    /// Practical and ideal closed loops from `(x0, k0)`.
    pub fn reproduce_figure_data(&self, steps: usize) -> Result<(ClosedLoopTrace, ClosedLoopTrace)> {
        Ok((self.run(ControllerMode::Practical, steps)?, self.run(ControllerMode::Ideal, steps)?))
    }
}

/// Default closed-loop length: 15 s after `k0`.
pub const DEFAULT_STEPS: usize = 500;
