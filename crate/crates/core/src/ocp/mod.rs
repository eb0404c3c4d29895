//! Finite-horizon LTV optimal control problems.
//!
//! ```text
//! min  sum_{n<M} q(xi_n, nu_n, t_n) + p(xi_M, t_M)
//! s.t. xi_0 = x_init,  xi_{n+1} = A_n xi_n + B_n nu_n,  h(xi_n, nu_n) <= 0
//! ```
//!
//! Multipliers use the Lagrangian
//! `lam_0'(xi_0 - x_init) + sum lam_{n+1}'(xi_{n+1} - f_n) + sum mu_n' h_n`,
//! so `lam_M = -grad p(xi_M)` at an optimum and the value function has
//! `dV/dx_init = -lam_0`.

pub(crate) mod ipm;
pub(crate) mod riccati;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::cost::{min_eigenvalue, stack, QuadForm, StageCost};
use crate::error::{Error, Result};
use crate::ltv::{ConstraintSet, LtvModel, TimeGrid};
use crate::reference::Reference;
use ipm::{EllipsoidRow, IpmSettings, QpStage, StructuredQp};

/// Largest KKT residual an accepted solution may carry.
pub const KKT_TOL: f64 = 1e-8;

/// How the last state is treated.
#[derive(Debug, Clone)]
pub enum TerminalMode {
    CostOnly,
    /// `(x_M - center)' shape (x_M - center) <= level`.
    Ellipsoid {
        center: DVector<f64>,
        shape: DMatrix<f64>,
        level: f64,
    },
    /// The ellipsoid with its violation priced at `weight` per unit instead of enforced.
    ExactPenalty {
        center: DVector<f64>,
        shape: DMatrix<f64>,
        level: f64,
        weight: f64,
    },
}

impl TerminalMode {
    fn row(&self) -> Option<EllipsoidRow> {
        match self {
            TerminalMode::CostOnly => None,
            TerminalMode::Ellipsoid { center, shape, level } => Some(EllipsoidRow {
                center: center.clone(),
                shape: shape.clone(),
                level: *level,
                penalty: None,
            }),
            TerminalMode::ExactPenalty {
                center,
                shape,
                level,
                weight,
            } => Some(EllipsoidRow {
                center: center.clone(),
                shape: shape.clone(),
                level: *level,
                penalty: Some(*weight),
            }),
        }
    }

    /// `(x - center)' shape (x - center) - level`, or `None` without a terminal set.
    pub fn ellipsoid_value(&self, x: &DVector<f64>) -> Option<f64> {
        self.row().map(|r| r.value(x))
    }

    pub fn penalty_weight(&self) -> Option<f64> {
        match self {
            TerminalMode::ExactPenalty { weight, .. } => Some(*weight),
            _ => None,
        }
    }
}

#[derive(Clone)]
pub struct OcpProblem {
    pub model: LtvModel,
    pub cost: Arc<dyn StageCost>,
    pub constraints: Arc<dyn ConstraintSet>,
    /// Stage `n` of the horizon is global step `grid.k0 + n`; `grid.len` is `M`.
    pub grid: TimeGrid,
    pub x_init: DVector<f64>,
    pub terminal: TerminalMode,
}

impl std::fmt::Debug for OcpProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OcpProblem")
            .field("model", &self.model)
            .field("grid", &self.grid)
            .field("x_init", &self.x_init)
            .field("terminal", &self.terminal)
            .finish()
    }
}

impl OcpProblem {
    pub fn new(
        model: LtvModel,
        cost: Arc<dyn StageCost>,
        constraints: Arc<dyn ConstraintSet>,
        grid: TimeGrid,
        x_init: DVector<f64>,
        terminal: TerminalMode,
    ) -> Result<Self> {
        let (nx, nu) = (model.n_x(), model.n_u());
        if grid.len == 0 {
            return Err(Error::Rejected("horizon must be at least 1".into()));
        }
        if x_init.len() != nx {
            return Err(Error::dim("initial state", nx, x_init.len()));
        }
        if cost.n_x() != nx || cost.n_u() != nu {
            return Err(Error::dim("cost dimensions", nx + nu, cost.n_x() + cost.n_u()));
        }
        if constraints.n_x() != nx || constraints.n_u() != nu {
            return Err(Error::dim(
                "constraint dimensions",
                nx + nu,
                constraints.n_x() + constraints.n_u(),
            ));
        }
        match &terminal {
            TerminalMode::CostOnly => {}
            TerminalMode::Ellipsoid { center, shape, level }
            | TerminalMode::ExactPenalty {
                center, shape, level, ..
            } => {
                if center.len() != nx {
                    return Err(Error::dim("terminal center", nx, center.len()));
                }
                if shape.shape() != (nx, nx) {
                    return Err(Error::dim("terminal shape", nx, shape.nrows()));
                }
                if !(min_eigenvalue(shape) > 0.0) {
                    return Err(Error::IllPosed("terminal shape must be positive definite".into()));
                }
                if !(*level > 0.0) {
                    return Err(Error::Rejected(format!("terminal level must be positive, got {level}")));
                }
            }
        }
        if let Some(w) = terminal.penalty_weight() {
            if !(w > 0.0) {
                return Err(Error::Rejected(format!("penalty weight must be positive, got {w}")));
            }
        }
        Ok(Self {
            model,
            cost,
            constraints,
            grid,
            x_init,
            terminal,
        })
    }

    pub fn horizon(&self) -> usize {
        self.grid.len
    }

    pub fn with_x_init(&self, x_init: DVector<f64>) -> Result<Self> {
        Self::new(
            self.model.clone(),
            self.cost.clone(),
            self.constraints.clone(),
            self.grid,
            x_init,
            self.terminal.clone(),
        )
    }

    pub fn with_cost(&self, cost: Arc<dyn StageCost>) -> Result<Self> {
        Self::new(
            self.model.clone(),
            cost,
            self.constraints.clone(),
            self.grid,
            self.x_init.clone(),
            self.terminal.clone(),
        )
    }

    pub fn with_terminal(&self, terminal: TerminalMode) -> Result<Self> {
        Self::new(
            self.model.clone(),
            self.cost.clone(),
            self.constraints.clone(),
            self.grid,
            self.x_init.clone(),
            terminal,
        )
    }

    pub fn with_constraints(&self, constraints: Arc<dyn ConstraintSet>) -> Result<Self> {
        Self::new(
            self.model.clone(),
            self.cost.clone(),
            constraints,
            self.grid,
            self.x_init.clone(),
            self.terminal.clone(),
        )
    }

    /// Total cost of a trajectory, including the penalty on terminal-set violation.
    pub fn objective(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<f64> {
        let m = self.horizon();
        let mut total = 0.0;
        for n in 0..m {
            let k = self.grid.k0 + n;
            total += self.cost.stage_value(k, self.grid.time(k), &states[n], &inputs[n])?;
        }
        let k = self.grid.k0 + m;
        total += self.cost.terminal_value(k, self.grid.time(k), &states[m])?;
        if let (Some(w), Some(g)) = (self.terminal.penalty_weight(), self.terminal.ellipsoid_value(&states[m])) {
            total += w * g.max(0.0);
        }
        Ok(total)
    }

    /// Sum of the absolute values of every term entering [`OcpProblem::objective`];
    /// rounding in the objective is a small multiple of `EPSILON` times this.
    fn objective_scale(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<f64> {
        fn mag(q: &QuadForm, z: &DVector<f64>) -> f64 {
            (0.5 * z.dot(&(&q.hess * z))).abs() + q.grad.dot(z).abs() + q.constant.abs()
        }
        let m = self.horizon();
        let mut total = 0.0;
        for n in 0..m {
            let k = self.grid.k0 + n;
            total += mag(&self.cost.stage(k, self.grid.time(k))?, &stack(&states[n], &inputs[n]));
        }
        let k = self.grid.k0 + m;
        total += mag(&self.cost.terminal(k, self.grid.time(k))?, &states[m]);
        Ok(total)
    }

    fn structured_qp(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Result<StructuredQp> {
        let m = self.horizon();
        let mut stages = Vec::with_capacity(m);
        for n in 0..m {
            let k = self.grid.k0 + n;
            let (a, b) = self.model.matrices(k);
            let cost = self.cost.stage(k, self.grid.time(k))?;
            let lin = self.constraints.linearize(&xs[n], &us[n]);
            let mut g = DMatrix::zeros(lin.residual.len(), xs[n].len() + us[n].len());
            g.columns_mut(0, xs[n].len()).copy_from(&lin.jx);
            g.columns_mut(xs[n].len(), us[n].len()).copy_from(&lin.ju);
            let c = &lin.residual - &g * stack(&xs[n], &us[n]);
            stages.push(QpStage { a, b, cost, g, c });
        }
        let k = self.grid.k0 + m;
        Ok(StructuredQp {
            stages,
            terminal_cost: self.cost.terminal(k, self.grid.time(k))?,
            ellipsoid: self.terminal.row(),
            x_init: self.x_init.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// `lam[0]` prices the initial-state row, `lam[n+1]` the dynamics row of stage `n`.
    pub lam: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    /// Multiplier of the terminal ellipsoid row (zero without one).
    pub terminal_mu: f64,
    /// Terminal-set violation absorbed by the exact penalty.
    pub slack: f64,
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    /// `max(0, max_i h_i)` of the nonlinear constraints along the solution.
    pub constraint_violation: f64,
}

impl OcpSolution {
    /// Rows with `|h| <= 1e-9` or `mu > 1e-9` at each stage.
    pub fn active_set(&self, prob: &OcpProblem) -> Vec<Vec<usize>> {
        self.states
            .iter()
            .zip(&self.inputs)
            .zip(&self.mu)
            .map(|((x, u), mu)| {
                let h = prob.constraints.eval(x, u);
                (0..h.len()).filter(|&i| h[i].abs() <= 1e-9 || mu[i] > 1e-9).collect()
            })
            .collect()
    }
}

/// Components of the first-order optimality conditions, each as an infinity norm.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// Assemble the KKT conditions of `prob` at `sol` from scratch: cost gradients,
/// model matrices and constraint Jacobians are all re-evaluated.
pub fn kkt_residual(prob: &OcpProblem, sol: &OcpSolution) -> Result<KktReport> {
    let m = prob.horizon();
    let nx = prob.model.n_x();
    if sol.states.len() != m + 1 || sol.inputs.len() != m || sol.lam.len() != m + 1 || sol.mu.len() != m {
        return Err(Error::Contract("solution does not match the problem horizon".into()));
    }
    let mut rep = KktReport {
        primal: (&sol.states[0] - &prob.x_init).amax(),
        ..Default::default()
    };
    for n in 0..m {
        let k = prob.grid.k0 + n;
        let (x, u, mu) = (&sol.states[n], &sol.inputs[n], &sol.mu[n]);
        let (a, b) = prob.model.matrices(k);
        let z = stack(x, u);
        let grad = prob.cost.stage(k, prob.grid.time(k))?.gradient(&z);
        let lin = prob.constraints.linearize(x, u);
        let gx = &grad.rows(0, nx) + &sol.lam[n] - a.transpose() * &sol.lam[n + 1] + lin.jx.transpose() * mu;
        let gu = grad.rows(nx, u.len()) - b.transpose() * &sol.lam[n + 1] + lin.ju.transpose() * mu;
        rep.stationarity = rep.stationarity.max(gx.amax()).max(gu.amax());
        let defect = &sol.states[n + 1] - a * x - b * u;
        rep.primal = rep.primal.max(defect.amax());
        for (hi, mi) in lin.residual.iter().zip(mu.iter()) {
            rep.primal = rep.primal.max(hi.max(0.0));
            rep.dual = rep.dual.max((-mi).max(0.0));
            rep.complementarity = rep.complementarity.max((hi * mi).abs());
        }
    }
    let k = prob.grid.k0 + m;
    let xm = &sol.states[m];
    let mut gm = prob.cost.terminal(k, prob.grid.time(k))?.gradient(xm) + &sol.lam[m];
    if let Some(row) = prob.terminal.row() {
        gm += row.gradient(xm) * sol.terminal_mu;
        let sigma = if row.penalty.is_some() { sol.slack } else { 0.0 };
        let g = row.value(xm) - sigma;
        rep.primal = rep.primal.max(g.max(0.0)).max((-sigma).max(0.0));
        rep.dual = rep.dual.max((-sol.terminal_mu).max(0.0));
        rep.complementarity = rep.complementarity.max((g * sol.terminal_mu).abs());
        if let Some(w) = row.penalty {
            // The multiplier of `sigma >= 0` is `w - mu_e`.
            let mu_sigma = w - sol.terminal_mu;
            rep.dual = rep.dual.max((-mu_sigma).max(0.0));
            rep.complementarity = rep.complementarity.max((mu_sigma * sigma).abs());
        }
    }
    rep.stationarity = rep.stationarity.max(gm.amax());
    Ok(rep)
}

fn assemble(
    prob: &OcpProblem,
    raw: ipm::IpmSolution,
    iterations: usize,
) -> Result<OcpSolution> {
    let (terminal_mu, slack) = raw
        .terminal
        .as_ref()
        .map(|t| (t.mu_e, t.sigma))
        .unwrap_or((0.0, 0.0));
    let mut sol = OcpSolution {
        grid: prob.grid,
        states: raw.x,
        inputs: raw.u,
        lam: raw.lam,
        mu: raw.mu,
        terminal_mu,
        slack,
        kkt_residual: 0.0,
        objective: 0.0,
        iterations,
        constraint_violation: 0.0,
    };
    // The initial-state row is satisfied exactly by construction.
    sol.states[0] = prob.x_init.clone();
    sol.objective = prob.objective(&sol.states, &sol.inputs)?;
    sol.constraint_violation = sol
        .states
        .iter()
        .zip(&sol.inputs)
        .map(|(x, u)| crate::ltv::max_violation(prob.constraints.as_ref(), x, u).max(0.0))
        .fold(0.0, f64::max);
    sol.kkt_residual = kkt_residual(prob, &sol)?.max();
    Ok(sol)
}

fn accept(sol: OcpSolution) -> Result<OcpSolution> {
    if sol.kkt_residual <= KKT_TOL {
        Ok(sol)
    } else {
        Err(Error::NotConverged {
            iterations: sol.iterations,
            residual: sol.kkt_residual,
            best: Some(Box::new(sol)),
        })
    }
}

/// Solve an OCP whose path constraints are affine.
pub fn solve_qp(prob: &OcpProblem) -> Result<OcpSolution> {
    if !prob.constraints.is_affine() {
        return Err(Error::Rejected(
            "solve_qp needs affine constraints; use solve_sqp for nonlinear ones".into(),
        ));
    }
    solve_qp_from(prob, None)
}

fn solve_qp_from(prob: &OcpProblem, guess: Option<(&[DVector<f64>], &[DVector<f64>])>) -> Result<OcpSolution> {
    let m = prob.horizon();
    let (nx, nu) = (prob.model.n_x(), prob.model.n_u());
    let zeros_x = vec![DVector::zeros(nx); m + 1];
    let zeros_u = vec![DVector::zeros(nu); m];
    let (lx, lu) = guess.unwrap_or((&zeros_x, &zeros_u));
    let qp = prob.structured_qp(lx, lu)?;
    let raw = ipm::solve(&qp, &IpmSettings::default(), guess)?;
    let iterations = raw.iterations;
    accept(assemble(prob, raw, iterations)?)
}

fn l1_merit(prob: &OcpProblem, xs: &[DVector<f64>], us: &[DVector<f64>], nu_pen: f64) -> Result<f64> {
    let mut viol = 0.0;
    for (x, u) in xs.iter().zip(us) {
        viol += prob.constraints.eval(x, u).iter().map(|h| h.max(0.0)).sum::<f64>();
    }
    if prob.terminal.penalty_weight().is_none() {
        if let Some(g) = prob.terminal.ellipsoid_value(&xs[xs.len() - 1]) {
            viol += g.max(0.0);
        }
    }
    Ok(prob.objective(xs, us)? + nu_pen * viol)
}

fn blend(a: &[DVector<f64>], b: &[DVector<f64>], alpha: f64) -> Vec<DVector<f64>> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * alpha).collect()
}

fn max_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Sequential QP on the linearized path constraints, globalized by an l1 merit
/// backtracking search.
pub fn solve_sqp(prob: &OcpProblem, max_iter: usize, tol: f64) -> Result<OcpSolution> {
    solve_sqp_from(prob, None, max_iter, tol)
}

/// [`solve_sqp`] starting from a primal guess `(states, inputs)`.
pub fn solve_sqp_from(
    prob: &OcpProblem,
    guess: Option<(&[DVector<f64>], &[DVector<f64>])>,
    max_iter: usize,
    tol: f64,
) -> Result<OcpSolution> {
    if prob.constraints.is_affine() {
        let mut sol = solve_qp_from(prob, guess)?;
        sol.iterations = 1;
        return Ok(sol);
    }
    let m = prob.horizon();
    // Only the inputs of a guess are used: the merit function does not price dynamics
    // residuals, so iterates are rolled out to satisfy the dynamics exactly.
    let mut us = match guess {
        Some((gx, gu)) if gx.len() == m + 1 && gu.len() == m => gu.to_vec(),
        _ => {
            let free = prob.with_constraints(Arc::new(crate::ltv::Unconstrained::new(
                prob.model.n_x(),
                prob.model.n_u(),
            )))?;
            let zx = vec![DVector::zeros(prob.model.n_x()); m + 1];
            let zu = vec![DVector::zeros(prob.model.n_u()); m];
            let qp = free.structured_qp(&zx, &zu)?;
            let raw = ipm::solve(&qp, &IpmSettings::default(), None)?;
            raw.u
        }
    };
    let mut xs = prob.model.rollout(prob.grid.k0, &prob.x_init, &us)?;

    let mut nu_pen: f64 = 1.0;
    let mut best: Option<OcpSolution> = None;
    let mut last_step = f64::INFINITY;
    for iter in 1..=max_iter {
        let qp = prob.structured_qp(&xs, &us)?;
        let raw = ipm::solve(&qp, &IpmSettings::default(), Some((&xs, &us)))?;
        let step = max_diff(&raw.x, &xs).max(max_diff(&raw.u, &us));
        let mu_max = raw.mu.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let mu_term = raw.terminal.as_ref().map(|t| t.mu_e).unwrap_or(0.0);
        nu_pen = nu_pen.max(1.1 * mu_max.max(mu_term) + 1e-3);

        let phi0 = l1_merit(prob, &xs, &us, nu_pen)?;
        let noise = 1e3 * f64::EPSILON * (1.0 + prob.objective_scale(&xs, &us)?);
        let mut alpha = 1.0;
        // Steps below tolerance are not line-searched: the merit change is rounding.
        let mut accepted = step <= tol;
        for _ in 0..=30 {
            if accepted {
                break;
            }
            let xt = blend(&xs, &raw.x, alpha);
            let ut = blend(&us, &raw.u, alpha);
            if l1_merit(prob, &xt, &ut, nu_pen)? <= phi0 + noise {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            alpha = 1.0;
        }

        let mut cand = raw.clone();
        cand.x = blend(&xs, &raw.x, alpha);
        cand.u = blend(&us, &raw.u, alpha);
        xs = cand.x.clone();
        us = cand.u.clone();
        let sol = assemble(prob, cand, iter)?;
        last_step = step * alpha;
        let converged = alpha == 1.0
            && step <= tol
            && sol.constraint_violation <= tol
            && sol.kkt_residual <= KKT_TOL;
        let full_kkt = alpha == 1.0 && sol.kkt_residual <= KKT_TOL.min(tol) && sol.constraint_violation <= tol;
        if converged || full_kkt {
            return Ok(sol);
        }
        if best.as_ref().map_or(true, |b| sol.kkt_residual < b.kkt_residual) {
            best = Some(sol);
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: best.as_ref().map_or(last_step, |b| b.kkt_residual),
        best: best.map(Box::new),
    })
}

/// Long-horizon approximation of the infinite-horizon OCP that turns an
/// infeasible reference into the dynamics-consistent one.
///
/// The reference must be at rest over the last tenth of the grid so that the
/// truncated tail does not bias the solution.
pub fn solve_reference_ocp(
    model: &LtvModel,
    cost: Arc<dyn StageCost>,
    constraints: Arc<dyn ConstraintSet>,
    reference: &dyn Reference,
    grid: TimeGrid,
    x_init: DVector<f64>,
) -> Result<OcpSolution> {
    let m = grid.len;
    if m == 0 {
        return Err(Error::Rejected("horizon must be at least 1".into()));
    }
    let tail = (m / 10).max(1);
    let (x_end, u_end) = reference.eval(grid.time(grid.end()))?;
    for k in grid.end() - tail..grid.end() {
        let (x, u) = reference.eval(grid.time(k))?;
        if (&x - &x_end).amax() > 1e-12 || (&u - &u_end).amax() > 1e-12 {
            return Err(Error::Rejected(format!(
                "reference is not stationary over the last {tail} steps of the horizon"
            )));
        }
    }
    let prob = OcpProblem::new(model.clone(), cost, constraints, grid, x_init, TerminalMode::CostOnly)?;
    solve_sqp(&prob, 50, 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::QuadraticStageCost;
    use crate::ltv::{AffineConstraints, Unconstrained};
    use crate::reference::ConstantReference;

    fn scalar_problem(constraints: Arc<dyn ConstraintSet>) -> OcpProblem {
        let model = LtvModel::time_invariant(DMatrix::identity(1, 1), DMatrix::identity(1, 1), 1.0).unwrap();
        let r = Arc::new(ConstantReference::new(DVector::zeros(1), DVector::zeros(1)));
        let cost = QuadraticStageCost::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1), r).unwrap();
        OcpProblem::new(
            model,
            Arc::new(cost),
            constraints,
            TimeGrid::new(0, 0.0, 1.0, 1),
            DVector::from_element(1, 1.0),
            TerminalMode::CostOnly,
        )
        .unwrap()
    }

    // Dense oracle for the scalar instance: z = (x0, u0, x1), multipliers (l0, l1).
    // Cost x0^2 + u0^2 + x1^2, rows x0 - 1 = 0 and x1 - x0 - u0 = 0.
    fn scalar_dense(u_fixed: Option<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut k = DMatrix::<f64>::zeros(6, 6);
        let mut rhs = DVector::zeros(6);
        for i in 0..3 {
            k[(i, i)] = 2.0;
        }
        let jac = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, -1.0, -1.0, 1.0]);
        k.view_mut((3, 0), (2, 3)).copy_from(&jac);
        k.view_mut((0, 3), (3, 2)).copy_from(&jac.transpose());
        rhs[3] = 1.0;
        if let Some(uf) = u_fixed {
            // Active row -u - 0.1 <= 0 treated as equality u = uf, multiplier mu.
            k[(5, 1)] = -1.0;
            k[(1, 5)] = -1.0;
            rhs[5] = -uf;
        } else {
            k[(5, 5)] = 1.0;
        }
        let s = k.lu().solve(&rhs).unwrap();
        (s.rows(0, 3).into_owned(), s.rows(3, 3).into_owned())
    }

    #[test]
    fn scalar_unconstrained_matches_dense_kkt() {
        let prob = scalar_problem(Arc::new(Unconstrained::new(1, 1)));
        let sol = solve_qp(&prob).unwrap();
        let (z, l) = scalar_dense(None);
        assert!((sol.inputs[0][0] + 0.5).abs() < 1e-10);
        assert!((sol.states[1][0] - 0.5).abs() < 1e-10);
        assert!((sol.inputs[0][0] - z[1]).abs() < 1e-10);
        assert!((sol.lam[0][0] - l[0]).abs() < 1e-9);
        assert!((sol.lam[1][0] - l[1]).abs() < 1e-9);
        assert!(sol.kkt_residual <= KKT_TOL);
    }

    #[test]
    fn scalar_active_bound_matches_dense_kkt() {
        let cs = AffineConstraints::boxes(&[f64::NEG_INFINITY], &[f64::INFINITY], &[-0.1], &[f64::INFINITY]).unwrap();
        let prob = scalar_problem(Arc::new(cs));
        let sol = solve_qp(&prob).unwrap();
        let (z, l) = scalar_dense(Some(-0.1));
        assert!((sol.inputs[0][0] + 0.1).abs() < 1e-9);
        assert!((sol.states[1][0] - z[2]).abs() < 1e-9);
        assert!(sol.mu[0][0] > 0.0);
        assert!((sol.mu[0][0] - l[2]).abs() < 1e-8);
        assert!((sol.lam[1][0] - l[1]).abs() < 1e-8);
    }

    #[test]
    fn lambda_at_horizon_end_is_minus_terminal_gradient() {
        let prob = scalar_problem(Arc::new(Unconstrained::new(1, 1)));
        let sol = solve_qp(&prob).unwrap();
        let grad = prob.cost.terminal(1, 1.0).unwrap().gradient(&sol.states[1]);
        assert!((sol.lam[1][0] + grad[0]).abs() < 1e-10);
    }

    #[test]
    fn rejects_nonaffine_in_qp_and_zero_horizon() {
        struct Circle;
        impl ConstraintSet for Circle {
            fn n_x(&self) -> usize {
                1
            }
            fn n_u(&self) -> usize {
                1
            }
            fn n_h(&self) -> usize {
                1
            }
            fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
                DVector::from_element(1, x[0] * x[0] + u[0] * u[0] - 4.0)
            }
        }
        let prob = scalar_problem(Arc::new(Circle));
        assert!(matches!(solve_qp(&prob), Err(Error::Rejected(_))));
        let sol = solve_sqp(&prob, 20, 1e-10).unwrap();
        assert!((sol.inputs[0][0] + 0.5).abs() < 1e-9);

        let mut bad = prob.grid;
        bad.len = 0;
        assert!(OcpProblem::new(
            prob.model.clone(),
            prob.cost.clone(),
            prob.constraints.clone(),
            bad,
            prob.x_init.clone(),
            TerminalMode::CostOnly
        )
        .is_err());
    }

    #[test]
    fn infeasible_bounds_are_reported() {
        // u >= 1 and u <= -1 cannot both hold.
        let cs = AffineConstraints::new(
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let prob = scalar_problem(Arc::new(cs));
        let err = solve_qp(&prob).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn exact_penalty_slack_behaviour() {
        // Scalar instance, terminal set |x_1| <= 0.1 (level 0.01) around 0.
        let base = scalar_problem(Arc::new(Unconstrained::new(1, 1)));
        let shape = DMatrix::identity(1, 1);
        let center = DVector::zeros(1);
        let hard = base
            .with_terminal(TerminalMode::Ellipsoid {
                center: center.clone(),
                shape: shape.clone(),
                level: 0.01,
            })
            .unwrap();
        let hs = solve_qp(&hard).unwrap();
        assert!((hs.states[1][0] - 0.1).abs() < 1e-8);
        assert!(hs.terminal_mu > 0.0);

        let relaxed = base
            .with_terminal(TerminalMode::ExactPenalty {
                center: center.clone(),
                shape: shape.clone(),
                level: 0.01,
                weight: 10.0 * hs.terminal_mu,
            })
            .unwrap();
        let rs = solve_qp(&relaxed).unwrap();
        assert!(rs.slack < 1e-8);
        assert!((rs.states[1][0] - hs.states[1][0]).abs() < 1e-7);

        let weak = base
            .with_terminal(TerminalMode::ExactPenalty {
                center,
                shape,
                level: 0.01,
                weight: 0.5 * hs.terminal_mu,
            })
            .unwrap();
        let ws = solve_qp(&weak).unwrap();
        assert!(ws.slack > 1e-4, "slack {}", ws.slack);
    }
}
