//! Lagrangian rotation of tracking costs around the dynamics-consistent reference.
//!
//! Given the solution `y^r = (x^r, u^r)` of the long-horizon OCP and its dynamics
//! multipliers `lam^r`, the rotated costs are
//!
//! ```text
//! qbar(x,u,n)  = q(x,u,n) - q(y^r_n) + lam_n'(x - x^r_n) - lam_{n+1}'(f_n(x,u) - f_n(y^r_n))
//! pbar_r(x,n)  = p_r(x,n) - p_r(x^r_n,n) + lam_n'(x - x^r_n)
//! pbar_y(x,n)  = p_y(x,n) - p_y(x^r_n,n) + lam_n'(x - x^r_n),   p_y centered at ytilde_n
//! ```
//!
//! with `ytilde_n = x^r_n + 0.5 P^{-1} lam_n`, which makes `pbar_y(x,n) = (x - x^r_n)' P (x - x^r_n)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cost::{min_eigenvalue, stack, QuadForm, StageCost};
use crate::error::{Error, Result};
use crate::ltv::{ConstraintSet, LtvModel, TimeGrid, FEASIBILITY_TOL};
use crate::ocp::{kkt_residual, solve_sqp_from, OcpProblem, OcpSolution, TerminalMode, KKT_TOL};
use crate::reference::TabulatedReference;

/// The feasible reference with the multipliers of the OCP that produced it.
#[derive(Debug, Clone)]
pub struct RotationData {
    model: LtvModel,
    grid: TimeGrid,
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    lam: Vec<DVector<f64>>,
    mu: Vec<DVector<f64>>,
    source_kkt_residual: f64,
}

impl RotationData {
    /// Refuses solutions whose KKT residual exceeds the acceptance tolerance.
    pub fn from_solution(model: &LtvModel, sol: &OcpSolution) -> Result<Self> {
        if !(sol.kkt_residual <= KKT_TOL) {
            return Err(Error::Rejected(format!(
                "rotation needs a KKT residual <= {KKT_TOL:e}, got {:.3e}",
                sol.kkt_residual
            )));
        }
        Self::new(
            model.clone(),
            sol.grid,
            sol.states.clone(),
            sol.inputs.clone(),
            sol.lam.clone(),
            sol.mu.clone(),
            sol.kkt_residual,
        )
    }

    /// States are re-rolled from the inputs so that the dynamics hold to rounding.
    pub fn new(
        model: LtvModel,
        grid: TimeGrid,
        states: Vec<DVector<f64>>,
        inputs: Vec<DVector<f64>>,
        lam: Vec<DVector<f64>>,
        mu: Vec<DVector<f64>>,
        source_kkt_residual: f64,
    ) -> Result<Self> {
        let m = grid.len;
        if states.len() != m + 1 {
            return Err(Error::dim("reference states", m + 1, states.len()));
        }
        if inputs.len() != m {
            return Err(Error::dim("reference inputs", m, inputs.len()));
        }
        if lam.len() != m + 1 {
            return Err(Error::dim("multipliers", m + 1, lam.len()));
        }
        let rolled = model.rollout(grid.k0, &states[0], &inputs)?;
        let defect = rolled
            .iter()
            .zip(&states)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        if defect > FEASIBILITY_TOL {
            return Err(Error::Rejected(format!(
                "reference violates the dynamics by {defect:.3e}"
            )));
        }
        Ok(Self {
            model,
            grid,
            states: rolled,
            inputs,
            lam,
            mu,
            source_kkt_residual,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn model(&self) -> &LtvModel {
        &self.model
    }

    pub fn source_kkt_residual(&self) -> f64 {
        self.source_kkt_residual
    }

    fn offset(&self, k: usize, last: usize, what: &str) -> Result<usize> {
        if k < self.grid.k0 || k > self.grid.k0 + last {
            return Err(Error::Rejected(format!(
                "step {k} outside the {what} range [{}, {}]",
                self.grid.k0,
                self.grid.k0 + last
            )));
        }
        Ok(k - self.grid.k0)
    }

    pub fn x_r(&self, k: usize) -> Result<&DVector<f64>> {
        Ok(&self.states[self.offset(k, self.grid.len, "reference state")?])
    }

    pub fn u_r(&self, k: usize) -> Result<&DVector<f64>> {
        Ok(&self.inputs[self.offset(k, self.grid.len - 1, "reference input")?])
    }

    pub fn lam(&self, k: usize) -> Result<&DVector<f64>> {
        Ok(&self.lam[self.offset(k, self.grid.len, "multiplier")?])
    }

    pub fn mu(&self, k: usize) -> Result<&DVector<f64>> {
        Ok(&self.mu[self.offset(k, self.grid.len - 1, "multiplier")?])
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    /// Dynamics multipliers, one per state of the reference.
    pub fn lambdas(&self) -> &[DVector<f64>] {
        &self.lam
    }

    /// Path-constraint multipliers, one per input of the reference.
    pub fn multipliers(&self) -> &[DVector<f64>] {
        &self.mu
    }

    /// Same reference with every `lam` scaled; used to corrupt the data on purpose.
    pub fn with_scaled_multipliers(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for l in &mut out.lam {
            *l *= factor;
        }
        for m in &mut out.mu {
            *m *= factor;
        }
        out
    }

    /// `y^r` as a reference trajectory on the same clock.
    pub fn as_reference(&self) -> Result<TabulatedReference> {
        TabulatedReference::new(self.grid, self.states.clone(), self.inputs.clone())
    }
}

/// `ytilde_k = x^r_k + 0.5 P^{-1} lam_k`.
pub fn rotated_terminal_center(rot: &RotationData, p: &DMatrix<f64>, k: usize) -> Result<DVector<f64>> {
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IllPosed("terminal weight is not positive definite".into()))?;
    Ok(rot.x_r(k)? + chol.solve(rot.lam(k)?) * 0.5)
}

/// Which terminal cost a rotated objective uses.
#[derive(Debug, Clone)]
pub enum RotatedTerminal {
    /// `pbar_r`, built from the base terminal cost.
    Reference,
    /// `pbar_y`, built from `(x - ytilde)' P (x - ytilde)`.
    ShiftedCenter(DMatrix<f64>),
}

/// A base cost rotated with the multipliers in `rot`.
#[derive(Clone)]
pub struct RotatedCost {
    base: Arc<dyn StageCost>,
    rot: Arc<RotationData>,
    terminal: RotatedTerminal,
}

impl RotatedCost {
    pub fn new(base: Arc<dyn StageCost>, rot: Arc<RotationData>, terminal: RotatedTerminal) -> Result<Self> {
        if base.n_x() != rot.model.n_x() || base.n_u() != rot.model.n_u() {
            return Err(Error::dim("rotated cost", rot.model.n_x() + rot.model.n_u(), base.n_x() + base.n_u()));
        }
        if let RotatedTerminal::ShiftedCenter(p) = &terminal {
            if !(min_eigenvalue(p) > 0.0) {
                return Err(Error::IllPosed("terminal weight is not positive definite".into()));
            }
        }
        Ok(Self { base, rot, terminal })
    }

    pub fn rotation(&self) -> &Arc<RotationData> {
        &self.rot
    }

    pub fn base(&self) -> &Arc<dyn StageCost> {
        &self.base
    }

    pub fn terminal_kind(&self) -> &RotatedTerminal {
        &self.terminal
    }

    pub fn with_terminal(&self, terminal: RotatedTerminal) -> Result<Self> {
        Self::new(self.base.clone(), self.rot.clone(), terminal)
    }
}

impl StageCost for RotatedCost {
    fn n_x(&self) -> usize {
        self.base.n_x()
    }
    fn n_u(&self) -> usize {
        self.base.n_u()
    }

    fn stage(&self, k: usize, t: f64) -> Result<QuadForm> {
        let nx = self.n_x();
        let mut q = self.base.stage(k, t)?;
        let (xr, ur) = (self.rot.x_r(k)?, self.rot.u_r(k)?);
        let (lam_n, lam_next) = (self.rot.lam(k)?, self.rot.lam(k + 1)?);
        let (a, b) = self.rot.model.matrices(k);
        let zr = stack(xr, ur);
        let q_ref = q.eval(&zr);
        let f_ref = &a * xr + &b * ur;
        {
            let mut gx = q.grad.rows_mut(0, nx);
            gx += lam_n - a.transpose() * lam_next;
        }
        {
            let nu = ur.len();
            let mut gu = q.grad.rows_mut(nx, nu);
            gu -= b.transpose() * lam_next;
        }
        q.constant += -q_ref - lam_n.dot(xr) + lam_next.dot(&f_ref);
        Ok(q)
    }

    fn terminal(&self, k: usize, t: f64) -> Result<QuadForm> {
        let xr = self.rot.x_r(k)?;
        let lam = self.rot.lam(k)?;
        let mut p = match &self.terminal {
            RotatedTerminal::Reference => self.base.terminal(k, t)?,
            RotatedTerminal::ShiftedCenter(weight) => {
                QuadForm::centered(weight, &rotated_terminal_center(&self.rot, weight, k)?)
            }
        };
        let p_ref = p.eval(xr);
        p.grad += lam;
        p.constant += -p_ref - lam.dot(xr);
        Ok(p)
    }
}

/// Stage cost `q_r` with terminal cost centered at `ytilde`: the ideal formulation.
#[derive(Clone)]
pub struct IdealCost {
    base: Arc<dyn StageCost>,
    rot: Arc<RotationData>,
    p: DMatrix<f64>,
}

impl IdealCost {
    pub fn new(base: Arc<dyn StageCost>, rot: Arc<RotationData>, p: DMatrix<f64>) -> Result<Self> {
        if !(min_eigenvalue(&p) > 0.0) {
            return Err(Error::IllPosed("terminal weight is not positive definite".into()));
        }
        Ok(Self { base, rot, p })
    }
}

impl StageCost for IdealCost {
    fn n_x(&self) -> usize {
        self.base.n_x()
    }
    fn n_u(&self) -> usize {
        self.base.n_u()
    }
    fn stage(&self, k: usize, t: f64) -> Result<QuadForm> {
        self.base.stage(k, t)
    }
    fn terminal(&self, k: usize, _t: f64) -> Result<QuadForm> {
        Ok(QuadForm::centered(&self.p, &rotated_terminal_center(&self.rot, &self.p, k)?))
    }
}

fn time_of(rot: &RotationData, k: usize) -> f64 {
    rot.grid.time(k)
}

/// `qbar(x, u)` at global step `k`.
pub fn rotated_stage(rc: &RotatedCost, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<f64> {
    rc.stage_value(k, time_of(&rc.rot, k), x, u)
}

/// `pbar_y(x)` at global step `k`, using `P` from the cost's shifted terminal or `p`.
pub fn rotated_terminal(rc: &RotatedCost, p: &DMatrix<f64>, x: &DVector<f64>, k: usize) -> Result<f64> {
    let shifted = rc.with_terminal(RotatedTerminal::ShiftedCenter(p.clone()))?;
    shifted.terminal_value(k, time_of(&rc.rot, k), x)
}

/// `pbar_r(x)` at global step `k`.
pub fn rotated_terminal_reference(rc: &RotatedCost, x: &DVector<f64>, k: usize) -> Result<f64> {
    let r = rc.with_terminal(RotatedTerminal::Reference)?;
    r.terminal_value(k, time_of(&rc.rot, k), x)
}

/// Discrepancy in the telescoping identity
/// `rotated - original = lam_0'(x_0 - x^r_0) - sum q(y^r) - p(x^r_M)`
/// along a dynamically feasible trajectory on the problem's grid.
pub fn telescoping_identity_check(
    prob: &OcpProblem,
    rot: &RotationData,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Result<f64> {
    let m = prob.horizon();
    if states.len() != m + 1 || inputs.len() != m {
        return Err(Error::Contract("trajectory does not match the problem horizon".into()));
    }
    for n in 0..m {
        let k = prob.grid.k0 + n;
        let next = prob.model.step(k, &states[n], &inputs[n])?;
        let defect = (&states[n + 1] - next).amax();
        if defect > FEASIBILITY_TOL {
            return Err(Error::Rejected(format!(
                "trajectory violates the dynamics at step {k} by {defect:.3e}"
            )));
        }
    }
    let rc = RotatedCost::new(prob.cost.clone(), Arc::new(rot.clone()), RotatedTerminal::Reference)?;
    let (mut original, mut rotated, mut offset) = (0.0, 0.0, 0.0);
    for n in 0..m {
        let k = prob.grid.k0 + n;
        let t = prob.grid.time(k);
        original += prob.cost.stage_value(k, t, &states[n], &inputs[n])?;
        rotated += rc.stage_value(k, t, &states[n], &inputs[n])?;
        offset += prob.cost.stage_value(k, t, rot.x_r(k)?, rot.u_r(k)?)?;
    }
    let k = prob.grid.k0 + m;
    let t = prob.grid.time(k);
    original += prob.cost.terminal_value(k, t, &states[m])?;
    rotated += rc.terminal_value(k, t, &states[m])?;
    offset += prob.cost.terminal_value(k, t, rot.x_r(k)?)?;
    let k0 = prob.grid.k0;
    let boundary = rot.lam(k0)?.dot(&(&states[0] - rot.x_r(k0)?));
    Ok((rotated - original - boundary + offset).abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvarianceReport {
    /// Max primal difference between the original and the rotated solve.
    pub deviation: f64,
    /// Max `|lambda|` of the rotated solve.
    pub lambda_bar_max: f64,
    /// Max `|mu_bar - mu^r|`.
    pub mu_deviation: f64,
    pub pass: bool,
}

/// Solve `prob` with its own cost and with the rotated cost and compare.
pub fn verify_primal_invariance(prob: &OcpProblem, rot: &RotationData) -> Result<InvarianceReport> {
    let original = solve_sqp_from(prob, None, 50, 1e-10)?;
    let rc = RotatedCost::new(prob.cost.clone(), Arc::new(rot.clone()), RotatedTerminal::Reference)?;
    let rotated_prob = prob.with_cost(Arc::new(rc))?;
    let rotated = solve_sqp_from(&rotated_prob, None, 50, 1e-10)?;
    let mut deviation: f64 = 0.0;
    for (a, b) in original.states.iter().zip(&rotated.states) {
        deviation = deviation.max((a - b).amax());
    }
    for (a, b) in original.inputs.iter().zip(&rotated.inputs) {
        deviation = deviation.max((a - b).amax());
    }
    let lambda_bar_max = rotated.lam.iter().map(|l| l.amax()).fold(0.0, f64::max);
    let mut mu_deviation: f64 = 0.0;
    for (n, mu) in rotated.mu.iter().enumerate() {
        let k = prob.grid.k0 + n;
        if let Ok(mr) = rot.mu(k) {
            if mr.len() == mu.len() {
                mu_deviation = mu_deviation.max((mu - mr).amax());
            }
        }
    }
    Ok(InvarianceReport {
        deviation,
        lambda_bar_max,
        mu_deviation,
        pass: deviation <= 1e-6,
    })
}

/// `Vbar^O`: optimal value of `prob` under the rotated costs.
pub fn rotated_value_ocp(prob: &OcpProblem, rot: &RotationData) -> Result<f64> {
    let rc = RotatedCost::new(prob.cost.clone(), Arc::new(rot.clone()), RotatedTerminal::Reference)?;
    let rotated_prob = prob.with_cost(Arc::new(rc))?;
    Ok(solve_sqp_from(&rotated_prob, None, 50, 1e-10)?.objective)
}

/// KKT residual of the stored reference and multipliers as a solution of the
/// long-horizon problem with `cost` and `constraints`. Corrupted multipliers show
/// up here even though the telescoping identity holds for any multiplier sequence.
pub fn multiplier_residual(
    cost: Arc<dyn StageCost>,
    constraints: Arc<dyn ConstraintSet>,
    rot: &RotationData,
) -> Result<f64> {
    let prob = OcpProblem::new(
        rot.model.clone(),
        cost,
        constraints,
        rot.grid,
        rot.states[0].clone(),
        TerminalMode::CostOnly,
    )?;
    let objective = prob.objective(&rot.states, &rot.inputs)?;
    let sol = OcpSolution {
        grid: rot.grid,
        states: rot.states.clone(),
        inputs: rot.inputs.clone(),
        lam: rot.lam.clone(),
        mu: rot.mu.clone(),
        terminal_mu: 0.0,
        slack: 0.0,
        kkt_residual: 0.0,
        objective,
        iterations: 0,
        constraint_violation: 0.0,
    };
    Ok(kkt_residual(&prob, &sol)?.max())
}

/// Sampling-based check of `qbar >= lambda_min(W) |z - y^r|^2` on feasible points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityReport {
    pub samples: usize,
    pub rejected: usize,
    /// Smallest `qbar - lambda_min(W) d^2 (1 - 1e-6)` seen.
    pub min_margin: f64,
    /// Smallest `qbar` seen.
    pub min_value: f64,
    pub violations: usize,
}

/// Draws `n_samples` feasible `(x, u)` with `|x - x^r_k| <= radius` at random steps `k`
/// of `steps`, inputs perturbed around `u^r_k` by up to `radius` per component.
pub fn positivity_check(
    rc: &RotatedCost,
    constraints: &dyn ConstraintSet,
    steps: std::ops::Range<usize>,
    lambda_min_w: f64,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<PositivityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = &rc.rot;
    let (nx, nu) = (rc.n_x(), rc.n_u());
    let mut rep = PositivityReport {
        samples: 0,
        rejected: 0,
        min_margin: f64::INFINITY,
        min_value: f64::INFINITY,
        violations: 0,
    };
    let max_draws = n_samples.saturating_mul(1000).max(1000);
    let mut draws = 0;
    while rep.samples < n_samples {
        draws += 1;
        if draws > max_draws {
            return Err(Error::Rejected("could not draw enough feasible samples".into()));
        }
        let k = rng.random_range(steps.clone());
        let dir: DVector<f64> = DVector::from_fn(nx, |_, _| rng.sample(StandardNormal));
        let scale = radius * rng.random::<f64>().powf(1.0 / nx as f64) / dir.norm().max(1e-300);
        let x = rot.x_r(k)? + dir * scale;
        let u = rot.u_r(k)? + DVector::from_fn(nu, |_, _| radius * (2.0 * rng.random::<f64>() - 1.0));
        if crate::ltv::max_violation(constraints, &x, &u) > 0.0 {
            rep.rejected += 1;
            continue;
        }
        rep.samples += 1;
        let value = rotated_stage(rc, &x, &u, k)?;
        let d2 = (stack(&x, &u) - stack(rot.x_r(k)?, rot.u_r(k)?)).norm_squared();
        let margin = value - lambda_min_w * d2 * (1.0 - 1e-6);
        rep.min_margin = rep.min_margin.min(margin);
        rep.min_value = rep.min_value.min(value);
        if value <= 0.0 || margin < -1e-9 {
            rep.violations += 1;
        }
    }
    Ok(rep)
}

/// Max entry of `|FD Hessian of qbar - 2W|` at `z` on step `k`.
pub fn hessian_deviation(rc: &RotatedCost, w: &DMatrix<f64>, k: usize, z: &DVector<f64>, h: f64) -> Result<f64> {
    let nx = rc.n_x();
    let nz = z.len();
    let f = |v: &DVector<f64>| rotated_stage(rc, &v.rows(0, nx).into_owned(), &v.rows(nx, nz - nx).into_owned(), k);
    let mut worst: f64 = 0.0;
    for i in 0..nz {
        for j in 0..nz {
            let mut pp = z.clone();
            pp[i] += h;
            pp[j] += h;
            let mut pm = z.clone();
            pm[i] += h;
            pm[j] -= h;
            let mut mp = z.clone();
            mp[i] -= h;
            mp[j] += h;
            let mut mm = z.clone();
            mm[i] -= h;
            mm[j] -= h;
            let hij = (f(&pp)? - f(&pm)? - f(&mp)? + f(&mm)?) / (4.0 * h * h);
            worst = worst.max((hij - 2.0 * w[(i, j)]).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::QuadraticStageCost;
    use crate::ltv::Unconstrained;
    use crate::ocp::{solve_qp, TerminalMode};
    use crate::reference::{ConstantReference, Reference};

    fn small_setup() -> (OcpProblem, RotationData, DMatrix<f64>) {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let model = LtvModel::time_invariant(a, b, 0.1).unwrap();
        // Infeasible reference: nonzero position with nonzero velocity, at rest input.
        let r: Arc<dyn Reference> = Arc::new(ConstantReference::new(
            DVector::from_vec(vec![1.0, 0.5]),
            DVector::zeros(1),
        ));
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.5]));
        let p = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]);
        let cost = QuadraticStageCost::new(w.clone(), p, r).unwrap();
        let prob = OcpProblem::new(
            model.clone(),
            Arc::new(cost),
            Arc::new(Unconstrained::new(2, 1)),
            TimeGrid::new(3, 0.3, 0.1, 30),
            DVector::from_vec(vec![-0.5, 0.2]),
            TerminalMode::CostOnly,
        )
        .unwrap();
        let sol = solve_qp(&prob).unwrap();
        let rot = RotationData::from_solution(&model, &sol).unwrap();
        (prob, rot, w)
    }

    #[test]
    fn rotated_stage_vanishes_at_reference_and_reduces_without_multipliers() {
        let (prob, rot, _) = small_setup();
        let rc = RotatedCost::new(prob.cost.clone(), Arc::new(rot.clone()), RotatedTerminal::Reference).unwrap();
        for k in 3..33 {
            let v = rotated_stage(&rc, rot.x_r(k).unwrap(), rot.u_r(k).unwrap(), k).unwrap();
            assert!(v.abs() < 1e-10, "k={k} v={v}");
        }
        let zero = rot.with_scaled_multipliers(0.0);
        let rc0 = RotatedCost::new(prob.cost.clone(), Arc::new(zero.clone()), RotatedTerminal::Reference).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.1]);
        let u = DVector::from_vec(vec![0.7]);
        let k = 10;
        let t = prob.grid.time(k);
        let expect = prob.cost.stage_value(k, t, &x, &u).unwrap()
            - prob.cost.stage_value(k, t, zero.x_r(k).unwrap(), zero.u_r(k).unwrap()).unwrap();
        assert!((rotated_stage(&rc0, &x, &u, k).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn terminal_center_closed_form() {
        let (_, rot, _) = small_setup();
        let eye = DMatrix::identity(2, 2);
        let zero = rot.with_scaled_multipliers(0.0);
        assert_eq!(rotated_terminal_center(&zero, &eye, 5).unwrap(), zero.x_r(5).unwrap().clone());

        // P = I, lam = (2, 0): shift by (1, 0).
        let mut lam = vec![DVector::zeros(2); 31];
        lam[2] = DVector::from_vec(vec![2.0, 0.0]);
        let custom = RotationData::new(
            rot.model().clone(),
            *rot.grid(),
            rot.states().to_vec(),
            rot.inputs().to_vec(),
            lam,
            vec![DVector::zeros(0); 30],
            0.0,
        )
        .unwrap();
        let c = rotated_terminal_center(&custom, &eye, 5).unwrap();
        assert!((c - custom.x_r(5).unwrap() - DVector::from_vec(vec![1.0, 0.0])).amax() < 1e-15);

        // Numerical minimizer of p_y(x) - lam'(x - x^r) by gradient descent.
        let p = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]);
        let k = 20;
        let (xr, l) = (rot.x_r(k).unwrap().clone(), rot.lam(k).unwrap().clone());
        let mut x = xr.clone();
        for _ in 0..2000 {
            let g = 2.0 * &p * (&x - &xr) - &l;
            x -= g * 0.1;
        }
        let closed = rotated_terminal_center(&rot, &p, k).unwrap();
        assert!((x - closed).amax() < 1e-8);

        assert!(matches!(
            rotated_terminal_center(&rot, &DMatrix::zeros(2, 2), k),
            Err(Error::IllPosed(_))
        ));
    }

    #[test]
    fn shifted_terminal_is_plain_quadratic_with_zero_gradient() {
        let (prob, rot, _) = small_setup();
        let p = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]);
        let rc = RotatedCost::new(prob.cost.clone(), Arc::new(rot.clone()), RotatedTerminal::Reference).unwrap();
        let k = 12;
        let xr = rot.x_r(k).unwrap().clone();
        assert!(rotated_terminal(&rc, &p, &xr, k).unwrap().abs() < 1e-12);
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = xr.clone();
            xp[i] += h;
            let mut xm = xr.clone();
            xm[i] -= h;
            let g = (rotated_terminal(&rc, &p, &xp, k).unwrap() - rotated_terminal(&rc, &p, &xm, k).unwrap()) / (2.0 * h);
            assert!(g.abs() < 1e-6);
        }
        let x = DVector::from_vec(vec![0.4, -0.9]);
        let e = &x - &xr;
        assert!((rotated_terminal(&rc, &p, &x, k).unwrap() - e.dot(&(&p * &e))).abs() < 1e-10);
    }

    #[test]
    fn telescoping_on_reference_and_rejects_infeasible_rollouts() {
        let (prob, rot, _) = small_setup();
        let d = telescoping_identity_check(&prob, &rot, rot.states(), rot.inputs()).unwrap();
        assert!(d < 1e-12, "{d}");
        let mut states = rot.states().to_vec();
        states[7][0] += 1e-3;
        assert!(matches!(
            telescoping_identity_check(&prob, &rot, &states, rot.inputs()),
            Err(Error::Rejected(_))
        ));
    }

    #[test]
    fn primal_invariance_and_multipliers() {
        let (prob, rot, _) = small_setup();
        let rep = verify_primal_invariance(&prob, &rot).unwrap();
        assert!(rep.deviation <= 1e-8, "{rep:?}");
        assert!(rep.lambda_bar_max <= 1e-7, "{rep:?}");
        assert!(rep.pass);
    }

    #[test]
    fn rotated_value_is_zero_at_reference_and_consistent() {
        let (prob, rot, _) = small_setup();
        let at_ref = prob.with_x_init(rot.x_r(3).unwrap().clone()).unwrap();
        assert!(rotated_value_ocp(&at_ref, &rot).unwrap().abs() < 1e-8);

        let off = prob.with_x_init(DVector::from_vec(vec![0.4, -0.3])).unwrap();
        let vbar = rotated_value_ocp(&off, &rot).unwrap();
        assert!(vbar > 0.0);
        let v = solve_qp(&off).unwrap().objective;
        let mut ref_cost = 0.0;
        for k in 3..33 {
            ref_cost += prob.cost.stage_value(k, prob.grid.time(k), rot.x_r(k).unwrap(), rot.u_r(k).unwrap()).unwrap();
        }
        ref_cost += prob.cost.terminal_value(33, prob.grid.time(33), rot.x_r(33).unwrap()).unwrap();
        let expect = v + rot.lam(3).unwrap().dot(&(&off.x_init - rot.x_r(3).unwrap())) - ref_cost;
        assert!((vbar - expect).abs() < 1e-8, "{vbar} vs {expect}");
    }

    #[test]
    fn hessian_identity() {
        let (prob, rot, w) = small_setup();
        let rc = RotatedCost::new(prob.cost.clone(), Arc::new(rot), RotatedTerminal::Reference).unwrap();
        let z = DVector::from_vec(vec![0.2, -0.4, 1.1]);
        assert!(hessian_deviation(&rc, &w, 8, &z, 1e-3).unwrap() < 1e-5);
    }

    #[test]
    fn refuses_loose_solutions() {
        let (prob, _, _) = small_setup();
        let mut sol = solve_qp(&prob).unwrap();
        sol.kkt_residual = 1e-6;
        assert!(RotationData::from_solution(&prob.model, &sol).is_err());
    }
}
