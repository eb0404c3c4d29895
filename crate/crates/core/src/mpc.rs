//! Receding-horizon controllers: the practical formulation (terminal ingredients on
//! the infeasible reference), the ideal one (terminal ingredients on the feasible
//! reference) and its rotated counterpart.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cost::{QuadraticStageCost, StageCost};
use crate::error::{Error, Result};
use crate::ltv::{ConstraintSet, LtvModel, TimeGrid};
use crate::ocp::{solve_sqp_from, OcpProblem, OcpSolution, TerminalMode};
use crate::rotation::{IdealCost, RotatedCost, RotatedTerminal, RotationData};
use crate::terminal::TerminalIngredients;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    Practical,
    Ideal,
    RotatedIdeal,
}

impl std::fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerMode::Practical => "practical",
            ControllerMode::Ideal => "ideal",
            ControllerMode::RotatedIdeal => "rotated-ideal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalPolicy {
    /// Enforce the terminal ellipsoid.
    Hard,
    /// Price its violation with this weight.
    Penalty(f64),
}

#[derive(Clone)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Stage weight `W`, terminal weight and the (possibly infeasible) reference `r`.
    pub cost: QuadraticStageCost,
    /// Terminal weight, feedback gain and level; the center follows the mode.
    pub terminal: TerminalIngredients,
    pub policy: TerminalPolicy,
    pub sqp_max_iter: usize,
    pub sqp_tol: f64,
}

impl MpcConfig {
    pub fn new(horizon: usize, cost: QuadraticStageCost, terminal: TerminalIngredients, policy: TerminalPolicy) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Rejected("MPC horizon must be at least 1".into()));
        }
        if let TerminalPolicy::Penalty(w) = policy {
            if !(w > 0.0) {
                return Err(Error::Rejected(format!("penalty weight must be positive, got {w}")));
            }
        }
        Ok(Self {
            horizon,
            cost,
            terminal,
            policy,
            sqp_max_iter: 50,
            sqp_tol: 1e-9,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MpcStepResult {
    pub u_apply: DVector<f64>,
    pub predicted_states: Vec<DVector<f64>>,
    pub predicted_inputs: Vec<DVector<f64>>,
    /// Optimal value of the problem actually solved.
    pub value: f64,
    /// Rotated value: `Vbar` (practical, with `pbar_r`) or `Vbar^i` (ideal modes).
    pub rotated_value: Option<f64>,
    pub terminal_slack: f64,
    pub terminal_multiplier: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Replace a hard terminal ellipsoid by its exact-penalty relaxation.
pub fn relax_terminal(prob: &OcpProblem, weight: f64) -> Result<OcpProblem> {
    match &prob.terminal {
        TerminalMode::Ellipsoid { center, shape, level }
        | TerminalMode::ExactPenalty {
            center, shape, level, ..
        } => prob.with_terminal(TerminalMode::ExactPenalty {
            center: center.clone(),
            shape: shape.clone(),
            level: *level,
            weight,
        }),
        TerminalMode::CostOnly => Err(Error::Rejected("problem has no terminal set to relax".into())),
    }
}

/// `sum qbar + terminal` along `(states, inputs)` starting at global step `k`,
/// with the terminal term chosen by `terminal`.
pub fn rotated_cost_of_trajectory(
    rc: &RotatedCost,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
    terminal: RotatedTerminal,
    k: usize,
) -> Result<f64> {
    if states.len() != inputs.len() + 1 {
        return Err(Error::Contract("trajectory needs one more state than inputs".into()));
    }
    let rc = rc.with_terminal(terminal)?;
    let grid = *rc.rotation().grid();
    let mut total = 0.0;
    for (n, (x, u)) in states.iter().zip(inputs).enumerate() {
        let kk = k + n;
        total += rc.stage_value(kk, grid.time(kk), x, u)?;
    }
    let kn = k + inputs.len();
    total += rc.terminal_value(kn, grid.time(kn), &states[inputs.len()])?;
    Ok(total)
}

pub struct MpcController {
    mode: ControllerMode,
    config: MpcConfig,
    model: LtvModel,
    constraints: Arc<dyn ConstraintSet>,
    rot: Option<Arc<RotationData>>,
    cost: Arc<dyn StageCost>,
    warm: Option<(usize, Vec<DVector<f64>>, Vec<DVector<f64>>)>,
}

impl MpcController {
    pub fn practical(
        model: LtvModel,
        constraints: Arc<dyn ConstraintSet>,
        config: MpcConfig,
        rot: Option<Arc<RotationData>>,
    ) -> Result<Self> {
        let cost: Arc<dyn StageCost> = Arc::new(config.cost.clone());
        Ok(Self {
            mode: ControllerMode::Practical,
            config,
            model,
            constraints,
            rot,
            cost,
            warm: None,
        })
    }

    pub fn ideal(
        model: LtvModel,
        constraints: Arc<dyn ConstraintSet>,
        config: MpcConfig,
        rot: Arc<RotationData>,
    ) -> Result<Self> {
        let base: Arc<dyn StageCost> = Arc::new(config.cost.clone());
        let cost = Arc::new(IdealCost::new(base, rot.clone(), config.terminal.p.clone())?);
        Ok(Self {
            mode: ControllerMode::Ideal,
            config,
            model,
            constraints,
            rot: Some(rot),
            cost,
            warm: None,
        })
    }

    pub fn rotated_ideal(
        model: LtvModel,
        constraints: Arc<dyn ConstraintSet>,
        config: MpcConfig,
        rot: Arc<RotationData>,
    ) -> Result<Self> {
        let base: Arc<dyn StageCost> = Arc::new(config.cost.clone());
        let cost = Arc::new(RotatedCost::new(
            base,
            rot.clone(),
            RotatedTerminal::ShiftedCenter(config.terminal.p.clone()),
        )?);
        Ok(Self {
            mode: ControllerMode::RotatedIdeal,
            config,
            model,
            constraints,
            rot: Some(rot),
            cost,
            warm: None,
        })
    }

    pub fn build(
        mode: ControllerMode,
        model: LtvModel,
        constraints: Arc<dyn ConstraintSet>,
        config: MpcConfig,
        rot: Arc<RotationData>,
    ) -> Result<Self> {
        match mode {
            ControllerMode::Practical => Self::practical(model, constraints, config, Some(rot)),
            ControllerMode::Ideal => Self::ideal(model, constraints, config, rot),
            ControllerMode::RotatedIdeal => Self::rotated_ideal(model, constraints, config, rot),
        }
    }

    pub fn mode(&self) -> ControllerMode {
        self.mode
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn rotation(&self) -> Option<&Arc<RotationData>> {
        self.rot.as_ref()
    }

    pub fn set_policy(&mut self, policy: TerminalPolicy) {
        self.config.policy = policy;
    }

    /// Drop the warm start.
    pub fn reset(&mut self) {
        self.warm = None;
    }

    fn time(&self, k: usize) -> f64 {
        k as f64 * self.model.ts()
    }

    /// Terminal-set center and feedforward input at step `k`.
    pub fn center(&self, k: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        match self.mode {
            ControllerMode::Practical => self.config.cost.reference().eval(self.time(k)),
            _ => {
                let rot = self.rot.as_ref().expect("ideal modes carry rotation data");
                Ok((rot.x_r(k)?.clone(), rot.u_r(k)?.clone()))
            }
        }
    }

    /// Terminal control law `u_c + K (x - c)`.
    pub fn kappa(&self, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
        let (c, uc) = self.center(k)?;
        Ok(uc + &self.config.terminal.k * (x - c))
    }

    /// The OCP solved at state `x`, step `k`.
    pub fn problem(&self, x: &DVector<f64>, k: usize) -> Result<OcpProblem> {
        let n = self.config.horizon;
        let (center, _) = self.center(k + n)?;
        let shape = self.config.terminal.p.clone();
        let level = self.config.terminal.alpha;
        let terminal = match self.config.policy {
            TerminalPolicy::Hard => TerminalMode::Ellipsoid { center, shape, level },
            TerminalPolicy::Penalty(weight) => TerminalMode::ExactPenalty {
                center,
                shape,
                level,
                weight,
            },
        };
        let grid = TimeGrid::new(k, self.time(k), self.model.ts(), n);
        OcpProblem::new(
            self.model.clone(),
            self.cost.clone(),
            self.constraints.clone(),
            grid,
            x.clone(),
            terminal,
        )
    }

    fn warm_guess(&self, x: &DVector<f64>, k: usize) -> Result<Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)>> {
        let Some((kw, xs, us)) = &self.warm else {
            return Ok(None);
        };
        if *kw + 1 != k {
            return Ok(None);
        }
        let n = us.len();
        let mut states: Vec<_> = xs[1..].to_vec();
        let mut inputs: Vec<_> = us[1..].to_vec();
        let last = &xs[n];
        let u_last = self.kappa(last, kw + n)?;
        states.push(self.model.step(kw + n, last, &u_last)?);
        inputs.push(u_last);
        states[0] = x.clone();
        Ok(Some((states, inputs)))
    }

    /// Solve at `(x, k)` and return the first input.
    pub fn step(&mut self, x: &DVector<f64>, k: usize) -> Result<MpcStepResult> {
        let prob = self.problem(x, k)?;
        let guess = self.warm_guess(x, k)?;
        let sol = solve_sqp_from(
            &prob,
            guess.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
            self.config.sqp_max_iter,
            self.config.sqp_tol,
        )?;
        let rotated_value = self.rotated_value(&sol, k)?;
        self.warm = Some((k, sol.states.clone(), sol.inputs.clone()));
        Ok(MpcStepResult {
            u_apply: sol.inputs[0].clone(),
            predicted_states: sol.states,
            predicted_inputs: sol.inputs,
            value: sol.objective,
            rotated_value,
            terminal_slack: sol.slack,
            terminal_multiplier: sol.terminal_mu,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
        })
    }

    fn rotated_value(&self, sol: &OcpSolution, k: usize) -> Result<Option<f64>> {
        let Some(rot) = &self.rot else {
            return Ok(None);
        };
        if let ControllerMode::RotatedIdeal = self.mode {
            return Ok(Some(sol.objective));
        }
        let base: Arc<dyn StageCost> = Arc::new(self.config.cost.clone());
        let kind = match self.mode {
            ControllerMode::Practical => RotatedTerminal::Reference,
            _ => RotatedTerminal::ShiftedCenter(self.config.terminal.p.clone()),
        };
        let rc = RotatedCost::new(base, rot.clone(), kind.clone())?;
        let mut v = rotated_cost_of_trajectory(&rc, &sol.states, &sol.inputs, kind, k)?;
        if let Some(w) = sol_penalty(&self.config.policy) {
            v += w * sol.slack.max(0.0);
        }
        Ok(Some(v))
    }

    /// Penalty weight `1e4 * max(mu_e, 1)` from a hard-constrained solve at `(x, k)`;
    /// falls back to `1e4` when the hard problem cannot be solved there.
    pub fn calibrate_penalty(&self, x: &DVector<f64>, k: usize) -> Result<f64> {
        let mut hard = Self {
            mode: self.mode,
            config: self.config.clone(),
            model: self.model.clone(),
            constraints: self.constraints.clone(),
            rot: self.rot.clone(),
            cost: self.cost.clone(),
            warm: None,
        };
        hard.config.policy = TerminalPolicy::Hard;
        let mu = match hard.step(x, k) {
            Ok(r) => r.terminal_multiplier,
            Err(e) if e.is_numerical() => 0.0,
            Err(e) => return Err(e),
        };
        Ok(1e4 * mu.max(1.0))
    }
}

fn sol_penalty(policy: &TerminalPolicy) -> Option<f64> {
    match policy {
        TerminalPolicy::Penalty(w) => Some(*w),
        TerminalPolicy::Hard => None,
    }
}
