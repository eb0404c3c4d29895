//! Closed-loop simulation and evaluation of the stability and ISS certificates.

use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ltv::LtvModel;
use crate::mpc::{rotated_cost_of_trajectory, ControllerMode, MpcController};
use crate::reference::Reference;
use crate::rotation::{RotatedCost, RotatedTerminal, RotationData};
use crate::cost::StageCost;

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// `|x_k - r_x(t_k)|`.
    pub err_r: f64,
    /// `|x_k - x^r_k|`, when the feasible reference is known.
    pub err_yr: Option<f64>,
    /// Optimal value of the controller's own problem.
    pub value: f64,
    /// `Vbar^i(x_k)` from the rotated ideal problem.
    pub vbar_i: Option<f64>,
    /// Rotated cost of the controller's prediction with the shifted terminal cost.
    pub jbar_star: Option<f64>,
    /// `|y^f_{k+N} - y^r_{k+N}|` for the terminal reference actually used.
    pub terminal_deviation: Option<f64>,
    pub slack: f64,
    /// `Vbar^i(x_{k+1}) - Jbar(x_k) + alpha3(e_k)`, where `Jbar` is `Vbar^i` in the
    /// ideal modes and `Jbar^*` in the practical one.
    pub decrease_resid: Option<f64>,
    /// Max primal difference between the ideal and rotated-ideal solves.
    pub lemma2_deviation: Option<f64>,
    /// Worst KKT residual among the solves of this step.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedLoopTrace {
    pub mode: ControllerMode,
    pub rows: Vec<TraceRow>,
    pub final_state: Vec<f64>,
    pub final_vbar_i: Option<f64>,
    /// Set when a solver failure stopped the run early.
    pub failure: Option<String>,
    pub lambda_min_w: f64,
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn states(&self) -> Vec<DVector<f64>> {
        let mut out: Vec<_> = self.rows.iter().map(|r| DVector::from_vec(r.x.clone())).collect();
        out.push(DVector::from_vec(self.final_state.clone()));
        out
    }
}

/// Certifier used alongside a controller: the rotated ideal problem.
pub struct Certifier<'a> {
    pub controller: &'a mut MpcController,
}

/// Run `steps` closed-loop steps from `(x0, k0)` with the model as the plant.
///
/// With a `certifier` (a rotated-ideal controller on the same data), every row also
/// carries `Vbar^i`, `Jbar^*`, the decrease residual and, for the ideal controller,
/// the ideal / rotated-ideal primal deviation.
pub fn run_closed_loop(
    model: &LtvModel,
    controller: &mut MpcController,
    reference: &dyn Reference,
    x0: &DVector<f64>,
    k0: usize,
    steps: usize,
    mut certifier: Option<Certifier<'_>>,
) -> Result<ClosedLoopTrace> {
    if steps == 0 {
        return Err(Error::Rejected("closed loop needs at least one step".into()));
    }
    if let Some(c) = &certifier {
        if c.controller.mode() != ControllerMode::RotatedIdeal {
            return Err(Error::Contract("certifier must be a rotated-ideal controller".into()));
        }
    }
    let lambda_min_w = controller.config().cost.lambda_min_w();
    let rot: Option<Arc<RotationData>> = controller
        .rotation()
        .cloned()
        .or_else(|| certifier.as_ref().and_then(|c| c.controller.rotation().cloned()));
    let horizon = controller.config().horizon;
    let p = controller.config().terminal.p.clone();
    // The certifier's cost defines Vbar^i, so Jbar^* must be priced with it too.
    let base_cost = match &certifier {
        Some(c) => c.controller.config().cost.clone(),
        None => controller.config().cost.clone(),
    };
    let shifted = match &rot {
        Some(r) => {
            let base: Arc<dyn StageCost> = Arc::new(base_cost);
            Some(RotatedCost::new(base, r.clone(), RotatedTerminal::ShiftedCenter(p.clone()))?)
        }
        None => None,
    };

    let mut rows: Vec<TraceRow> = Vec::with_capacity(steps);
    let mut x = x0.clone();
    let mut failure = None;
    for k in k0..k0 + steps {
        let res = match controller.step(&x, k) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(format!("controller failed at step {k}: {e}"));
                break;
            }
        };
        let t = k as f64 * model.ts();
        let (rx, _) = reference.eval(t)?;
        let err_yr = match &rot {
            Some(r) => Some((&x - r.x_r(k)?).norm()),
            None => None,
        };

        let mut vbar_i = None;
        let mut lemma2 = None;
        let mut kkt = res.kkt_residual;
        if let Some(c) = certifier.as_mut() {
            match c.controller.step(&x, k) {
                Ok(cr) => {
                    vbar_i = Some(cr.value);
                    kkt = kkt.max(cr.kkt_residual);
                    if controller.mode() == ControllerMode::Ideal {
                        let mut dev: f64 = 0.0;
                        for (a, b) in cr.predicted_states.iter().zip(&res.predicted_states) {
                            dev = dev.max((a - b).amax());
                        }
                        for (a, b) in cr.predicted_inputs.iter().zip(&res.predicted_inputs) {
                            dev = dev.max((a - b).amax());
                        }
                        lemma2 = Some(dev);
                    }
                }
                Err(e) => {
                    failure = Some(format!("certifier failed at step {k}: {e}"));
                    break;
                }
            }
        }

        // Residual of the previous row now that Vbar^i(x_k) is known.
        if let (Some(prev), Some(v)) = (rows.last_mut(), vbar_i) {
            prev.decrease_resid = decrease_residual(prev, v, lambda_min_w, controller.mode());
        }

        let (jbar_star, terminal_deviation) = match (&shifted, &rot) {
            (Some(rc), Some(r)) => {
                let j = rotated_cost_of_trajectory(
                    rc,
                    &res.predicted_states,
                    &res.predicted_inputs,
                    RotatedTerminal::ShiftedCenter(p.clone()),
                    k,
                )?;
                let kn = k + horizon;
                let (xf, uf) = controller.center(kn)?;
                let dx = (xf - r.x_r(kn)?).norm_squared();
                let du = match r.u_r(kn) {
                    Ok(ur) => (uf - ur).norm_squared(),
                    Err(_) => 0.0,
                };
                (Some(j), Some((dx + du).sqrt()))
            }
            _ => (None, None),
        };

        let u = res.u_apply.clone();
        rows.push(TraceRow {
            k,
            t,
            x: x.iter().copied().collect(),
            u: u.iter().copied().collect(),
            err_r: (&x - rx).norm(),
            err_yr,
            value: res.value,
            vbar_i,
            jbar_star,
            terminal_deviation,
            slack: res.terminal_slack,
            decrease_resid: None,
            lemma2_deviation: lemma2,
            kkt_residual: kkt,
        });
        x = model.step(k, &x, &u)?;
    }

    let mut final_vbar_i = None;
    if failure.is_none() {
        if let Some(c) = certifier.as_mut() {
            let k = k0 + rows.len();
            match c.controller.step(&x, k) {
                Ok(cr) => {
                    final_vbar_i = Some(cr.value);
                    if let Some(prev) = rows.last_mut() {
                        prev.decrease_resid = decrease_residual(prev, cr.value, lambda_min_w, controller.mode());
                    }
                }
                Err(e) => failure = Some(format!("certifier failed at final step {k}: {e}")),
            }
        }
    }

    Ok(ClosedLoopTrace {
        mode: controller.mode(),
        rows,
        final_state: x.iter().copied().collect(),
        final_vbar_i,
        failure,
        lambda_min_w,
    })
}

fn decrease_residual(prev: &TraceRow, vbar_next: f64, lambda_min_w: f64, mode: ControllerMode) -> Option<f64> {
    let e = prev.err_yr?;
    let alpha3 = lambda_min_w * e * e;
    let reference_value = match mode {
        ControllerMode::Practical => prev.jbar_star?,
        _ => prev.vbar_i?,
    };
    Some(vbar_next - reference_value + alpha3)
}

#[derive(Debug, Clone, Serialize)]
pub struct IssCertificate {
    /// `Vbar^i(x_{k+1}) - Jbar^*(x_k) + alpha3(e_k)` per step.
    pub inequality_residuals: Vec<f64>,
    /// `(d_k, g_k)`: terminal-reference deviation and `Jbar^*(x_k) - Vbar^i(x_k)`.
    pub gaps: Vec<(f64, f64)>,
    /// `sigma(d) = c1 d + c2 d^2`.
    pub sigma: (f64, f64),
    pub sigma_covers: bool,
    pub max_inequality_residual: f64,
    pub max_gap: f64,
}

impl IssCertificate {
    pub fn sigma_at(&self, d: f64) -> f64 {
        self.sigma.0 * d + self.sigma.1 * d * d
    }

    pub fn inequality_holds(&self, tol: f64) -> bool {
        self.max_inequality_residual <= tol
    }
}

/// Smallest (in `sum sigma(d_k)`) envelope `c1 d + c2 d^2`, `c1, c2 >= 0`, above
/// every gap. Returns `None` when a positive gap sits at `d = 0`.
pub fn fit_sigma(gaps: &[(f64, f64)], tol: f64) -> Option<(f64, f64)> {
    let active: Vec<(f64, f64)> = gaps.iter().copied().filter(|&(_, g)| g > tol).collect();
    if active.is_empty() {
        return Some((0.0, 0.0));
    }
    if active.iter().any(|&(d, _)| d <= 0.0) {
        return None;
    }
    let s1: f64 = gaps.iter().map(|&(d, _)| d).sum();
    let s2: f64 = gaps.iter().map(|&(d, _)| d * d).sum();
    let covers = |c1: f64, c2: f64| active.iter().all(|&(d, g)| c1 * d + c2 * d * d >= g * (1.0 - 1e-12));
    let mut candidates = vec![
        (active.iter().map(|&(d, g)| g / d).fold(0.0, f64::max), 0.0),
        (0.0, active.iter().map(|&(d, g)| g / (d * d)).fold(0.0, f64::max)),
    ];
    for i in 0..active.len() {
        for j in i + 1..active.len() {
            let (d1, g1) = active[i];
            let (d2, g2) = active[j];
            let det = d1 * d2 * d2 - d2 * d1 * d1;
            if det.abs() < 1e-300 {
                continue;
            }
            let c1 = (g1 * d2 * d2 - g2 * d1 * d1) / det;
            let c2 = (d1 * g2 - d2 * g1) / det;
            if c1 >= 0.0 && c2 >= 0.0 {
                candidates.push((c1, c2));
            }
        }
    }
    candidates
        .into_iter()
        .filter(|&(c1, c2)| covers(c1, c2))
        .min_by(|a, b| (a.0 * s1 + a.1 * s2).total_cmp(&(b.0 * s1 + b.1 * s2)))
}

/// Evaluate both inequality chains of the ISS argument along a practical trace.
pub fn evaluate_iss(trace: &ClosedLoopTrace) -> Result<IssCertificate> {
    let mut inequality_residuals = Vec::with_capacity(trace.len());
    let mut gaps = Vec::with_capacity(trace.len());
    for (i, row) in trace.rows.iter().enumerate() {
        let (Some(j), Some(v), Some(d), Some(e)) = (row.jbar_star, row.vbar_i, row.terminal_deviation, row.err_yr) else {
            return Err(Error::Contract(format!("trace row {i} lacks certificate fields")));
        };
        let v_next = match trace.rows.get(i + 1) {
            Some(next) => next.vbar_i,
            None => trace.final_vbar_i,
        };
        let Some(v_next) = v_next else {
            return Err(Error::Contract(format!("missing Vbar^i after row {i}")));
        };
        inequality_residuals.push(v_next - j + trace.lambda_min_w * e * e);
        gaps.push((d, j - v));
    }
    let sigma = fit_sigma(&gaps, 1e-7);
    let max_inequality_residual = inequality_residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_gap = gaps.iter().map(|&(_, g)| g).fold(f64::NEG_INFINITY, f64::max);
    Ok(IssCertificate {
        inequality_residuals,
        gaps,
        sigma: sigma.unwrap_or((f64::INFINITY, f64::INFINITY)),
        sigma_covers: sigma.is_some(),
        max_inequality_residual,
        max_gap,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecreaseReport {
    pub steps: usize,
    pub worst_violation: f64,
    pub worst_step: Option<usize>,
}

impl DecreaseReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.worst_violation <= tol
    }
}

/// `Vbar^i(x_{k+1}) - Vbar^i(x_k) + lambda_min(W) |x_k - x^r_k|^2` along the trace.
pub fn verify_decrease(trace: &ClosedLoopTrace) -> DecreaseReport {
    let mut worst = f64::NEG_INFINITY;
    let mut worst_step = None;
    let mut steps = 0;
    for (i, row) in trace.rows.iter().enumerate() {
        let v_next = match trace.rows.get(i + 1) {
            Some(next) => next.vbar_i,
            None => trace.final_vbar_i,
        };
        if let (Some(v), Some(vn), Some(e)) = (row.vbar_i, v_next, row.err_yr) {
            steps += 1;
            let r = vn - v + trace.lambda_min_w * e * e;
            if r > worst {
                worst = r;
                worst_step = Some(row.k);
            }
        }
    }
    DecreaseReport {
        steps,
        worst_violation: worst,
        worst_step,
    }
}

/// Max `|x_{k+1} - f_k(x_k, u_k)|` along the trace.
pub fn dynamics_residual(model: &LtvModel, trace: &ClosedLoopTrace) -> Result<f64> {
    let states = trace.states();
    let mut worst: f64 = 0.0;
    for (i, row) in trace.rows.iter().enumerate() {
        let u = DVector::from_vec(row.u.clone());
        let next = model.step(row.k, &states[i], &u)?;
        worst = worst.max((next - &states[i + 1]).amax());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_fit_covers_and_is_tight() {
        let gaps = vec![(0.0, 0.0), (0.1, 0.05), (0.2, 0.3), (0.5, 0.6), (1.0, 1.5)];
        let (c1, c2) = fit_sigma(&gaps, 1e-12).unwrap();
        assert!(c1 >= 0.0 && c2 >= 0.0);
        for &(d, g) in &gaps {
            assert!(c1 * d + c2 * d * d >= g - 1e-12);
        }
        // Tight: at least one gap sits on the envelope.
        assert!(gaps.iter().any(|&(d, g)| g > 0.0 && (c1 * d + c2 * d * d - g).abs() < 1e-9));
        assert_eq!(fit_sigma(&[(0.0, 1e-9), (0.3, -1.0)], 1e-7), Some((0.0, 0.0)));
        assert_eq!(fit_sigma(&[(0.0, 1.0)], 1e-7), None);
    }
}
