use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use trackmpc::export::{write_json, write_reference_csv, write_rotation_csv, write_trace_csv};
use trackmpc::mpc::ControllerMode;
use trackmpc::robot::RobotBench;
use trackmpc::rotation::{multiplier_residual, positivity_check, telescoping_identity_check, verify_primal_invariance};
use trackmpc::simulator::{dynamics_residual, evaluate_iss, verify_decrease, ClosedLoopTrace};
use trackmpc::{ConstraintSet, Error, OcpProblem, StageCost, TerminalMode, TimeGrid};

use crate::config::{ExperimentConfig, ModeSelection, ReferenceKind};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration.
    Usage(String),
    /// A solver or synthesis step failed, or a check did not pass.
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn prepare(cfg: &ExperimentConfig) -> CliResult<RobotBench> {
    let bench_cfg = cfg.bench_config().map_err(|e| CliError::Usage(e.0))?;
    let mut bench = RobotBench::build(bench_cfg)?;
    if cfg.reference == ReferenceKind::Feasible {
        bench = bench.with_feasible_reference()?;
    }
    if cfg.multiplier_scale != 1.0 {
        bench = bench.with_rotation(Arc::new(bench.rotation.with_scaled_multipliers(cfg.multiplier_scale)));
    }
    Ok(bench)
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", cfg.out.display())))?;
    // The resolved configuration, so that every output directory can be replayed.
    std::fs::write(cfg.out.join("config.json"), cfg.to_json() + "\n").map_err(Error::from)?;
    Ok(cfg.out.clone())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn solve_ocp(cfg: &ExperimentConfig) -> CliResult<()> {
    let bench = prepare(cfg)?;
    let out = out_dir(cfg)?;
    write_rotation_csv(&out.join("feasible_reference.csv"), &bench.rotation)?;
    let sol = &bench.reference_solution;
    let cost: Arc<dyn StageCost> = Arc::new(bench.cost.clone());
    let summary = json!({
        "bench": cfg.bench,
        "k0": bench.config.k0,
        "ts": bench.config.ts,
        "long_horizon": bench.config.long_horizon,
        "objective": sol.objective,
        "iterations": sol.iterations,
        "kkt_residual": sol.kkt_residual,
        "multiplier_residual": multiplier_residual(cost, bench.constraints.clone(), &bench.rotation)?,
        "constraint_violation": sol.constraint_violation,
    });
    write_json(&out.join("solve_ocp.json"), &summary)?;
    println!(
        "solved {} steps: objective {:.6e}, KKT residual {:.3e}",
        bench.config.long_horizon, sol.objective, sol.kkt_residual
    );
    Ok(())
}

fn modes(sel: ModeSelection) -> Vec<ControllerMode> {
    match sel {
        ModeSelection::Practical => vec![ControllerMode::Practical],
        ModeSelection::Ideal => vec![ControllerMode::Ideal],
        ModeSelection::Both => vec![ControllerMode::Practical, ControllerMode::Ideal],
    }
}

fn trace_summary(bench: &RobotBench, trace: &ClosedLoopTrace) -> CliResult<Value> {
    let k_end = bench.config.k0 + trace.len();
    let final_error = match bench.rotation.x_r(k_end) {
        Ok(xr) => Some((DVector::from_vec(trace.final_state.clone()) - xr).norm()),
        Err(_) => None,
    };
    let iss = match trace.mode {
        ControllerMode::Practical if trace.completed() => Some(evaluate_iss(trace)?),
        _ => None,
    };
    Ok(json!({
        "completed": trace.completed(),
        "failure": trace.failure,
        "steps": trace.len(),
        "final_error": final_error,
        "max_kkt_residual": trace.rows.iter().map(|r| r.kkt_residual).fold(0.0, f64::max),
        "dynamics_residual": dynamics_residual(&bench.model, trace)?,
        "decrease": verify_decrease(trace),
        "iss": iss,
    }))
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    let bench = prepare(cfg)?;
    let out = out_dir(cfg)?;
    let mut summary = serde_json::Map::new();
    let mut failures = Vec::new();
    for mode in modes(cfg.mode) {
        let trace = bench.run(mode, cfg.steps)?;
        write_trace_csv(&out.join(format!("trace_{mode}.csv")), &trace)?;
        summary.insert(mode.to_string(), trace_summary(&bench, &trace)?);
        match &trace.failure {
            Some(f) => failures.push(format!("{mode}: {f}")),
            None => println!("{mode}: {} steps", trace.len()),
        }
    }
    let cert = json!({ "bench": cfg.bench, "seed": cfg.seed, "steps": cfg.steps, "modes": summary });
    write_json(&out.join("certificate.json"), &cert)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(failures.join("; ")))
    }
}

struct Check {
    name: &'static str,
    value: f64,
    threshold: f64,
    pass: bool,
}

impl Check {
    fn at_most(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            value,
            threshold,
            pass: value <= threshold,
        }
    }
}

fn robot_window(bench: &RobotBench, offset: usize, len: usize, x_init: DVector<f64>) -> CliResult<OcpProblem> {
    let cost: Arc<dyn StageCost> = Arc::new(bench.cost.clone());
    let constraints: Arc<dyn ConstraintSet> = bench.constraints.clone();
    let grid = TimeGrid::absolute(bench.config.k0 + offset, bench.config.ts, len);
    Ok(OcpProblem::new(bench.model.clone(), cost, constraints, grid, x_init, TerminalMode::CostOnly)?)
}

fn perturbed(rng: &mut ChaCha8Rng, x: &DVector<f64>, scale: f64) -> DVector<f64> {
    x + DVector::from_fn(x.len(), |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn verify(cfg: &ExperimentConfig) -> CliResult<()> {
    let bench = prepare(cfg)?;
    let out = out_dir(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rot = &bench.rotation;
    let k0 = bench.config.k0;
    let mut checks = Vec::new();

    let cost: Arc<dyn StageCost> = Arc::new(bench.cost.clone());
    checks.push(Check::at_most(
        "multiplier_kkt",
        multiplier_residual(cost, bench.constraints.clone(), rot)?,
        1e-8,
    ));

    let mut telescoping: f64 = 0.0;
    for _ in 0..20 {
        let offset = rng.random_range(0..cfg.steps);
        let x0 = perturbed(&mut rng, rot.x_r(k0 + offset)?, 0.2);
        let prob = robot_window(&bench, offset, 30, x0)?;
        let (mut xs, mut us) = (vec![prob.x_init.clone()], Vec::new());
        for n in 0..prob.horizon() {
            let k = prob.grid.k0 + n;
            let u = rot.u_r(k)? + &bench.lqr.k * (&xs[n] - rot.x_r(k)?);
            let u = perturbed(&mut rng, &u, 5.0);
            xs.push(bench.model.step(k, &xs[n], &u)?);
            us.push(u);
        }
        telescoping = telescoping.max(telescoping_identity_check(&prob, rot, &xs, &us)?);
    }
    checks.push(Check::at_most("telescoping", telescoping, 1e-9));

    let mut invariance: f64 = 0.0;
    for _ in 0..5 {
        let offset = rng.random_range(0..cfg.steps);
        let x0 = perturbed(&mut rng, rot.x_r(k0 + offset)?, 0.2);
        let prob = robot_window(&bench, offset, 20, x0)?;
        invariance = invariance.max(verify_primal_invariance(&prob, rot)?.deviation);
    }
    checks.push(Check::at_most("primal_invariance", invariance, 1e-6));

    let rc = bench.rotated_cost()?;
    let pos = positivity_check(
        &rc,
        bench.constraints.as_ref(),
        k0..k0 + cfg.steps,
        bench.cost.lambda_min_w(),
        1.0,
        cfg.samples,
        cfg.seed,
    )?;
    checks.push(Check::at_most("positivity_violations", pos.violations as f64, 0.0));

    let ti = bench.feasible_terminal()?;
    let report = bench.terminal_sampler(&ti, &rc, cfg.steps, cfg.samples, cfg.seed)?.check(bench.config.alpha);
    let terminal_margin = report
        .decrease
        .worst_margin
        .min(report.invariance.worst_margin)
        .min(report.constraints.worst_margin);
    checks.push(Check {
        name: "terminal_conditions",
        value: terminal_margin,
        // Margin tolerance of the terminal sampler.
        threshold: -1e-9,
        pass: report.pass(),
    });

    let trace = bench.run(ControllerMode::Ideal, cfg.steps)?;
    let lemma2 = trace.rows.iter().filter_map(|r| r.lemma2_deviation).fold(0.0, f64::max);
    let mut check = Check::at_most("ideal_rotated_equivalence", lemma2, 1e-6);
    check.pass &= trace.completed();
    checks.push(check);

    let all = checks.iter().all(|c| c.pass);
    for c in &checks {
        println!(
            "{}: {} (value {:.3e}, threshold {:.1e})",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.value,
            c.threshold
        );
    }
    let doc = json!({
        "bench": cfg.bench,
        "seed": cfg.seed,
        "pass": all,
        "checks": checks.iter().map(|c| json!({
            "name": c.name,
            "value": c.value,
            "threshold": c.threshold,
            "pass": c.pass,
        })).collect::<Vec<_>>(),
    });
    write_json(&out.join("verify.json"), &doc)?;
    if all {
        Ok(())
    } else {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        Err(CliError::Numerical(format!("checks failed: {}", failed.join(", "))))
    }
}

pub fn synthesize_terminal(cfg: &ExperimentConfig) -> CliResult<()> {
    let bench = prepare(cfg)?;
    let out = out_dir(cfg)?;
    let alpha = bench.terminal_level(cfg.steps, cfg.samples, cfg.seed)?;
    let ti = bench.feasible_terminal()?;
    let rc = bench.rotated_cost()?;
    let report = bench.terminal_sampler(&ti, &rc, cfg.steps, cfg.samples, cfg.seed)?.check(alpha);
    let doc = json!({
        "P": rows(&bench.lqr.p),
        "K": rows(&bench.lqr.k),
        "alpha": alpha,
        "residuals": {
            "dare": bench.lqr.residual,
            "spectral_radius": bench.lqr.spectral_radius,
            "iterations": bench.lqr.iterations,
        },
        "validation_report": report,
    });
    write_json(&out.join("terminal.json"), &doc)?;
    println!("terminal level {alpha:.6e} from {} samples", cfg.samples);
    Ok(())
}

pub fn export_reference(cfg: &ExperimentConfig) -> CliResult<()> {
    let bench = prepare(cfg)?;
    let out = out_dir(cfg)?;
    let ts = bench.config.ts;
    let grid = TimeGrid::absolute(bench.config.k0, ts, cfg.steps + bench.config.horizon);
    // Ten times the bound on the smooth part of the profile.
    let threshold = 25.0 * ts * ts;
    write_reference_csv(&out.join("reference.csv"), bench.reference.as_ref(), &bench.model, &grid, threshold)?;
    println!("reference on {} steps from t = {:.2}", grid.len, grid.t0);
    Ok(())
}
