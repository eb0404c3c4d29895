//! CSV and JSON writers. Floats are written in scientific notation with 17
//! significant digits so that files round-trip and diff byte-for-byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::Result;
use crate::ltv::{LtvModel, TimeGrid};
use crate::reference::{infeasibility_profile, Reference};
use crate::rotation::RotationData;
use crate::simulator::ClosedLoopTrace;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn named(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{}", i + 1))
}

pub fn write_trace_csv(path: &Path, trace: &ClosedLoopTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let nx = trace.final_state.len();
    let nu = trace.rows.first().map(|r| r.u.len()).unwrap_or(0);
    let mut header: Vec<String> = vec!["k".into(), "t".into()];
    header.extend(named("x", nx));
    header.extend(named("u", nu));
    for h in ["err_r", "err_yr", "V", "Vbar_i", "Jbar_star", "d_terminal", "slack", "decrease_resid"] {
        header.push(h.into());
    }
    w.write_record(&header)?;
    for row in &trace.rows {
        let mut rec = vec![row.k.to_string(), fmt_f64(row.t)];
        rec.extend(row.x.iter().map(|&v| fmt_f64(v)));
        rec.extend(row.u.iter().map(|&v| fmt_f64(v)));
        rec.push(fmt_f64(row.err_r));
        rec.push(opt(row.err_yr));
        rec.push(fmt_f64(row.value));
        rec.push(opt(row.vbar_i));
        rec.push(opt(row.jbar_star));
        rec.push(opt(row.terminal_deviation));
        rec.push(fmt_f64(row.slack));
        rec.push(opt(row.decrease_resid));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `t, rx.., ru.., eps_k, jump` on `grid`; `jump` flags the steps where the
/// infeasibility exceeds `jump_threshold`.
pub fn write_reference_csv(
    path: &Path,
    reference: &dyn Reference,
    model: &LtvModel,
    grid: &TimeGrid,
    jump_threshold: f64,
) -> Result<()> {
    let eps = infeasibility_profile(reference, model, grid)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend(named("rx", reference.n_x()));
    header.extend(named("ru", reference.n_u()));
    header.push("eps_k".into());
    header.push("jump".into());
    w.write_record(&header)?;
    for (i, k) in grid.steps().enumerate() {
        let t = grid.time(k);
        let (x, u) = reference.eval(t)?;
        let mut rec = vec![fmt_f64(t)];
        rec.extend(x.iter().map(|&v| fmt_f64(v)));
        rec.extend(u.iter().map(|&v| fmt_f64(v)));
        rec.push(fmt_f64(eps[i]));
        rec.push(u8::from(eps[i] > jump_threshold).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Feasible reference with its multipliers: `k, t, x.., u.., lambda.., mu..`.
/// The last row holds the terminal state and multiplier only.
pub fn write_rotation_csv(path: &Path, rot: &RotationData) -> Result<()> {
    let grid = rot.grid();
    let nx = rot.states()[0].len();
    let nu = rot.inputs()[0].len();
    let nh = rot.multipliers().first().map(|m| m.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["k".into(), "t".into()];
    header.extend(named("x", nx));
    header.extend(named("u", nu));
    header.extend(named("lambda", nx));
    header.extend(named("mu", nh));
    w.write_record(&header)?;
    let blank = |n: usize| std::iter::repeat_n(String::new(), n);
    for (i, k) in (grid.k0..=grid.end()).enumerate() {
        let mut rec = vec![k.to_string(), fmt_f64(grid.time(k))];
        rec.extend(rot.states()[i].iter().map(|&v| fmt_f64(v)));
        match rot.inputs().get(i) {
            Some(u) => rec.extend(u.iter().map(|&v| fmt_f64(v))),
            None => rec.extend(blank(nu)),
        }
        rec.extend(rot.lam(k)?.iter().map(|&v| fmt_f64(v)));
        match rot.multipliers().get(i) {
            Some(m) => rec.extend(m.iter().map(|&v| fmt_f64(v))),
            None => rec.extend(blank(nh)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain state/input table `k, t, x.., u..`.
pub fn write_trajectory_csv(
    path: &Path,
    grid: &TimeGrid,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let nx = states.first().map(|x| x.len()).unwrap_or(0);
    let nu = inputs.first().map(|u| u.len()).unwrap_or(0);
    let mut header: Vec<String> = vec!["k".into(), "t".into()];
    header.extend(named("x", nx));
    header.extend(named("u", nu));
    w.write_record(&header)?;
    for (i, x) in states.iter().enumerate() {
        let k = grid.k0 + i;
        let mut rec = vec![k.to_string(), fmt_f64(grid.time(k))];
        rec.extend(x.iter().map(|&v| fmt_f64(v)));
        match inputs.get(i) {
            Some(u) => rec.extend(u.iter().map(|&v| fmt_f64(v))),
            None => rec.extend(std::iter::repeat_n(String::new(), nu)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
