//! Mehrotra predictor-corrector interior-point method over the stage structure.
//!
//! Inequalities are written with slacks, `G_n z_n + c_n + s_n = 0`, `s_n >= 0`, and are
//! eliminated from each Newton system so that what remains is an equality-constrained
//! LQ problem solved by [`solve_lq`]. The optional terminal ellipsoid
//! `(x - c)' S (x - c) <= level` enters as one quadratic row; in penalty mode it gets
//! a scalar slack `sigma >= 0` priced at `penalty * sigma`, which is eliminated from
//! the terminal block before the Riccati sweep.

use nalgebra::{DMatrix, DVector};

use super::riccati::{solve_lq, LqStage};
use crate::cost::{stack, QuadForm};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct QpStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub cost: QuadForm,
    /// Linearized inequalities `g z + c <= 0`.
    pub g: DMatrix<f64>,
    pub c: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct EllipsoidRow {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub level: f64,
    pub penalty: Option<f64>,
}

impl EllipsoidRow {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        d.dot(&(&self.shape * &d)) - self.level
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * (&self.shape * (x - &self.center))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct StructuredQp {
    pub stages: Vec<QpStage>,
    pub terminal_cost: QuadForm,
    pub ellipsoid: Option<EllipsoidRow>,
    pub x_init: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IpmSettings {
    pub tol_feas: f64,
    pub tol_comp: f64,
    pub max_iter: usize,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            tol_feas: 1e-10,
            tol_comp: 1e-10,
            max_iter: 200,
        }
    }
}

/// Terminal-row duals and the penalty slack.
#[derive(Debug, Clone, Default)]
pub(crate) struct TerminalDuals {
    pub mu_e: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct IpmSolution {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub lam: Vec<DVector<f64>>,
    pub mu: Vec<DVector<f64>>,
    pub terminal: Option<TerminalDuals>,
    pub iterations: usize,
}

#[derive(Clone)]
struct Iterate {
    x: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    lam: Vec<DVector<f64>>,
    s: Vec<DVector<f64>>,
    mu: Vec<DVector<f64>>,
    // ellipsoid slack/dual, penalty variable, its slack/dual
    se: f64,
    mue: f64,
    sig: f64,
    ss: f64,
    mus: f64,
}

struct Residuals {
    rd: Vec<DVector<f64>>,
    rd_term: DVector<f64>,
    r_sigma: f64,
    re: Vec<DVector<f64>>,
    ri: Vec<DVector<f64>>,
    ri_e: f64,
    ri_s: f64,
}

struct Direction {
    dx: Vec<DVector<f64>>,
    du: Vec<DVector<f64>>,
    dlam: Vec<DVector<f64>>,
    ds: Vec<DVector<f64>>,
    dmu: Vec<DVector<f64>>,
    dse: f64,
    dmue: f64,
    dsig: f64,
    dss: f64,
    dmus: f64,
}

/// Complementarity right-hand sides, shaped like the slacks.
struct CompRhs {
    stage: Vec<DVector<f64>>,
    e: f64,
    s: f64,
}

impl StructuredQp {
    fn nx(&self) -> usize {
        self.x_init.len()
    }

    fn has_ellipsoid(&self) -> bool {
        self.ellipsoid.is_some()
    }

    fn penalty(&self) -> Option<f64> {
        self.ellipsoid.as_ref().and_then(|e| e.penalty)
    }

    fn n_rows(&self) -> usize {
        let stage: usize = self.stages.iter().map(|s| s.c.len()).sum();
        stage + usize::from(self.has_ellipsoid()) + usize::from(self.penalty().is_some())
    }
}

fn residuals(qp: &StructuredQp, it: &Iterate) -> Residuals {
    let m = qp.stages.len();
    let nx = qp.nx();
    let mut rd = Vec::with_capacity(m);
    let mut re = Vec::with_capacity(m + 1);
    let mut ri = Vec::with_capacity(m);
    re.push(&it.x[0] - &qp.x_init);
    for (n, st) in qp.stages.iter().enumerate() {
        let z = stack(&it.x[n], &it.u[n]);
        let mut r = st.cost.gradient(&z) + st.g.transpose() * &it.mu[n];
        let at = st.a.transpose() * &it.lam[n + 1];
        let bt = st.b.transpose() * &it.lam[n + 1];
        {
            let mut rx = r.rows_mut(0, nx);
            rx += &it.lam[n];
            rx -= &at;
        }
        {
            let nu = st.b.ncols();
            let mut ru = r.rows_mut(nx, nu);
            ru -= &bt;
        }
        rd.push(r);
        re.push(&it.x[n + 1] - &st.a * &it.x[n] - &st.b * &it.u[n]);
        ri.push(&st.g * &z + &st.c + &it.s[n]);
    }
    let xm = &it.x[m];
    let mut rd_term = qp.terminal_cost.gradient(xm) + &it.lam[m];
    let (mut ri_e, mut ri_s, mut r_sigma) = (0.0, 0.0, 0.0);
    if let Some(e) = &qp.ellipsoid {
        rd_term += e.gradient(xm) * it.mue;
        ri_e = e.value(xm) + it.se;
        if let Some(w) = e.penalty {
            ri_e -= it.sig;
            ri_s = -it.sig + it.ss;
            r_sigma = w - it.mue - it.mus;
        }
    }
    Residuals {
        rd,
        rd_term,
        r_sigma,
        re,
        ri,
        ri_e,
        ri_s,
    }
}

fn newton(qp: &StructuredQp, it: &Iterate, res: &Residuals, rc: &CompRhs) -> Result<Direction> {
    let m = qp.stages.len();
    let mut lq = Vec::with_capacity(m);
    let mut w_stage = Vec::with_capacity(m);
    for (n, st) in qp.stages.iter().enumerate() {
        let s = &it.s[n];
        let mu = &it.mu[n];
        let d = mu.component_div(s);
        let w = (mu.component_mul(&res.ri[n]) - &rc.stage[n]).component_div(s);
        let mut gd = st.g.clone();
        for (j, mut row) in gd.row_iter_mut().enumerate() {
            row *= d[j];
        }
        let h = &st.cost.hess + st.g.transpose() * gd;
        let q = &res.rd[n] + st.g.transpose() * &w;
        lq.push(LqStage { a: &st.a, b: &st.b, h, q });
        w_stage.push(w);
    }

    let xm = &it.x[m];
    let mut h_term = qp.terminal_cost.hess.clone();
    let mut q_term = res.rd_term.clone();
    let mut sigma_block: Option<(DVector<f64>, f64, f64)> = None;
    let (mut we, mut ws) = (0.0, 0.0);
    let mut grad = DVector::zeros(0);
    if let Some(e) = &qp.ellipsoid {
        grad = e.gradient(xm);
        let de = it.mue / it.se;
        we = (it.mue * res.ri_e - rc.e) / it.se;
        h_term += &e.shape * (2.0 * it.mue);
        q_term += &grad * we;
        if e.penalty.is_some() {
            let ds = it.mus / it.ss;
            ws = (it.mus * res.ri_s - rc.s) / it.ss;
            let hxs = &grad * (-de);
            let hss = de + ds;
            let rs = res.r_sigma - we - ws;
            // de - de^2 / (de + ds), written without cancellation.
            h_term += &grad * grad.transpose() * (de * ds / hss);
            q_term -= &hxs * (rs / hss);
            sigma_block = Some((hxs, hss, rs));
        } else {
            h_term += &grad * grad.transpose() * de;
        }
    }

    let mut offsets = Vec::with_capacity(m + 1);
    for r in &res.re {
        offsets.push(-r);
    }
    let sol = solve_lq(&lq, &h_term, &q_term, &offsets)?;

    let mut ds = Vec::with_capacity(m);
    let mut dmu = Vec::with_capacity(m);
    for (n, st) in qp.stages.iter().enumerate() {
        let dz = stack(&sol.x[n], &sol.u[n]);
        let dsn = -&res.ri[n] - &st.g * dz;
        let dmun = (-&rc.stage[n] - it.mu[n].component_mul(&dsn)).component_div(&it.s[n]);
        ds.push(dsn);
        dmu.push(dmun);
    }
    let (mut dse, mut dmue, mut dsig, mut dss, mut dmus) = (0.0, 0.0, 0.0, 0.0, 0.0);
    if qp.has_ellipsoid() {
        if let Some((hxs, hss, rs)) = &sigma_block {
            dsig = -(rs + hxs.dot(&sol.x[m])) / hss;
        }
        dse = -res.ri_e - grad.dot(&sol.x[m]) + dsig;
        dmue = (-rc.e - it.mue * dse) / it.se;
        if sigma_block.is_some() {
            dss = -res.ri_s + dsig;
            dmus = (-rc.s - it.mus * dss) / it.ss;
        }
    }
    let _ = (we, ws);
    Ok(Direction {
        dx: sol.x,
        du: sol.u,
        dlam: sol.lam,
        ds,
        dmu,
        dse,
        dmue,
        dsig,
        dss,
        dmus,
    })
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}

fn max_step_scalar(v: f64, dv: f64) -> f64 {
    if dv < 0.0 {
        (-v / dv).min(1.0)
    } else {
        1.0
    }
}

fn step_to_boundary(qp: &StructuredQp, it: &Iterate, d: &Direction) -> f64 {
    let mut alpha: f64 = 1.0;
    for n in 0..qp.stages.len() {
        alpha = alpha.min(max_step(&it.s[n], &d.ds[n]));
        alpha = alpha.min(max_step(&it.mu[n], &d.dmu[n]));
    }
    if qp.has_ellipsoid() {
        alpha = alpha.min(max_step_scalar(it.se, d.dse));
        alpha = alpha.min(max_step_scalar(it.mue, d.dmue));
        if qp.penalty().is_some() {
            alpha = alpha.min(max_step_scalar(it.ss, d.dss));
            alpha = alpha.min(max_step_scalar(it.mus, d.dmus));
        }
    }
    alpha
}

fn complementarity_sum(qp: &StructuredQp, it: &Iterate, d: Option<(&Direction, f64)>) -> f64 {
    let mut total = 0.0;
    for n in 0..qp.stages.len() {
        for j in 0..it.s[n].len() {
            let (mut s, mut mu) = (it.s[n][j], it.mu[n][j]);
            if let Some((d, a)) = d {
                s += a * d.ds[n][j];
                mu += a * d.dmu[n][j];
            }
            total += s * mu;
        }
    }
    if qp.has_ellipsoid() {
        let (mut se, mut mue) = (it.se, it.mue);
        if let Some((d, a)) = d {
            se += a * d.dse;
            mue += a * d.dmue;
        }
        total += se * mue;
        if qp.penalty().is_some() {
            let (mut ss, mut mus) = (it.ss, it.mus);
            if let Some((d, a)) = d {
                ss += a * d.dss;
                mus += a * d.dmus;
            }
            total += ss * mus;
        }
    }
    total
}

fn max_complementarity(qp: &StructuredQp, it: &Iterate) -> f64 {
    let mut worst: f64 = 0.0;
    for n in 0..qp.stages.len() {
        worst = worst.max(it.s[n].component_mul(&it.mu[n]).amax());
    }
    if qp.has_ellipsoid() {
        worst = worst.max((it.se * it.mue).abs());
        if qp.penalty().is_some() {
            worst = worst.max((it.ss * it.mus).abs());
        }
    }
    worst
}

fn apply(it: &mut Iterate, d: &Direction, alpha: f64) {
    for (v, dv) in it.x.iter_mut().zip(&d.dx) {
        v.axpy(alpha, dv, 1.0);
    }
    for (v, dv) in it.u.iter_mut().zip(&d.du) {
        v.axpy(alpha, dv, 1.0);
    }
    for (v, dv) in it.lam.iter_mut().zip(&d.dlam) {
        v.axpy(alpha, dv, 1.0);
    }
    for (v, dv) in it.s.iter_mut().zip(&d.ds) {
        v.axpy(alpha, dv, 1.0);
    }
    for (v, dv) in it.mu.iter_mut().zip(&d.dmu) {
        v.axpy(alpha, dv, 1.0);
    }
    it.se += alpha * d.dse;
    it.mue += alpha * d.dmue;
    it.sig += alpha * d.dsig;
    it.ss += alpha * d.dss;
    it.mus += alpha * d.dmus;
}

fn initial_iterate(qp: &StructuredQp, guess: Option<(&[DVector<f64>], &[DVector<f64>])>) -> Result<Iterate> {
    let m = qp.stages.len();
    let nx = qp.nx();
    let (x, u, lam) = match guess {
        Some((gx, gu)) if gx.len() == m + 1 && gu.len() == m => {
            (gx.to_vec(), gu.to_vec(), vec![DVector::zeros(nx); m + 1])
        }
        _ => {
            let lq: Vec<_> = qp
                .stages
                .iter()
                .map(|st| LqStage {
                    a: &st.a,
                    b: &st.b,
                    h: st.cost.hess.clone(),
                    q: st.cost.grad.clone(),
                })
                .collect();
            let mut offsets = vec![DVector::zeros(nx); m + 1];
            offsets[0] = qp.x_init.clone();
            let sol = solve_lq(&lq, &qp.terminal_cost.hess, &qp.terminal_cost.grad, &offsets)?;
            (sol.x, sol.u, sol.lam)
        }
    };
    let mut s = Vec::with_capacity(m);
    let mut mu = Vec::with_capacity(m);
    for (n, st) in qp.stages.iter().enumerate() {
        let h = &st.g * stack(&x[n], &u[n]) + &st.c;
        s.push(h.map(|v| (-v).max(1.0)));
        mu.push(DVector::from_element(h.len(), 1.0));
    }
    let (mut se, mut sig, mut ss) = (1.0, 0.0, 1.0);
    if let Some(e) = &qp.ellipsoid {
        let g = e.value(&x[m]);
        if e.penalty.is_some() {
            sig = g.max(0.0) + 1.0;
            ss = sig;
            se = (sig - g).max(1.0);
        } else {
            se = (-g).max(1.0);
        }
    }
    Ok(Iterate {
        x,
        u,
        lam,
        s,
        mu,
        se,
        mue: 1.0,
        sig,
        ss,
        mus: 1.0,
    })
}

fn vec_amax(v: &[DVector<f64>]) -> f64 {
    v.iter().map(|x| x.amax()).fold(0.0, f64::max)
}

pub(crate) fn solve(
    qp: &StructuredQp,
    settings: &IpmSettings,
    guess: Option<(&[DVector<f64>], &[DVector<f64>])>,
) -> Result<IpmSolution> {
    let mut it = initial_iterate(qp, guess)?;
    let n_rows = qp.n_rows();
    let mut last_primal = f64::INFINITY;

    for iter in 0..=settings.max_iter {
        let res = residuals(qp, &it);
        let primal = vec_amax(&res.re).max(vec_amax(&res.ri)).max(res.ri_e.abs()).max(res.ri_s.abs());
        let dual = vec_amax(&res.rd).max(res.rd_term.amax()).max(res.r_sigma.abs());
        let comp = max_complementarity(qp, &it);
        last_primal = primal;
        // Stationarity rounding grows with the multipliers.
        let dual_scale = 1.0 + vec_amax(&it.lam).max(vec_amax(&it.mu)).max(it.mue.abs()).max(it.mus.abs());
        let dual_ok = dual <= settings.tol_feas * dual_scale;
        if primal <= settings.tol_feas && dual_ok && comp <= settings.tol_comp {
            return Ok(finish(qp, it, iter));
        }
        let nearly = primal <= 10.0 * settings.tol_feas && dual <= 10.0 * settings.tol_feas * dual_scale && comp <= 10.0 * settings.tol_comp;
        if iter == settings.max_iter {
            break;
        }
        let mu_max = it.mu.iter().map(|m| m.amax()).fold(it.mue.abs(), f64::max);
        if mu_max > 1e14 {
            return Err(Error::Infeasible(format!(
                "multipliers diverged (|mu| = {mu_max:.2e}) with primal residual {primal:.2e}"
            )));
        }

        if n_rows == 0 {
            let rc = CompRhs {
                stage: it.s.iter().map(|s| DVector::zeros(s.len())).collect(),
                e: 0.0,
                s: 0.0,
            };
            let d = newton(qp, &it, &res, &rc)?;
            apply(&mut it, &d, 1.0);
            continue;
        }

        let mean = complementarity_sum(qp, &it, None) / n_rows as f64;
        let rc_aff = CompRhs {
            stage: it.s.iter().zip(&it.mu).map(|(s, m)| s.component_mul(m)).collect(),
            e: it.se * it.mue,
            s: it.ss * it.mus,
        };
        let d_aff = match newton(qp, &it, &res, &rc_aff) {
            Ok(d) => d,
            Err(_) if nearly => return Ok(finish(qp, it, iter)),
            Err(e) => return Err(e),
        };
        let a_aff = step_to_boundary(qp, &it, &d_aff);
        let mean_aff = complementarity_sum(qp, &it, Some((&d_aff, a_aff))) / n_rows as f64;
        let centering = (mean_aff / mean).powi(3).min(1.0);
        let target = centering * mean;

        let rc = CompRhs {
            stage: (0..it.s.len())
                .map(|n| {
                    let base = it.s[n].component_mul(&it.mu[n]) + d_aff.ds[n].component_mul(&d_aff.dmu[n]);
                    base.add_scalar(-target)
                })
                .collect(),
            e: it.se * it.mue + d_aff.dse * d_aff.dmue - target,
            s: it.ss * it.mus + d_aff.dss * d_aff.dmus - target,
        };
        let d = match newton(qp, &it, &res, &rc) {
            Ok(d) => d,
            Err(_) if nearly => return Ok(finish(qp, it, iter)),
            Err(e) => return Err(e),
        };
        let a_max = step_to_boundary(qp, &it, &d);
        let tau = (1.0 - mean).clamp(0.99, 1.0 - 1e-8);
        let alpha = (tau * a_max).min(1.0);
        apply(&mut it, &d, alpha);
    }

    if last_primal > 1e-6 {
        Err(Error::Infeasible(format!(
            "primal residual stalled at {last_primal:.2e} after {} iterations",
            settings.max_iter
        )))
    } else {
        Err(Error::NotConverged {
            iterations: settings.max_iter,
            residual: last_primal,
            best: None,
        })
    }
}

fn finish(qp: &StructuredQp, it: Iterate, iterations: usize) -> IpmSolution {
    let terminal = qp.ellipsoid.as_ref().map(|e| TerminalDuals {
        mu_e: it.mue,
        sigma: if e.penalty.is_some() { it.sig } else { 0.0 },
    });
    IpmSolution {
        x: it.x,
        u: it.u,
        lam: it.lam,
        mu: it.mu,
        terminal,
        iterations,
    }
}
