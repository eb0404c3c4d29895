//! Terminal ingredients: LQR weight and gain, ellipsoidal terminal set, and a
//! sampling-based check of the terminal decrease, invariance and constraint conditions.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::cost::{stack, QuadForm, StageCost};
use crate::error::{Error, Result};
use crate::ltv::{ConstraintSet, LtvModel, TimeGrid};
use crate::reference::Reference;

const DOUBLING_MAX_ITER: usize = 200;
const DARE_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub p: DMatrix<f64>,
    /// Feedback `u = K x`.
    pub k: DMatrix<f64>,
    pub residual: f64,
    pub spectral_radius: f64,
    pub iterations: usize,
}

/// `A'PA - P - A'PB (R + B'PB)^{-1} B'PA + Q`, max entry.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let bpb = r + b.transpose() * p * b;
    let bpa = b.transpose() * p * a;
    let gain = bpb.lu().solve(&bpa).unwrap_or_else(|| DMatrix::from_element(bpa.nrows(), bpa.ncols(), f64::NAN));
    let res = a.transpose() * p * a - p - bpa.transpose() * gain + q;
    res.amax()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Stabilizing DARE solution by the structure-preserving doubling algorithm.
pub fn lqr_synthesis(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Rejected("inconsistent LQR data shapes".into()));
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Synthesis("R must be positive definite".into()))?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * r_chol.solve(&b.transpose());
    let mut hk = q.clone();
    let mut iterations = 0;
    for it in 1..=DOUBLING_MAX_ITER {
        iterations = it;
        let w = &eye + &gk * &hk;
        let lu = w.lu();
        let wa = lu
            .solve(&ak)
            .ok_or_else(|| Error::Synthesis("doubling iteration hit a singular matrix".into()))?;
        let wg = lu
            .solve(&gk)
            .ok_or_else(|| Error::Synthesis("doubling iteration hit a singular matrix".into()))?;
        let a_next = &ak * &wa;
        let mut g_next = &gk + &ak * wg * ak.transpose();
        let mut h_next = &hk + ak.transpose() * &hk * &wa;
        g_next = (&g_next + g_next.transpose()) * 0.5;
        h_next = (&h_next + h_next.transpose()) * 0.5;
        if !h_next.iter().all(|v| v.is_finite()) {
            return Err(Error::Synthesis("doubling iteration diverged; pair not stabilizable".into()));
        }
        let change = (&h_next - &hk).amax();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if change <= 1e-14 * hk.amax().max(1.0) {
            break;
        }
    }
    let p = hk;
    let bpb = r + b.transpose() * &p * b;
    let k = -bpb
        .lu()
        .solve(&(b.transpose() * &p * a))
        .ok_or_else(|| Error::Synthesis("R + B'PB is singular".into()))?;
    let residual = dare_residual(a, b, q, r, &p);
    let rho = spectral_radius(&(a + b * &k));
    if !(residual <= DARE_TOL * p.amax().max(1.0)) {
        return Err(Error::Synthesis(format!("Riccati residual {residual:.3e} too large")));
    }
    if !(rho < 1.0 - 1e-9) {
        return Err(Error::Synthesis(format!(
            "closed loop not Schur stable (spectral radius {rho:.6}); pair not stabilizable"
        )));
    }
    Ok(LqrSolution {
        p,
        k,
        residual,
        spectral_radius: rho,
        iterations,
    })
}

/// `X_f(t) = {x : (x - c(t))' P (x - c(t)) <= alpha}` with `kappa(x, t) = u_c(t) + K (x - c(t))`.
#[derive(Clone)]
pub struct TerminalIngredients {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub alpha: f64,
    pub center: Arc<dyn Reference>,
}

impl std::fmt::Debug for TerminalIngredients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TerminalIngredients")
            .field("p", &self.p)
            .field("k", &self.k)
            .field("alpha", &self.alpha)
            .finish()
    }
}

impl TerminalIngredients {
    pub fn new(p: DMatrix<f64>, k: DMatrix<f64>, alpha: f64, center: Arc<dyn Reference>) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Rejected(format!("terminal level must be positive, got {alpha}")));
        }
        if p.nrows() != center.n_x() || k.shape() != (center.n_u(), center.n_x()) {
            return Err(Error::dim("terminal ingredients", center.n_x(), p.nrows()));
        }
        Ok(Self { p, k, alpha, center })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(self.p.clone(), self.k.clone(), alpha, self.center.clone())
    }

    pub fn with_center(&self, center: Arc<dyn Reference>) -> Result<Self> {
        Self::new(self.p.clone(), self.k.clone(), self.alpha, center)
    }

    /// `(x - c(t))' P (x - c(t))`.
    pub fn level_of(&self, x: &DVector<f64>, t: f64) -> Result<f64> {
        let (c, _) = self.center.eval(t)?;
        let d = x - c;
        Ok(d.dot(&(&self.p * &d)))
    }

    pub fn kappa(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let (c, uc) = self.center.eval(t)?;
        Ok(uc + &self.k * (x - c))
    }
}

/// Closed-set membership in the terminal ellipsoid.
pub fn terminal_membership(ti: &TerminalIngredients, x: &DVector<f64>, t: f64) -> Result<bool> {
    Ok(ti.level_of(x, t)? <= ti.alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionCheck {
    /// Smallest margin over all samples; negative means violated.
    pub worst_margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub alpha: f64,
    pub decrease: ConditionCheck,
    pub invariance: ConditionCheck,
    pub constraints: ConditionCheck,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.decrease.pass && self.invariance.pass && self.constraints.pass
    }
}

/// Tolerance on the decrease and invariance margins.
const MARGIN_TOL: f64 = 1e-9;

struct StepData {
    t: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DVector<f64>,
    uc: DVector<f64>,
    c_next: DVector<f64>,
    stage: QuadForm,
    term: QuadForm,
    term_next: QuadForm,
}

/// Fixed sample directions and steps, reused across levels so that a bisection
/// on `alpha` sees the same random numbers at every trial.
pub struct TerminalSampler<'a> {
    ti: &'a TerminalIngredients,
    constraints: &'a dyn ConstraintSet,
    l_inv_t: DMatrix<f64>,
    draws: Vec<(usize, DVector<f64>)>,
    steps: BTreeMap<usize, StepData>,
}

impl<'a> TerminalSampler<'a> {
    pub fn new(
        ti: &'a TerminalIngredients,
        model: &LtvModel,
        cost: &dyn StageCost,
        constraints: &'a dyn ConstraintSet,
        grid: &TimeGrid,
        n_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Rejected("at least one sample is required".into()));
        }
        if grid.len == 0 {
            return Err(Error::Rejected("validation grid is empty".into()));
        }
        let nx = ti.p.nrows();
        let chol = ti
            .p
            .clone()
            .cholesky()
            .ok_or_else(|| Error::IllPosed("terminal weight is not positive definite".into()))?;
        let l_inv_t = chol
            .l()
            .transpose()
            .try_inverse()
            .ok_or_else(|| Error::IllPosed("terminal weight factor is singular".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draws = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let k = grid.k0 + rng.random_range(0..grid.len);
            let dir: DVector<f64> = DVector::from_fn(nx, |_, _| rng.sample(StandardNormal));
            let radius = rng.random::<f64>().powf(1.0 / nx as f64);
            draws.push((k, dir.normalize() * radius));
        }
        let mut steps = BTreeMap::new();
        for (k, _) in &draws {
            if steps.contains_key(k) {
                continue;
            }
            let t = grid.time(*k);
            let t_next = grid.time(k + 1);
            let (a, b) = model.matrices(*k);
            let (c, uc) = ti.center.eval(t)?;
            let (c_next, _) = ti.center.eval(t_next)?;
            steps.insert(
                *k,
                StepData {
                    t,
                    a,
                    b,
                    c,
                    uc,
                    c_next,
                    stage: cost.stage(*k, t)?,
                    term: cost.terminal(*k, t)?,
                    term_next: cost.terminal(k + 1, t_next)?,
                },
            );
        }
        Ok(Self {
            ti,
            constraints,
            l_inv_t,
            draws,
            steps,
        })
    }

    /// Check all samples at level `alpha`.
    pub fn check(&self, alpha: f64) -> ValidationReport {
        let scale = alpha.sqrt();
        let mut dec = f64::INFINITY;
        let mut inv = f64::INFINITY;
        let mut con = f64::INFINITY;
        for (k, xi) in &self.draws {
            let s = &self.steps[k];
            let dx = &self.l_inv_t * xi * scale;
            let x = &s.c + &dx;
            let u = &s.uc + &self.ti.k * &dx;
            let x_next = &s.a * &x + &s.b * &u;
            let decrease = s.term_next.eval(&x_next) - s.term.eval(&x) + s.stage.eval(&stack(&x, &u));
            dec = dec.min(-decrease);
            let e = &x_next - &s.c_next;
            inv = inv.min(alpha - e.dot(&(&self.ti.p * &e)));
            let h = crate::ltv::max_violation(self.constraints, &x, &u);
            con = con.min(if h.is_finite() { -h } else { f64::INFINITY });
            let _ = s.t;
        }
        ValidationReport {
            samples: self.draws.len(),
            alpha,
            decrease: ConditionCheck {
                worst_margin: dec,
                pass: dec >= -MARGIN_TOL,
            },
            invariance: ConditionCheck {
                worst_margin: inv,
                pass: inv >= -MARGIN_TOL,
            },
            constraints: ConditionCheck {
                worst_margin: con,
                pass: con >= 0.0,
            },
        }
    }
}

/// Sample `n_samples` states uniformly in the terminal ellipsoid at random steps of
/// `grid`, apply `kappa`, and check decrease, invariance and `h <= 0`.
pub fn validate_terminal_conditions(
    ti: &TerminalIngredients,
    model: &LtvModel,
    cost: &dyn StageCost,
    constraints: &dyn ConstraintSet,
    grid: &TimeGrid,
    n_samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let sampler = TerminalSampler::new(ti, model, cost, constraints, grid, n_samples, seed)?;
    Ok(sampler.check(ti.alpha))
}

pub const LEVEL_BRACKET: (f64, f64) = (1e-6, 1e6);
const BISECTION_ITERS: usize = 60;

/// Largest level in [`LEVEL_BRACKET`] at which every sample passes, by bisection.
pub fn max_feasible_level(
    ti: &TerminalIngredients,
    model: &LtvModel,
    cost: &dyn StageCost,
    constraints: &dyn ConstraintSet,
    grid: &TimeGrid,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let sampler = TerminalSampler::new(ti, model, cost, constraints, grid, n_samples, seed)?;
    let (mut lo, mut hi) = LEVEL_BRACKET;
    if sampler.check(hi).pass() {
        return Ok(hi);
    }
    if !sampler.check(lo).pass() {
        return Err(Error::Synthesis(format!(
            "terminal conditions fail already at level {lo:e}"
        )));
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if sampler.check(mid).pass() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
