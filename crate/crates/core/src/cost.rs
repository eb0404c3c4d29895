//! Quadratic stage and terminal costs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::reference::Reference;

/// Minimum eigenvalue accepted for a "positive definite" weight.
pub const MIN_EIGENVALUE: f64 = 1e-12;

/// `0.5 z' H z + g' z + c`.
#[derive(Debug, Clone)]
pub struct QuadForm {
    pub hess: DMatrix<f64>,
    pub grad: DVector<f64>,
    pub constant: f64,
}

impl QuadForm {
    pub fn eval(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hess * z)) + self.grad.dot(z) + self.constant
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.hess * z + &self.grad
    }

    /// `(z - center)' W (z - center)`.
    pub fn centered(weight: &DMatrix<f64>, center: &DVector<f64>) -> Self {
        let wc = weight * center;
        Self {
            hess: weight * 2.0,
            grad: -2.0 * &wc,
            constant: center.dot(&wc),
        }
    }
}

/// Concatenate state and input into the stage variable `z = (x, u)`.
pub fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

/// Stage-wise quadratic costs indexed by global step `n` at reference time `t`.
pub trait StageCost: Send + Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    /// Cost over `z = (x, u)` at step `n`.
    fn stage(&self, n: usize, t: f64) -> Result<QuadForm>;
    /// Terminal cost over `x` at step `n`.
    fn terminal(&self, n: usize, t: f64) -> Result<QuadForm>;

    fn stage_value(&self, n: usize, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        Ok(self.stage(n, t)?.eval(&stack(x, u)))
    }

    fn terminal_value(&self, n: usize, t: f64, x: &DVector<f64>) -> Result<f64> {
        Ok(self.terminal(n, t)?.eval(x))
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.max()
}

fn check_spd(what: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::Rejected(format!("{what} must be {n}x{n}, got {:?}", m.shape())));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * m.amax().max(1.0) {
        return Err(Error::Rejected(format!("{what} is not symmetric (asymmetry {asym:.2e})")));
    }
    let lmin = min_eigenvalue(m);
    if !(lmin > MIN_EIGENVALUE) {
        return Err(Error::IllPosed(format!("{what} is not positive definite (min eigenvalue {lmin:.3e})")));
    }
    Ok(())
}

/// Tracking costs `q_r = (z - r(t))' W (z - r(t))` and `p_r = (x - r_x(t))' P (x - r_x(t))`.
#[derive(Clone)]
pub struct QuadraticStageCost {
    w: DMatrix<f64>,
    p: DMatrix<f64>,
    reference: Arc<dyn Reference>,
}

impl std::fmt::Debug for QuadraticStageCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuadraticStageCost")
            .field("w", &self.w)
            .field("p", &self.p)
            .finish()
    }
}

impl QuadraticStageCost {
    pub fn new(w: DMatrix<f64>, p: DMatrix<f64>, reference: Arc<dyn Reference>) -> Result<Self> {
        let (nx, nu) = (reference.n_x(), reference.n_u());
        check_spd("W", &w, nx + nu)?;
        check_spd("P", &p, nx)?;
        Ok(Self { w, p, reference })
    }

    /// `W = blockdiag(Q, R)`.
    pub fn block_diagonal(q: &DMatrix<f64>, r: &DMatrix<f64>, p: DMatrix<f64>, reference: Arc<dyn Reference>) -> Result<Self> {
        let (nx, nu) = (q.nrows(), r.nrows());
        let mut w = DMatrix::zeros(nx + nu, nx + nu);
        w.view_mut((0, 0), (nx, nx)).copy_from(q);
        w.view_mut((nx, nx), (nu, nu)).copy_from(r);
        Self::new(w, p, reference)
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn reference(&self) -> &Arc<dyn Reference> {
        &self.reference
    }

    /// Same weights, different reference.
    pub fn with_reference(&self, reference: Arc<dyn Reference>) -> Self {
        Self {
            w: self.w.clone(),
            p: self.p.clone(),
            reference,
        }
    }

    /// Same stage weight and reference, different terminal weight.
    pub fn with_terminal_weight(&self, p: DMatrix<f64>) -> Result<Self> {
        Self::new(self.w.clone(), p, self.reference.clone())
    }

    pub fn lambda_min_w(&self) -> f64 {
        min_eigenvalue(&self.w)
    }
}

impl StageCost for QuadraticStageCost {
    fn n_x(&self) -> usize {
        self.reference.n_x()
    }
    fn n_u(&self) -> usize {
        self.reference.n_u()
    }
    fn stage(&self, _n: usize, t: f64) -> Result<QuadForm> {
        let (rx, ru) = self.reference.eval(t)?;
        Ok(QuadForm::centered(&self.w, &stack(&rx, &ru)))
    }
    fn terminal(&self, _n: usize, t: f64) -> Result<QuadForm> {
        let (rx, _) = self.reference.eval(t)?;
        Ok(QuadForm::centered(&self.p, &rx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::ConstantReference;

    fn reference() -> Arc<dyn Reference> {
        Arc::new(ConstantReference::new(DVector::from_vec(vec![1.0, -2.0]), DVector::from_vec(vec![0.5])))
    }

    #[test]
    fn centered_form_matches_definition() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let c = DVector::from_vec(vec![0.4, -1.2]);
        let q = QuadForm::centered(&w, &c);
        let z = DVector::from_vec(vec![3.0, 0.7]);
        let d = &z - &c;
        assert!((q.eval(&z) - d.dot(&(&w * &d))).abs() < 1e-12);
        assert!(q.eval(&c).abs() < 1e-14);
    }

    #[test]
    fn rejects_indefinite_weights() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, -1.0]));
        let err = QuadraticStageCost::new(w, DMatrix::identity(2, 2), reference()).unwrap_err();
        assert!(matches!(err, Error::IllPosed(_)));
        let err = QuadraticStageCost::new(DMatrix::identity(3, 3), DMatrix::zeros(2, 2), reference()).unwrap_err();
        assert!(matches!(err, Error::IllPosed(_)));
        assert!(QuadraticStageCost::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), reference()).is_err());
    }

    #[test]
    fn stage_cost_vanishes_at_reference() {
        let cost = QuadraticStageCost::new(DMatrix::identity(3, 3) * 2.0, DMatrix::identity(2, 2), reference()).unwrap();
        let (rx, ru) = cost.reference().eval(0.0).unwrap();
        assert!(cost.stage_value(0, 0.0, &rx, &ru).unwrap().abs() < 1e-14);
        assert!(cost.terminal_value(0, 0.0, &rx).unwrap().abs() < 1e-14);
        let x = DVector::from_vec(vec![2.0, -2.0]);
        assert!((cost.terminal_value(0, 0.0, &x).unwrap() - 1.0).abs() < 1e-14);
    }
}
