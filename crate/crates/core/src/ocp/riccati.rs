//! Equality-constrained LQ subproblem solved by a backward Riccati sweep.
//!
//! ```text
//! min  sum_n 0.5 z_n' H_n z_n + q_n' z_n  +  0.5 x_M' H_M x_M + q_M' x_M
//! s.t. x_0 = e_0,   x_{n+1} = A_n x_n + B_n u_n + e_{n+1}
//! ```
//!
//! Multipliers follow the Lagrangian `lam_0'(x_0 - e_0) + sum lam_{n+1}'(x_{n+1} - A x - B u - e)`,
//! which gives `lam_n = -(P_n x_n + p_n)` from the cost-to-go.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) struct LqStage<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
}

pub(crate) struct LqSolution {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub lam: Vec<DVector<f64>>,
}

pub(crate) fn solve_lq(
    stages: &[LqStage<'_>],
    h_term: &DMatrix<f64>,
    q_term: &DVector<f64>,
    offsets: &[DVector<f64>],
) -> Result<LqSolution> {
    let m = stages.len();
    debug_assert_eq!(offsets.len(), m + 1);
    let nx = h_term.nrows();

    let mut p_mats: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); m + 1];
    let mut p_vecs: Vec<DVector<f64>> = vec![DVector::zeros(0); m + 1];
    let mut gains: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(m);
    p_mats[m] = h_term.clone();
    p_vecs[m] = q_term.clone();

    for n in (0..m).rev() {
        let st = &stages[n];
        let nu = st.b.ncols();
        let pn = &p_mats[n + 1];
        let pe = pn * &offsets[n + 1] + &p_vecs[n + 1];
        let pa = pn * st.a;
        let pb = pn * st.b;

        let hxx = st.h.view((0, 0), (nx, nx));
        let hux = st.h.view((nx, 0), (nu, nx));
        let huu = st.h.view((nx, nx), (nu, nu));

        let qxx = hxx + st.a.transpose() * &pa;
        let qux = hux + st.b.transpose() * &pa;
        let quu = huu + st.b.transpose() * &pb;
        let qx = st.q.rows(0, nx) + st.a.transpose() * &pe;
        let qu = st.q.rows(nx, nu) + st.b.transpose() * &pe;

        let chol = quu
            .clone()
            .cholesky()
            .ok_or_else(|| Error::IllPosed(format!("input Hessian not positive definite at stage {n}")))?;
        let k_mat = -chol.solve(&qux);
        let k_vec = -chol.solve(&qu);

        let mut p_new = &qxx + qux.transpose() * &k_mat;
        p_new = (&p_new + p_new.transpose()) * 0.5;
        let p_vec = qx + qux.transpose() * &k_vec;

        p_mats[n] = p_new;
        p_vecs[n] = p_vec;
        gains.push((k_mat, k_vec));
    }
    gains.reverse();

    let mut x = Vec::with_capacity(m + 1);
    let mut u = Vec::with_capacity(m);
    let mut lam = Vec::with_capacity(m + 1);
    x.push(offsets[0].clone());
    for n in 0..m {
        let (k_mat, k_vec) = &gains[n];
        let un = k_mat * &x[n] + k_vec;
        let next = stages[n].a * &x[n] + stages[n].b * &un + &offsets[n + 1];
        lam.push(-(&p_mats[n] * &x[n] + &p_vecs[n]));
        u.push(un);
        x.push(next);
    }
    lam.push(-(&p_mats[m] * &x[m] + &p_vecs[m]));
    Ok(LqSolution { x, u, lam })
}
