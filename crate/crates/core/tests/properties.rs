use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use trackmpc::ocp::kkt_residual;
use trackmpc::reference::ConstantReference;
use trackmpc::rotation::telescoping_identity_check;
use trackmpc::{
    solve_qp, solve_reference_ocp, AffineConstraints, ConstraintSet, LtvModel, OcpProblem, QuadraticStageCost,
    Reference, RotationData, StageCost, TerminalMode, TimeGrid,
};

fn instance(nx: usize, m: usize, seed: &[f64], x_init: &[f64]) -> (OcpProblem, RotationData) {
    let s = |i: usize| seed[i % seed.len()];
    let a = DMatrix::from_fn(nx, nx, |i, j| if i == j { 0.9 } else { 0.1 * s(i * nx + j) });
    let b = DMatrix::from_fn(nx, 1, |i, _| 0.5 + 0.5 * s(i + 7).abs());
    let model = LtvModel::from_fn(nx, 1, 0.1, move |k| (&a * (1.0 + 0.05 * (k as f64).cos()), b.clone())).unwrap();
    let w = DMatrix::identity(nx + 1, nx + 1);
    let reference: Arc<dyn Reference> =
        Arc::new(ConstantReference::new(DVector::from_fn(nx, |i, _| s(i + 3)), DVector::from_element(1, 0.2)));
    let cost: Arc<dyn StageCost> =
        Arc::new(QuadraticStageCost::new(w, DMatrix::identity(nx, nx) * 2.0, reference.clone()).unwrap());
    let cs: Arc<dyn ConstraintSet> = Arc::new(
        AffineConstraints::boxes(&vec![-20.0; nx], &vec![20.0; nx], &[-0.5], &[0.5]).unwrap(),
    );
    let grid = TimeGrid::new(0, 0.0, 0.1, m);
    let x0 = DVector::from_row_slice(&x_init[..nx]);
    let sol = solve_reference_ocp(&model, cost.clone(), cs.clone(), reference.as_ref(), grid, x0.clone()).unwrap();
    let rot = RotationData::from_solution(&model, &sol).unwrap();
    let prob = OcpProblem::new(model, cost, cs, grid, x0 * 0.5, TerminalMode::CostOnly).unwrap();
    (prob, rot)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn telescoping_holds_along_any_rollout(
        nx in 2usize..=4,
        m in 5usize..=30,
        seed in prop::collection::vec(-1.0f64..1.0, 16),
        x_init in prop::collection::vec(-2.0f64..2.0, 4),
        inputs in prop::collection::vec(-3.0f64..3.0, 30),
    ) {
        let (prob, rot) = instance(nx, m, &seed, &x_init);
        let us: Vec<DVector<f64>> = inputs[..m].iter().map(|&u| DVector::from_element(1, u)).collect();
        let xs = prob.model.rollout(0, &prob.x_init, &us).unwrap();
        let d = telescoping_identity_check(&prob, &rot, &xs, &us).unwrap();
        prop_assert!(d <= 1e-9, "discrepancy {d:e}");
    }

    #[test]
    fn qp_solutions_satisfy_kkt(
        nx in 2usize..=4,
        m in 5usize..=30,
        seed in prop::collection::vec(-1.0f64..1.0, 16),
        x_init in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let (prob, _) = instance(nx, m, &seed, &x_init);
        let sol = solve_qp(&prob).unwrap();
        prop_assert!(kkt_residual(&prob, &sol).unwrap().max() <= 1e-8);
        prop_assert!(sol.inputs.iter().all(|u| u[0].abs() <= 0.5 + 1e-8));
    }
}
