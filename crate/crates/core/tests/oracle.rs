use gasflow_core::lp::{LpProblem, Relation};
use gasflow_core::oracle::*;

#[test]
fn dense_solve_matches_hand_solution() {
    let x = solve_dense(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]).unwrap();
    assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    assert!(solve_dense(vec![vec![1.0, 2.0], vec![2.0, 4.0]], vec![1.0, 2.0]).is_none());
}

#[test]
fn enumeration_on_unit_box() {
    let mut p = LpProblem::new(2);
    p.objective = vec![-1.0, -1.0];
    p.bounds = vec![(0.0, 1.0); 2];
    p.add_constraint(vec![1.0, 1.0], Relation::Le, 1.0);
    let (obj, _) = vertex_enumeration(&p, 1e-9).unwrap();
    assert!((obj + 1.0).abs() < 1e-12);
}
