use gasflow_core::instances::{synthetic_case, toy_case};
use gasflow_core::milp::{solve_milp, DEFAULT_NODE_LIMIT, DEFAULT_REL_GAP};
use gasflow_core::network::{build_deterministic, Arc, HorizonData, PlantCase, UnitRole, VarKind};
use gasflow_core::tsro::*;
use gasflow_core::uncertainty::{realize, sample, ArcUncertainty, ScenarioIndicators, UncertaintySet};

fn symmetric_set(case: &PlantCase, frac: f64, gamma: usize) -> UncertaintySet {
    let arcs = case
        .horizon
        .nominal_supply
        .iter()
        .map(|(id, z)| ArcUncertainty {
            arc: id.clone(),
            nominal: z.clone(),
            down: z.iter().map(|v| v * frac).collect(),
            up: z.iter().map(|v| v * frac).collect(),
            budget: gamma,
        })
        .collect();
    UncertaintySet::budget(case.horizon.periods, arcs).unwrap()
}

fn staged_for(case: &PlantCase, set: &UncertaintySet) -> StagedProblem {
    let (p, map) = build_deterministic(&case.network, &case.horizon).unwrap();
    stage(&p, &map, &case.network, &case.horizon, set).unwrap()
}

fn deterministic_objective(case: &PlantCase) -> f64 {
    let (p, _) = build_deterministic(&case.network, &case.horizon).unwrap();
    solve_milp(&p, DEFAULT_REL_GAP, DEFAULT_NODE_LIMIT)
        .unwrap()
        .objective_value
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Every first-stage vector that satisfies the first-stage rows.
fn feasible_first_stages(staged: &StagedProblem) -> Vec<Vec<f64>> {
    let n = staged.n_x();
    assert!(n <= 12, "enumeration limited to small first stages");
    (0..1u32 << n)
        .map(|mask| (0..n).map(|i| f64::from((mask >> i) & 1)).collect::<Vec<f64>>())
        .filter(|x| staged.check_first_stage(x).is_ok())
        .collect()
}

/// All budget-feasible extreme indicator patterns.
fn extreme_points(set: &UncertaintySet) -> Vec<ScenarioIndicators> {
    let cells: Vec<(usize, usize)> = (0..set.arcs.len())
        .flat_map(|s| (0..set.periods).map(move |t| (s, t)))
        .collect();
    let mut out = Vec::new();
    let total = 3usize.pow(cells.len() as u32);
    for code in 0..total {
        let mut ind = ScenarioIndicators::nominal(set);
        let mut c = code;
        for &(s, t) in &cells {
            match c % 3 {
                1 => ind.up[s][t] = true,
                2 => ind.down[s][t] = true,
                _ => {}
            }
            c /= 3;
        }
        if (0..set.arcs.len()).all(|s| ind.used(s) <= set.arcs[s].budget) {
            out.push(ind);
        }
    }
    out
}

fn brute_worst(staged: &StagedProblem, x: &[f64], set: &UncertaintySet) -> f64 {
    extreme_points(set)
        .iter()
        .map(|ind| staged.second_stage(x, &realize(set, ind).unwrap()).unwrap().cost)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// min over first stages of (first-stage cost + worst recourse cost).
fn robust_oracle(staged: &StagedProblem, set: &UncertaintySet) -> f64 {
    feasible_first_stages(staged)
        .iter()
        .map(|x| staged.first_stage_cost(x) + brute_worst(staged, x, set))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn toy_has_one_balance_row_per_holder_period() {
    let case = toy_case(2);
    let set = symmetric_set(&case, 0.5, 1);
    let staged = staged_for(&case, &set);
    assert_eq!(staged.w.len(), 2);
    let (p, _) = build_deterministic(&case.network, &case.horizon).unwrap();
    assert_eq!(staged.row_block.len(), p.base.constraints.len());
    let blocks =
        staged.a.len() + staged.q.len() + staged.w.len() + staged.g.iter().filter(|r| r.origin.is_some()).count();
    assert_eq!(blocks, p.base.constraints.len());
}

#[test]
fn all_on_assembly_matches_pinned_deterministic() {
    let case = toy_case(2);
    let set = symmetric_set(&case, 0.5, 1);
    let (p, map) = build_deterministic(&case.network, &case.horizon).unwrap();
    let staged = stage(&p, &map, &case.network, &case.horizon, &set).unwrap();
    let x: Vec<f64> = staged
        .x_vars
        .iter()
        .map(|&j| match map.kind(j) {
            VarKind::On { .. } => 1.0,
            _ => 0.0,
        })
        .collect();
    let rec = staged.second_stage(&x, &set.nominal()).unwrap();
    let mut pinned = p.clone();
    for (&j, &v) in staged.x_vars.iter().zip(&x) {
        pinned.base.bounds[j] = (v, v);
    }
    let det = solve_milp(&pinned, DEFAULT_REL_GAP, DEFAULT_NODE_LIMIT).unwrap();
    assert!(close(staged.first_stage_cost(&x) + rec.cost, det.objective_value, 1e-6));
}

#[test]
fn network_without_gasholder_is_rejected_before_staging() {
    let mut case = toy_case(2);
    // feed the boiler straight from the source
    case.network.units.retain(|u| !matches!(u.role, UnitRole::Storage(_)));
    case.network.arcs.retain(|a| a.id != "bfg_in");
    let z: &mut Arc = case.network.arcs.iter_mut().find(|a| a.id == "z_bfg").unwrap();
    z.to = "boiler".into();
    z.flow_min = Some(5.0);
    z.flow_max = Some(30.0);
    let err = build_deterministic(&case.network, &case.horizon).expect_err("no balance rows to carry supply");
    assert!(err.to_string().contains("z_bfg"), "{err}");
}

#[test]
fn mismatched_set_is_rejected() {
    let case = toy_case(2);
    let other = toy_case(3);
    let set = symmetric_set(&other, 0.5, 1);
    let (p, map) = build_deterministic(&case.network, &case.horizon).unwrap();
    assert!(stage(&p, &map, &case.network, &case.horizon, &set).is_err());
}

#[test]
fn collapsed_set_gives_the_nominal_recourse() {
    let case = toy_case(2);
    for (frac, gamma) in [(0.0, 2), (0.5, 0)] {
        let set = symmetric_set(&case, frac, gamma);
        let staged = staged_for(&case, &set);
        let (x, _) = staged.deterministic_first_stage().unwrap();
        let nominal = staged.second_stage(&x, &set.nominal()).unwrap().cost;
        let wc = worst_case(&staged, &x, &set).unwrap();
        assert!(close(wc.value, nominal, 1e-6), "{} vs {nominal}", wc.value);
        assert_eq!(wc.indicators, ScenarioIndicators::nominal(&set));
    }
}

#[test]
fn single_deviation_worst_case_matches_enumeration() {
    let case = toy_case(2);
    for frac in [0.3, 0.6, 0.9] {
        let set = symmetric_set(&case, frac, 1);
        let staged = staged_for(&case, &set);
        for x in feasible_first_stages(&staged) {
            // nominal plus 2 directions x |holders| x T single deviations
            let mut best = staged.second_stage(&x, &set.nominal()).unwrap().cost;
            for t in 0..2 {
                for up in [true, false] {
                    let mut ind = ScenarioIndicators::nominal(&set);
                    if up {
                        ind.up[0][t] = true;
                    } else {
                        ind.down[0][t] = true;
                    }
                    let z = realize(&set, &ind).unwrap();
                    best = best.max(staged.second_stage(&x, &z).unwrap().cost);
                }
            }
            let wc = worst_case(&staged, &x, &set).unwrap();
            assert!(
                close(wc.value, best, 1e-5),
                "frac {frac} x {x:?}: {} vs {best}",
                wc.value
            );
            assert!(close(wc.value, wc.primal, AUDIT_TOL));
            assert!(wc.indicators.used(0) <= 1);
        }
    }
}

#[test]
fn elastic_slack_enters_the_worst_case_value() {
    let mut case = toy_case(2);
    for u in case.network.units.iter_mut() {
        if let UnitRole::Storage(s) = &mut u.role {
            s.initial_level = 22.0;
        }
    }
    let set = symmetric_set(&case, 1.0, 2);
    let staged = staged_for(&case, &set);
    let (x, _) = staged.deterministic_first_stage().unwrap();
    let wc = worst_case(&staged, &x, &set).unwrap();
    assert!(wc.slack > SLACK_TOL, "no slack in {wc:?}");
    let penalty = staged
        .slack_cols
        .iter()
        .map(|&p| staged.d[p])
        .fold(f64::INFINITY, f64::min);
    assert!(wc.value >= penalty * wc.slack * (1.0 - 1e-9));
    assert!(close(wc.value, wc.primal, AUDIT_TOL));
}

#[test]
fn master_over_the_nominal_path_is_the_deterministic_model() {
    let case = toy_case(2);
    let set = symmetric_set(&case, 0.5, 1);
    let staged = staged_for(&case, &set);
    let det = deterministic_objective(&case);
    let one = build_master(&staged, &[set.nominal()]).unwrap();
    let sol = solve_master(&one, staged.n_x()).unwrap();
    assert!(close(sol.objective, det, 1e-6));
    let two = build_master(&staged, &[set.nominal(), set.nominal()]).unwrap();
    assert_eq!(two.scenarios.len(), 1);
    assert_eq!(two.milp.base.n_vars, one.milp.base.n_vars);
    assert!(close(solve_master(&two, staged.n_x()).unwrap().objective, det, 1e-9));
    assert!(matches!(build_master(&staged, &[]), Err(TsroError::NoScenarios)));
}

#[test]
fn master_grows_linearly_in_scenarios() {
    let case = toy_case(2);
    let set = symmetric_set(&case, 0.5, 2);
    let staged = staged_for(&case, &set);
    let paths = sample(&set, 3, 3);
    let sizes: Vec<usize> = (1..=3)
        .map(|k| build_master(&staged, &paths[..k]).unwrap().milp.base.n_vars)
        .collect();
    assert_eq!(sizes[1] - sizes[0], staged.n_y());
    assert_eq!(sizes[2] - sizes[1], staged.n_y());
}

#[test]
fn zero_budget_converges_to_the_deterministic_optimum() {
    let case = toy_case(2);
    let det = deterministic_objective(&case);
    for (frac, gamma) in [(0.5, 0), (0.0, 2)] {
        let set = symmetric_set(&case, frac, gamma);
        let staged = staged_for(&case, &set);
        let state = ccg_solve(&staged, &set, CcgOptions::default()).unwrap();
        assert!(state.converged);
        assert_eq!(state.iteration, 1);
        assert!(close(state.upper_bound, det, 1e-6));
        assert!(close(state.lower_bound, det, 1e-6));
    }
}

#[test]
fn toy_robust_optimum_matches_double_enumeration() {
    let case = toy_case(2);
    for frac in [0.3, 0.6] {
        for gamma in 0..=2 {
            let set = symmetric_set(&case, frac, gamma);
            let staged = staged_for(&case, &set);
            let state = ccg_solve(&staged, &set, CcgOptions::default()).unwrap();
            assert_eq!(state.method, WorstCaseMethod::Exact);
            assert!(state.converged);
            let oracle = robust_oracle(&staged, &set);
            assert!(
                close(state.upper_bound, oracle, 1e-5),
                "frac {frac} gamma {gamma}: {} vs {oracle}",
                state.upper_bound
            );
        }
    }
}

#[test]
fn full_budget_equals_the_box_set() {
    let case = toy_case(2);
    let budget = symmetric_set(&case, 0.6, 2);
    let boxed = UncertaintySet::boxed(2, budget.arcs.clone()).unwrap();
    let a = ccg_solve(&staged_for(&case, &budget), &budget, CcgOptions::default()).unwrap();
    let b = ccg_solve(&staged_for(&case, &boxed), &boxed, CcgOptions::default()).unwrap();
    assert!(close(a.upper_bound, b.upper_bound, 1e-9));
}

#[test]
fn bounds_are_monotone_along_the_trace() {
    let case = toy_case(3);
    let set = symmetric_set(&case, 0.6, 2);
    let staged = staged_for(&case, &set);
    let state = ccg_solve(&staged, &set, CcgOptions::default()).unwrap();
    let tol = state.options.tolerance * (1.0 + state.upper_bound.abs());
    for w in state.trace.windows(2) {
        assert!(w[1].lower_bound >= w[0].lower_bound);
        assert!(w[1].upper_bound <= w[0].upper_bound);
    }
    for it in &state.trace {
        assert!(it.lower_bound <= it.upper_bound + tol);
    }
    let mut csv = Vec::new();
    state.write_trace_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("iteration,lower_bound,upper_bound,subproblem_seconds,master_seconds"));
    assert_eq!(text.lines().count(), state.trace.len() + 1);
}

#[test]
fn iteration_cap_returns_an_unconverged_incumbent() {
    let case = toy_case(3);
    let set = symmetric_set(&case, 0.9, 3);
    let staged = staged_for(&case, &set);
    let options = CcgOptions {
        max_iterations: 1,
        ..CcgOptions::default()
    };
    let state = ccg_solve(&staged, &set, options).unwrap();
    assert_eq!(state.iteration, 1);
    if !state.converged {
        assert!(state.gap() > 0.0);
    }
    assert!(state.incumbent_worst.is_some());
}

#[test]
fn search_agrees_with_the_exact_subproblem_on_small_sets() {
    for periods in [2usize, 3] {
        let case = toy_case(periods);
        for gamma in 0..=periods {
            let set = symmetric_set(&case, 0.7, gamma);
            let staged = staged_for(&case, &set);
            for x in feasible_first_stages(&staged) {
                let exact = worst_case_with(&staged, &x, &set, WorstCaseMethod::Exact, &[]).unwrap();
                let found = worst_case_with(&staged, &x, &set, WorstCaseMethod::Search, &[]).unwrap();
                assert_eq!(found.method, WorstCaseMethod::Search);
                assert!(
                    close(exact.value, found.value, 1e-6),
                    "T {periods} gamma {gamma}: {} vs {}",
                    exact.value,
                    found.value
                );
            }
        }
    }
}

fn truncated_synthetic(periods: usize) -> PlantCase {
    let mut case = synthetic_case();
    let h: &mut HorizonData = &mut case.horizon;
    h.periods = periods;
    h.demands.values_mut().for_each(|v| v.truncate(periods));
    h.nominal_supply.values_mut().for_each(|v| v.truncate(periods));
    case
}

#[test]
fn search_matches_brute_force_on_a_three_gas_plant() {
    let case = truncated_synthetic(3);
    for (frac, gamma) in [(0.12, 1), (0.3, 2), (0.3, 3)] {
        let set = symmetric_set(&case, frac, gamma);
        let staged = staged_for(&case, &set);
        let (x, _) = staged.deterministic_first_stage().unwrap();
        let (value, ind, _) = search_worst(&staged, &x, &set, &[]).unwrap();
        let brute = brute_worst(&staged, &x, &set);
        assert!(close(value, brute, 1e-6), "gamma {gamma}: {value} vs {brute}");
        for s in 0..set.arcs.len() {
            assert_eq!(ind.used(s), gamma, "the full budget is always spent");
        }
    }
}

#[test]
fn seeds_outside_the_budget_are_rejected() {
    let case = toy_case(2);
    let set = symmetric_set(&case, 0.5, 1);
    let staged = staged_for(&case, &set);
    let mut seed = ScenarioIndicators::nominal(&set);
    seed.down[0] = vec![true, true];
    assert!(matches!(
        ccg_solve_seeded(&staged, &set, CcgOptions::default(), &[seed]),
        Err(TsroError::SetMismatch(_))
    ));
}

#[test]
fn nominal_policy_evaluation_is_the_deterministic_recourse() {
    let case = toy_case(2);
    let set = symmetric_set(&case, 0.5, 1);
    let staged = staged_for(&case, &set);
    let (x, det) = staged.deterministic_first_stage().unwrap();
    let report = evaluate_policy(&staged, &x, &[set.nominal()]).unwrap();
    assert_eq!(report.costs.len(), 1);
    assert!(close(report.first_stage_cost + report.costs[0], det, 1e-6));
    assert_eq!(report.slack_violations, 0);
}

#[test]
fn sampled_costs_stay_below_the_robust_bound() {
    let case = toy_case(3);
    let set = symmetric_set(&case, 0.6, 2);
    let staged = staged_for(&case, &set);
    let state = ccg_solve(&staged, &set, CcgOptions::default()).unwrap();
    let report = evaluate_policy(&staged, &state.incumbent, &sample(&set, 11, 200)).unwrap();
    assert!(report.first_stage_cost + report.max <= state.upper_bound + 1e-5);
    assert!(report.mean <= report.max);

    // the deterministic plan does no better on the robust plan's worst case
    let worst = state.incumbent_worst.as_ref().unwrap();
    let (x_det, _) = staged.deterministic_first_stage().unwrap();
    let det_worst = worst_case(&staged, &x_det, &set).unwrap();
    assert!(staged.first_stage_cost(&x_det) + det_worst.value >= state.upper_bound - 1e-6);
    assert!(close(worst.value, worst.primal, AUDIT_TOL));
}
