use gasflow_core::instances::{synthetic_case, toy_case};
use gasflow_core::milp::{enumerate_oracle, solve_milp, MilpOutcome, MilpStatus, DEFAULT_NODE_LIMIT, DEFAULT_REL_GAP};
use gasflow_core::network::*;

fn single_holder() -> PlantCase {
    let text = r#"{
        "units": [
            {"id": "src", "role": "supply"},
            {"id": "g", "role": "storage", "level_min": 0, "level_max": 100,
             "max_change": 10, "level_mid": 50, "initial_level": 50}
        ],
        "arcs": [{"id": "z", "from": "src", "to": "g", "energy": "BFG", "calorific": 3.0}],
        "horizon": {"periods": 1, "nominal_supply": {"z": [5]},
                    "start_stop_cost": 100, "deviation_cost": 1}
    }"#;
    PlantCase::from_json(text).unwrap()
}

#[test]
fn toy_and_synthetic_networks_validate() {
    assert!(validate_network(&toy_case(2).network).is_empty());
    assert!(validate_network(&synthetic_case().network).is_empty());
}

#[test]
fn demand_to_supply_arc_breaks_layering() {
    let mut net = toy_case(2).network;
    net.arcs.push(Arc {
        id: "back".into(),
        from: "steam_user".into(),
        to: "bfg_source".into(),
        energy: "steam".into(),
        calorific: 1.0,
        flow_min: None,
        flow_max: None,
    });
    let report = validate_network(&net);
    assert!(report.has("back", Rule::Layering), "{report}");
}

#[test]
fn mid_level_above_max_is_reported() {
    let mut net = toy_case(2).network;
    if let UnitRole::Storage(p) = &mut net.units[1].role {
        p.level_mid = p.level_max + 1.0;
    }
    let report = validate_network(&net);
    assert!(report.has("holder", Rule::BoundOrder));
}

#[test]
fn mass_balance_forces_single_period_level() {
    let case = single_holder();
    let (p, map) = build_deterministic(&case.network, &case.horizon).unwrap();
    let out = solve_milp(&p, DEFAULT_REL_GAP, DEFAULT_NODE_LIMIT).unwrap();
    let sched = extract_schedule(&out, &map, &case.network, &case.horizon).unwrap();
    assert!((sched.storage[0].level[0] - 55.0).abs() < 1e-9);
    assert!((sched.objective.deviation - 5.0).abs() < 1e-9);
}

#[test]
fn variable_count_follows_entity_counts() {
    let case = synthetic_case();
    let net = &case.network;
    let t = case.horizon.periods;
    let (p, map) = build_deterministic(net, &case.horizon).unwrap();
    let expected = (net.arcs.len() - net.supply_arcs().len()) * t
        + 3 * net.storage_units().len() * t
        + net.demand_units().len() * t
        + 2 * net.conversion_units().len() * t;
    assert_eq!(p.base.n_vars, expected);
    assert_eq!(map.len(), expected);
    assert_eq!(map.rows.len(), p.base.n_constraints());
    for j in 0..map.len() {
        assert_eq!(map.get(map.kind(j)), Some(j));
    }
}

#[test]
fn toy_optimum_matches_enumeration() {
    let case = toy_case(2);
    let (p, map) = build_deterministic(&case.network, &case.horizon).unwrap();
    let bb = solve_milp(&p, DEFAULT_REL_GAP, DEFAULT_NODE_LIMIT).unwrap();
    let en = enumerate_oracle(&p).unwrap();
    assert!((bb.objective_value - en.objective_value).abs() < 1e-6);
    let sched = extract_schedule(&bb, &map, &case.network, &case.horizon).unwrap();
    assert!((sched.objective.total - bb.objective_value).abs() < 1e-6);
}

#[test]
fn mismatched_map_is_a_dimension_error() {
    let case = toy_case(2);
    let (p, map) = build_deterministic(&case.network, &case.horizon).unwrap();
    let out = solve_milp(&p, DEFAULT_REL_GAP, DEFAULT_NODE_LIMIT).unwrap();
    let other = toy_case(3);
    assert!(matches!(
        extract_schedule(&out, &map, &other.network, &other.horizon),
        Err(ModelError::Dimension(_))
    ));
    let infeasible = MilpOutcome {
        status: MilpStatus::Infeasible,
        ..out
    };
    assert!(matches!(
        extract_schedule(&infeasible, &map, &case.network, &case.horizon),
        Err(ModelError::NotOptimal)
    ));
}

#[test]
fn schema_errors_carry_a_pointer() {
    let text = r#"{"units": [{"id": "g", "role": "storage", "level_min": "low"}], "arcs": [], "horizon": {}}"#;
    match PlantCase::from_json(text) {
        Err(ModelError::Schema { pointer, .. }) => assert!(pointer.starts_with("/units/0"), "{pointer}"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn plant_case_round_trips_through_json() {
    let case = synthetic_case();
    let back = PlantCase::from_json(&case.to_json()).unwrap();
    assert_eq!(back, case);
}

#[test]
fn schedule_csv_has_one_row_per_entity_period() {
    let case = toy_case(2);
    let (p, map) = build_deterministic(&case.network, &case.horizon).unwrap();
    let out = solve_milp(&p, DEFAULT_REL_GAP, DEFAULT_NODE_LIMIT).unwrap();
    let sched = extract_schedule(&out, &map, &case.network, &case.horizon).unwrap();
    let mut buf = Vec::new();
    sched.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    // 1 holder x 3 quantities + 1 boiler x 2 + 3 arcs + 1 demand, per period
    assert_eq!(text.lines().count(), 1 + 2 * (3 + 2 + 3 + 1));
    let back: Schedule = serde_json::from_str(&sched.to_json()).unwrap();
    assert_eq!(back, sched);
}
