use std::collections::BTreeMap;

use gasflow_core::forecast::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_params(n_trees: usize, max_depth: usize) -> GbdtParams {
    GbdtParams {
        n_trees,
        max_depth,
        learning_rate: 0.1,
        min_leaf: 5,
    }
}

#[test]
fn supervised_pairs_are_lagged_most_recent_first() {
    let h: Vec<f64> = (1..=30).map(f64::from).collect();
    let ds = make_supervised(&h, 3, 1).unwrap();
    assert_eq!(ds.steps[0].targets.len(), 27);
    assert_eq!(ds.steps[0].features[0], vec![3.0, 2.0, 1.0]);
    assert_eq!(ds.steps[0].targets[0], 4.0);
}

#[test]
fn step_eight_pair_count() {
    let h = vec![0.0; 1000];
    let ds = make_supervised(&h, 20, 8).unwrap();
    assert_eq!(ds.steps[7].targets.len(), 973);
    for data in &ds.steps {
        for (x, &ti) in data.features.iter().zip(&data.target_index) {
            assert!(ti >= data.step - 1 + 20);
            assert_eq!(x.len(), 20);
        }
    }
}

#[test]
fn short_history_names_the_minimum() {
    match make_supervised(&[0.0; 10], 20, 8) {
        Err(ForecastError::InsufficientHistory { required, .. }) => assert_eq!(required, 28),
        other => panic!("{other:?}"),
    }
}

#[test]
fn constant_series_predicts_the_constant() {
    let h = vec![7.5; 120];
    let ds = make_supervised(&h, 4, 2).unwrap();
    for level in [0.05, 0.5, 0.95] {
        let m = fit_quantile_gbdt(&ds, 2, level, &small_params(20, 3)).unwrap();
        assert_eq!(m.predict(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 7.5);
    }
}

#[test]
fn initialization_only_model_is_the_empirical_quantile() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y: Vec<f64> = (0..301).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let x: Vec<Vec<f64>> = y.iter().map(|_| vec![rng.gen()]).collect();
    for level in [0.1, 0.5, 0.9] {
        let m = fit_samples(&x, &y, level, &small_params(1, 0)).unwrap();
        assert_eq!(m.predict(&[0.3]).unwrap(), empirical_quantile(&y, level));
    }
}

#[test]
fn initial_constant_minimizes_pinball_over_a_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..10.0)).collect();
    for q in [0.05, 0.3, 0.5, 0.95] {
        let c = empirical_quantile(&y, q);
        let best = mean_pinball(q, &y, &vec![c; y.len()]);
        let mut grid: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.01).collect();
        grid.extend_from_slice(&y);
        for g in grid {
            assert!(mean_pinball(q, &y, &vec![g; y.len()]) >= best - 1e-12);
        }
    }
}

#[test]
fn uninformative_uniform_targets_recover_the_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let y: Vec<f64> = (0..2000).map(|_| rng.gen()).collect();
    let flat = vec![vec![0.0, 0.0]; 2000];
    let m = fit_samples(&flat, &y, 0.9, &GbdtParams::default()).unwrap();
    let probe = m.predict(&[0.0, 0.0]).unwrap();
    assert_eq!(probe, empirical_quantile(&y, 0.9));
    assert!((probe - 0.9).abs() < 0.05, "{probe}");

    // noise features: individual leaves wander, the average does not
    let x: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.gen(), rng.gen()]).collect();
    let m = fit_samples(&x, &y, 0.9, &GbdtParams::default()).unwrap();
    let mean = (0..500)
        .map(|_| m.predict(&[rng.gen(), rng.gen()]).unwrap())
        .sum::<f64>()
        / 500.0;
    assert!((mean - 0.9).abs() < 0.05, "{mean}");
    let covered = x
        .iter()
        .zip(&y)
        .filter(|(xi, &yi)| yi <= m.predict(xi).unwrap())
        .count();
    assert!((covered as f64 / 2000.0 - 0.9).abs() < 0.02);
}

#[test]
fn training_loss_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut h = vec![0.0f64; 400];
    for i in 1..400 {
        h[i] = 0.8 * h[i - 1] + rng.gen_range(-1.0..1.0);
    }
    let ds = make_supervised(&h, 5, 3).unwrap();
    for level in [0.05, 0.5, 0.95] {
        let m = fit_quantile_gbdt(&ds, 3, level, &small_params(60, 3)).unwrap();
        assert_eq!(m.training_loss.len(), 61);
        for w in m.training_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(m.training_loss[60] < m.training_loss[0]);
    }
}

#[test]
fn single_split_tree_traced_by_hand() {
    // x < 0 has targets {0, 1, 2, ...}; x > 0 has targets {10, 11, ...}
    let x: Vec<Vec<f64>> = (0..20).map(|i| vec![if i < 10 { -1.0 } else { 1.0 }]).collect();
    let y: Vec<f64> = (0..20)
        .map(|i| if i < 10 { i as f64 } else { 10.0 + (i - 10) as f64 })
        .collect();
    let params = GbdtParams {
        n_trees: 1,
        max_depth: 1,
        learning_rate: 1.0,
        min_leaf: 1,
    };
    let m = fit_samples(&x, &y, 0.5, &params).unwrap();
    // median of all 20 is the 10th smallest: 9
    assert_eq!(m.initial, 9.0);
    let tree = &m.trees[0];
    match tree.nodes[0] {
        TreeNode::Split { feature, threshold, .. } => {
            assert_eq!(feature, 0);
            assert_eq!(threshold, 0.0);
        }
        _ => panic!("expected a split"),
    }
    // left residuals -9..0, median (5th smallest) -5; right residuals 1..10, median 5
    assert_eq!(m.predict(&[-1.0]).unwrap(), 4.0);
    assert_eq!(m.predict(&[1.0]).unwrap(), 14.0);
    assert!(matches!(
        m.predict(&[]),
        Err(ForecastError::LagLength { expected: 1, got: 0 })
    ));
}

#[test]
fn metric_hand_examples() {
    assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!((mape(&[110.0], &[100.0]).unwrap() - 0.10).abs() < 1e-12);
    assert!((mape(&[90.0, 110.0], &[100.0, 100.0]).unwrap() - 0.10).abs() < 1e-12);
    assert!(matches!(mape(&[1.0], &[0.0]), Err(ForecastError::ZeroActual(0))));
    let lo = [0.0; 4];
    let hi = [10.0; 4];
    assert_eq!(picp(&lo, &hi, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.0);
    assert_eq!(picp(&lo, &hi, &[-1.0, 11.0, 0.0, 10.0]).unwrap(), 0.0);
    assert_eq!(picp(&lo, &hi, &[1.0, 2.0, 3.0, 40.0]).unwrap(), 0.75);
}

#[test]
fn constant_history_gives_degenerate_intervals() {
    let history = BTreeMap::from([("z".to_string(), vec![42.0; 80])]);
    let bank = train_bank(&history, 80, 5, 3, 0.1, &small_params(10, 2)).unwrap();
    let (iv, report) = forecast_intervals(&bank, &history).unwrap();
    assert_eq!(report.count(), 0);
    for c in &iv.arcs["z"] {
        assert_eq!((c.lower, c.median, c.upper), (42.0, 42.0, 42.0));
    }
}

#[test]
fn all_levels_median_gives_zero_width() {
    let history = BTreeMap::from([("z".to_string(), (0..100).map(|i| (i % 7) as f64).collect())]);
    let mut bank = train_bank(&history, 100, 4, 2, 0.1, &small_params(10, 2)).unwrap();
    let medians: Vec<ModelEntry> = bank.models.iter().filter(|e| e.level == 0.5).cloned().collect();
    bank.models = medians
        .iter()
        .flat_map(|e| interval_levels(bank.alpha).map(|level| ModelEntry { level, ..e.clone() }))
        .collect();
    let (iv, _) = forecast_intervals(&bank, &history).unwrap();
    for c in &iv.arcs["z"] {
        assert_eq!(c.lower, c.upper);
    }
}

#[test]
fn missing_model_is_reported() {
    let history = BTreeMap::from([("z".to_string(), vec![1.0; 50])]);
    let mut bank = train_bank(&history, 50, 3, 2, 0.1, &small_params(2, 1)).unwrap();
    bank.models.retain(|e| e.step != 2);
    assert!(matches!(
        forecast_intervals(&bank, &history),
        Err(ForecastError::MissingModel { step: 2, .. })
    ));
}

#[test]
fn history_csv_round_trip_and_errors() {
    let series = BTreeMap::from([("a".to_string(), vec![1.0, 2.5]), ("b".to_string(), vec![3.0, 4.0])]);
    let mut buf = Vec::new();
    write_history_csv(&series, &mut buf).unwrap();
    assert_eq!(read_history_csv(buf.as_slice()).unwrap(), series);

    match read_history_csv("time,arc,value\n0,a,1\n".as_bytes()) {
        Err(ForecastError::Parse { message, .. }) => assert!(message.contains("timestamp")),
        other => panic!("{other:?}"),
    }
    match read_history_csv("timestamp,arc,value\n0,a,1\n1,a,x\n".as_bytes()) {
        Err(ForecastError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    assert!(read_history_csv("timestamp,arc,value\n5,a,1\n2,a,1\n".as_bytes()).is_err());
}

#[test]
fn intervals_csv_round_trip() {
    let iv = ForecastIntervals {
        alpha: 0.1,
        periods: 2,
        arcs: BTreeMap::from([(
            "z".to_string(),
            vec![
                QuantileTriple {
                    lower: 90.0,
                    median: 100.0,
                    upper: 115.0,
                },
                QuantileTriple {
                    lower: 1.0,
                    median: 2.0,
                    upper: 3.0,
                },
            ],
        )]),
    };
    let mut buf = Vec::new();
    iv.write_csv(&mut buf).unwrap();
    assert_eq!(ForecastIntervals::read_csv(buf.as_slice(), 0.1).unwrap(), iv);
}

#[test]
fn model_bank_json_round_trip_and_version_check() {
    let history = BTreeMap::from([("z".to_string(), (0..60).map(f64::from).collect())]);
    let bank = train_bank(&history, 60, 3, 1, 0.2, &small_params(3, 2)).unwrap();
    assert_eq!(ModelBank::from_json(&bank.to_json()).unwrap(), bank);
    let mut old = bank.clone();
    old.version = 0;
    assert!(matches!(
        ModelBank::from_json(&old.to_json()),
        Err(ForecastError::Version(0))
    ));
}

#[test]
fn training_is_deterministic() {
    let history = BTreeMap::from([("z".to_string(), (0..90).map(|i| ((i * 37) % 11) as f64).collect())]);
    let a = train_bank(&history, 90, 4, 2, 0.1, &small_params(15, 3)).unwrap();
    let b = train_bank(&history, 90, 4, 2, 0.1, &small_params(15, 3)).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}
