use gasflow_core::network::{format_value, Schedule};
use gasflow_core::tsro::{evaluate_policy, worst_case_with};
use gasflow_core::uncertainty::{sample, write_paths_csv};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::RunLog;
use crate::pipeline::{load_case, stage_model};
use crate::report::{EvaluationSummary, ReportBody};

/// Nearest-rank quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub(super) fn run(cfg: &RunConfig, log: &mut RunLog, body: &mut ReportBody) -> Result<(), CliError> {
    let case = load_case(cfg, log)?;
    let set = super::configured_set(cfg, &case, log, body)?;
    let model = log.phase("stage", |_| stage_model(&case, &set))?;
    let x = match &cfg.paths.schedule {
        Some(path) => {
            let text = log.read_input("schedule", path)?;
            let schedule: Schedule = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: schedule JSON: {e}", path.display())))?;
            model.first_stage_from(&schedule)?
        }
        None => log.phase("ccg", |_| model.solve(&set, cfg, &[]))?.incumbent,
    };

    let mut trajectories = Vec::new();
    let mut kinds = Vec::new();
    if cfg.evaluate.include_nominal {
        trajectories.push(set.nominal());
        kinds.push("nominal");
    }
    for z in sample(&set, cfg.seed, cfg.evaluate.samples) {
        trajectories.push(z);
        kinds.push("sample");
    }
    if trajectories.is_empty() {
        return Err(CliError::Validation(
            "nothing to evaluate: evaluate.samples is 0 and include_nominal is false".into(),
        ));
    }
    let policy = log.phase("evaluate", |_| evaluate_policy(&model.staged, &x, &trajectories))?;
    let worst = log.phase("worst_case", |_| {
        worst_case_with(&model.staged, &x, &set, cfg.ccg.method, &[])
    })?;

    let totals: Vec<f64> = policy.costs.iter().map(|c| policy.first_stage_cost + c).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let table = (|| -> Result<Vec<u8>, csv::Error> {
        w.write_record([
            "trajectory",
            "kind",
            "first_stage_cost",
            "second_stage_cost",
            "total_cost",
            "slack",
        ])?;
        for (i, kind) in kinds.iter().enumerate() {
            w.write_record([
                i.to_string(),
                kind.to_string(),
                format_value(policy.first_stage_cost),
                format_value(policy.costs[i]),
                format_value(totals[i]),
                format_value(policy.slacks[i]),
            ])?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    })()
    .map_err(|e| CliError::io(&log.out_dir().join("evaluation.csv"), e))?;
    log.write("evaluation.csv", &table)?;
    log.write_with("trajectories.csv", |buf| write_paths_csv(&trajectories, buf))?;

    let mut sorted = totals.clone();
    sorted.sort_by(f64::total_cmp);
    let worst_total = policy.first_stage_cost + worst.value;
    let max_total = sorted[sorted.len() - 1];
    let summary = EvaluationSummary {
        trajectories: totals.len(),
        include_nominal: cfg.evaluate.include_nominal,
        first_stage_cost: policy.first_stage_cost,
        mean_total: policy.first_stage_cost + policy.mean,
        min_total: sorted[0],
        max_total,
        p95_total: quantile(&sorted, 0.95),
        slack_violations: policy.slack_violations,
        worst_case_total: worst_total,
        worst_case_method: worst.method,
        max_within_worst_case: max_total <= worst_total + 1e-6 * (1.0 + worst_total.abs()),
    };
    if !summary.max_within_worst_case {
        log.warn(format!(
            "a sampled trajectory costs {max_total:.6}, above the worst case {worst_total:.6} found over the set"
        ));
    }
    log.write(
        "evaluation_summary.json",
        serde_json::to_string_pretty(&summary)
            .expect("summary serializes")
            .as_bytes(),
    )?;
    body.evaluation = Some(summary);
    Ok(())
}
