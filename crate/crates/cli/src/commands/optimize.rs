use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::RunLog;
use crate::pipeline::{load_case, stage_model};
use crate::report::{ReportBody, RobustSummary};

#[derive(Serialize)]
struct Breakdown<'a> {
    objective: f64,
    lower_bound: f64,
    first_stage_cost: f64,
    worst_case_recourse: f64,
    nominal: &'a gasflow_core::network::ObjectiveBreakdown,
    worst_case: &'a gasflow_core::network::ObjectiveBreakdown,
}

pub(super) fn run(cfg: &RunConfig, log: &mut RunLog, body: &mut ReportBody) -> Result<(), CliError> {
    let case = load_case(cfg, log)?;
    let set = super::configured_set(cfg, &case, log, body)?;
    log.write("uncertainty_set.json", set.to_json().as_bytes())?;

    let model = log.phase("stage", |_| stage_model(&case, &set))?;
    let state = log.phase("ccg", |_| model.solve(&set, cfg, &[]))?;
    let x = &state.incumbent;
    let worst = state
        .incumbent_worst
        .as_ref()
        .ok_or_else(|| CliError::SolverLimit("C&CG finished without evaluating a worst case".into()))?;

    let nominal = model.schedule_at(x, &set.nominal())?;
    let worst_schedule = model.schedule_at(x, &worst.supply)?;
    log.write_with("schedule.csv", |buf| nominal.write_csv(buf))?;
    log.write("schedule.json", nominal.to_json().as_bytes())?;
    log.write_with("worst_case_schedule.csv", |buf| worst_schedule.write_csv(buf))?;
    log.write_with("trace.csv", |buf| state.write_trace_csv(buf))?;
    log.write("worst_scenarios.json", state.worst_json().as_bytes())?;

    let first_stage_cost = model.staged.first_stage_cost(x);
    let worst_terms = worst_schedule.objective;
    let breakdown = Breakdown {
        objective: state.upper_bound,
        lower_bound: state.lower_bound,
        first_stage_cost,
        worst_case_recourse: worst.value,
        nominal: &nominal.objective,
        worst_case: &worst_terms,
    };
    log.write(
        "breakdown.json",
        serde_json::to_string_pretty(&breakdown)
            .expect("breakdown serializes")
            .as_bytes(),
    )?;
    log::info!(
        "robust objective {:.6} (deterministic {:.6}) after {} iterations",
        state.upper_bound,
        state.deterministic_objective,
        state.iteration
    );
    body.robust = Some(RobustSummary {
        objective: state.upper_bound,
        lower_bound: state.lower_bound,
        iterations: state.iteration,
        converged: state.converged,
        method: state.method,
        deterministic_objective: state.deterministic_objective,
        first_stage_cost,
        nominal: nominal.objective,
        worst_case: worst_terms,
        first_stage: nominal.conversion.clone(),
    });
    if !state.converged {
        return Err(CliError::SolverLimit(format!(
            "C&CG stopped after {} iterations with gap {:.6}",
            state.iteration,
            state.gap()
        )));
    }
    Ok(())
}
