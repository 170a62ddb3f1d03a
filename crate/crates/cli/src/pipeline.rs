//! Steps shared by the subcommands: loading the plant, forecasting supply,
//! building the uncertainty set and solving the robust model.

use std::collections::BTreeMap;

use gasflow_core::forecast::{
    evaluate_bank, forecast_intervals, read_history_csv, train_bank, ArcMetrics, ForecastIntervals, ModelBank,
};
use gasflow_core::instances::{synthetic_case, synthetic_history, toy_case};
use gasflow_core::lp::{solve_lp, LpProblem, LpStatus, Relation};
use gasflow_core::milp::{MilpOutcome, MilpProblem, MilpStatus};
use gasflow_core::network::{
    build_deterministic, extract_schedule, validate_network, DemandClass, EnergyNetwork, PlantCase, RowKind, Schedule,
    UnitRole, VarKind, VariableMap,
};
use gasflow_core::tsro::{ccg_solve_seeded, stage, CcgState, StagedProblem, TsroError};
use gasflow_core::uncertainty::{
    from_forecast, ArcUncertainty, Budgets, ScenarioIndicators, SupplyPath, UncertaintySet,
};
use log::info;

use crate::config::{Instance, RunConfig};
use crate::error::CliError;
use crate::output::RunLog;

pub type History = BTreeMap<String, Vec<f64>>;

/// Loads the plant case, applies cost overrides and validates the network.
pub fn load_case(cfg: &RunConfig, log: &mut RunLog) -> Result<PlantCase, CliError> {
    let mut case = match &cfg.paths.network {
        Some(path) => {
            let text = log.read_input("network", path)?;
            PlantCase::from_json(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => match cfg.instance {
            Instance::Synthetic => synthetic_case(),
            Instance::Toy { periods } => toy_case(periods),
        },
    };
    let c = &cfg.costs;
    if let Some(v) = c.start_stop {
        case.horizon.start_stop_cost = v;
    }
    if let Some(v) = c.deviation {
        case.horizon.deviation_cost = v;
    }
    for unit in &mut case.network.units {
        if let UnitRole::Demand(d) = &mut unit.role {
            let over = match d.class {
                DemandClass::ProducedEnergy => c.energy_penalty,
                DemandClass::EmittedGas => c.emission_penalty,
            };
            if let Some(v) = over {
                d.penalty = v;
            }
        }
    }
    let report = validate_network(&case.network);
    if !report.is_empty() {
        return Err(CliError::Validation(format!("network validation failed:\n{report}")));
    }
    if let Some(h) = cfg.forecaster.horizon {
        if h != case.horizon.periods {
            return Err(CliError::Validation(format!(
                "forecaster.horizon {h} differs from the plant horizon {}",
                case.horizon.periods
            )));
        }
    }
    Ok(case)
}

pub fn load_history(cfg: &RunConfig, log: &mut RunLog) -> Result<History, CliError> {
    match &cfg.paths.history {
        Some(path) => {
            let text = log.read_input("history", path)?;
            read_history_csv(text.as_bytes()).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
        }
        None => match cfg.instance {
            Instance::Synthetic if cfg.paths.network.is_none() => Ok(synthetic_history(cfg.seed, cfg.history.length)),
            _ => Err(CliError::Validation(
                "paths.history is required unless the bundled synthetic plant is used".into(),
            )),
        },
    }
}

pub struct ForecastRun {
    pub alpha: f64,
    pub train_len: usize,
    pub bank: ModelBank,
    pub intervals: ForecastIntervals,
    pub metrics: Vec<ArcMetrics>,
    pub rearranged: usize,
}

/// Trains the quantile models on the leading share of the history, scores
/// them on the rest and forecasts the horizon after the last observation.
pub fn run_forecast(cfg: &RunConfig, case: &PlantCase, history: &History, alpha: f64) -> Result<ForecastRun, CliError> {
    let f = &cfg.forecaster;
    let periods = case.horizon.periods;
    let need = f.lags + periods + 1;
    let net = &case.network;
    for a in net.supply_arcs() {
        let id = &net.arcs[a].id;
        if !history.contains_key(id) {
            return Err(CliError::Validation(format!(
                "history has no series for supply arc {id}"
            )));
        }
    }
    for (arc, series) in history {
        if !net.supply_arcs().iter().any(|&a| &net.arcs[a].id == arc) {
            return Err(CliError::Validation(format!(
                "history arc {arc} is not a supply arc of the plant"
            )));
        }
        if series.len() < need {
            return Err(CliError::Validation(format!(
                "arc {arc}: {} observations, need at least p + T + 1 = {need}",
                series.len()
            )));
        }
    }
    let shortest = history.values().map(Vec::len).min().unwrap_or(0);
    let train_len = (shortest as f64 * f.train_fraction).floor() as usize;
    if train_len < need || train_len >= shortest {
        return Err(CliError::Validation(format!(
            "training split of {train_len} of {shortest} observations leaves no room for p + T + 1 = {need} \
             training rows and a held-out tail"
        )));
    }
    let bank = train_bank(history, train_len, f.lags, periods, alpha, &f.params())?;
    let metrics = evaluate_bank(&bank, history, train_len)?;
    let (intervals, report) = forecast_intervals(&bank, history)?;
    info!(
        "forecast alpha {alpha}: {} arcs, {} rearranged cells",
        intervals.arcs.len(),
        report.count()
    );
    Ok(ForecastRun {
        alpha,
        train_len,
        bank,
        intervals,
        metrics,
        rearranged: report.count(),
    })
}

/// Where the uncertainty set comes from, in order of precedence.
pub enum SetSource {
    File,
    Intervals,
    Deviation(f64),
    Forecast,
}

pub fn set_source(cfg: &RunConfig) -> SetSource {
    if cfg.paths.uncertainty_set.is_some() {
        SetSource::File
    } else if cfg.paths.intervals.is_some() {
        SetSource::Intervals
    } else if let Some(d) = cfg.deviation {
        SetSource::Deviation(d)
    } else {
        SetSource::Forecast
    }
}

/// History needed by `source`, if any.
pub fn load_case_history(cfg: &RunConfig, source: &SetSource, log: &mut RunLog) -> Result<Option<History>, CliError> {
    match source {
        SetSource::Forecast => Ok(Some(load_history(cfg, log)?)),
        _ => Ok(None),
    }
}

/// Symmetric set `nominal ± frac * |nominal|` over every supply arc.
pub fn deviation_set(case: &PlantCase, frac: f64) -> Result<UncertaintySet, CliError> {
    let arcs = case
        .horizon
        .nominal_supply
        .iter()
        .map(|(arc, nominal)| {
            let dev: Vec<f64> = nominal.iter().map(|v| frac * v.abs()).collect();
            ArcUncertainty {
                arc: arc.clone(),
                nominal: nominal.clone(),
                down: dev.clone(),
                up: dev,
                budget: 0,
            }
        })
        .collect();
    Ok(UncertaintySet::budget(case.horizon.periods, arcs)?)
}

/// Uncertainty set before budgets are applied, plus the forecast that
/// produced it. A set file comes back with its own budgets.
pub fn base_set(
    cfg: &RunConfig,
    case: &PlantCase,
    history: Option<&History>,
    alpha: f64,
    log: &mut RunLog,
) -> Result<(UncertaintySet, Option<ForecastRun>), CliError> {
    let (intervals, run) = match set_source(cfg) {
        SetSource::File => {
            let path = cfg.paths.uncertainty_set.as_ref().expect("set path");
            let text = log.read_input("uncertainty_set", path)?;
            let set = UncertaintySet::from_json(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            return Ok((set, None));
        }
        SetSource::Deviation(frac) => return Ok((deviation_set(case, frac)?, None)),
        SetSource::Intervals => {
            let path = cfg.paths.intervals.as_ref().expect("intervals path");
            let text = log.read_input("intervals", path)?;
            let iv = ForecastIntervals::read_csv(text.as_bytes(), alpha)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            (iv, None)
        }
        SetSource::Forecast => {
            let history = history.ok_or_else(|| CliError::Validation("no supply history available".into()))?;
            let run = run_forecast(cfg, case, history, alpha)?;
            (run.intervals.clone(), Some(run))
        }
    };
    let (set, warnings) = from_forecast(&intervals, &Budgets::Uniform(0))?;
    for w in warnings {
        log.warn(w);
    }
    Ok((set, run))
}

/// The plant with its nominal supply replaced by the set's nominal path, so
/// that a zero budget reproduces the deterministic model.
pub fn align_nominal(case: &PlantCase, set: &UncertaintySet) -> Result<PlantCase, CliError> {
    set.check_network(&case.network, case.horizon.periods)?;
    let mut case = case.clone();
    for a in &set.arcs {
        case.horizon.nominal_supply.insert(a.arc.clone(), a.nominal.clone());
    }
    Ok(case)
}

/// Compiled and staged model for one plant and set shape.
pub struct StagedModel {
    pub case: PlantCase,
    pub problem: MilpProblem,
    pub map: VariableMap,
    pub staged: StagedProblem,
}

pub fn stage_model(case: &PlantCase, set: &UncertaintySet) -> Result<StagedModel, CliError> {
    let case = align_nominal(case, set)?;
    let (problem, map) = build_deterministic(&case.network, &case.horizon)?;
    let staged = stage(&problem, &map, &case.network, &case.horizon, set)?;
    Ok(StagedModel {
        case,
        problem,
        map,
        staged,
    })
}

impl StagedModel {
    /// C&CG with an initial scenario pool; infeasible models come back as a
    /// diagnostic naming the constraints that cannot be met together.
    pub fn solve(
        &self,
        set: &UncertaintySet,
        cfg: &RunConfig,
        seeds: &[ScenarioIndicators],
    ) -> Result<CcgState, CliError> {
        match ccg_solve_seeded(&self.staged, set, cfg.ccg.into(), seeds) {
            Ok(state) => Ok(state),
            Err(e @ (TsroError::DeterministicInfeasible | TsroError::MasterInfeasible)) => {
                Err(CliError::Validation(format!(
                    "{e}\n{}",
                    infeasibility_diagnostic(&self.problem, &self.map, &self.case.network)
                )))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Full schedule for first stage `x` and the recourse at `supply`.
    pub fn schedule_at(&self, x: &[f64], supply: &SupplyPath) -> Result<Schedule, CliError> {
        let rec = self.staged.second_stage(x, supply)?;
        let total = self.staged.first_stage_cost(x) + rec.cost;
        let outcome = MilpOutcome {
            status: MilpStatus::Optimal,
            assignment: self.staged.assemble(x, &rec.y),
            objective_value: total,
            bound: total,
            node_count: 0,
            gap: 0.0,
        };
        let mut horizon = self.case.horizon.clone();
        for (arc, values) in supply {
            horizon.nominal_supply.insert(arc.clone(), values.clone());
        }
        Ok(extract_schedule(&outcome, &self.map, &self.case.network, &horizon)?)
    }

    /// First-stage vector from a schedule's on/off and start-stop traces.
    pub fn first_stage_from(&self, schedule: &Schedule) -> Result<Vec<f64>, CliError> {
        let net = &self.case.network;
        let periods = self.case.horizon.periods;
        if schedule.periods != periods {
            return Err(CliError::Validation(format!(
                "schedule covers {} periods, plant horizon has {periods}",
                schedule.periods
            )));
        }
        for trace in &schedule.conversion {
            match net.unit_index(&trace.unit) {
                Some(k) if matches!(net.units[k].role, UnitRole::Conversion(_)) => {}
                _ => {
                    return Err(CliError::Validation(format!(
                        "schedule unit {} is not a conversion unit of the plant",
                        trace.unit
                    )))
                }
            }
            if trace.on.len() != periods || trace.start_stop.len() != periods {
                return Err(CliError::Validation(format!(
                    "schedule unit {} has the wrong period count",
                    trace.unit
                )));
            }
        }
        let traces: BTreeMap<&str, _> = schedule.conversion.iter().map(|c| (c.unit.as_str(), c)).collect();
        let mut x = Vec::with_capacity(self.staged.x_vars.len());
        for &j in &self.staged.x_vars {
            let (unit, t, start_stop) = match self.map.kind(j) {
                VarKind::On { unit, t } => (unit, t, false),
                VarKind::StartStop { unit, t } => (unit, t, true),
                other => unreachable!("first-stage variable {other:?}"),
            };
            let id = net.units[unit].id.as_str();
            let trace = traces
                .get(id)
                .ok_or_else(|| CliError::Validation(format!("schedule lacks conversion unit {id}")))?;
            let bit = if start_stop { trace.start_stop[t] } else { trace.on[t] };
            x.push(f64::from(u8::from(bit)));
        }
        self.staged.check_first_stage(&x)?;
        Ok(x)
    }
}

fn row_label(kind: RowKind, net: &EnergyNetwork) -> String {
    let u = |k: usize| net.units[k].id.as_str();
    let (name, subject, t) = match kind {
        RowKind::MassBalance { unit, t } => ("mass balance", u(unit), t),
        RowKind::LevelLower { unit, t } => ("level lower limit", u(unit), t),
        RowKind::LevelUpper { unit, t } => ("level upper limit", u(unit), t),
        RowKind::RampUp { unit, t } => ("ramp-up limit", u(unit), t),
        RowKind::RampDown { unit, t } => ("ramp-down limit", u(unit), t),
        RowKind::DeviationAbove { unit, t } => ("deviation above mid", u(unit), t),
        RowKind::DeviationBelow { unit, t } => ("deviation below mid", u(unit), t),
        RowKind::ConversionBalance { unit, t } => ("conversion balance", u(unit), t),
        RowKind::FlowMin { arc, t } => ("minimum flow", net.arcs[arc].id.as_str(), t),
        RowKind::FlowMax { arc, t } => ("maximum flow", net.arcs[arc].id.as_str(), t),
        RowKind::InputCalorific { unit, t } => ("input calorific floor", u(unit), t),
        RowKind::MinOutput { unit, t } => ("minimum output", u(unit), t),
        RowKind::ForcedOff { unit, t } => ("forced off", u(unit), t),
        RowKind::StartUp { unit, t } => ("start-up link", u(unit), t),
        RowKind::ShutDown { unit, t } => ("shut-down link", u(unit), t),
        RowKind::Demand { unit, t } => ("demand", u(unit), t),
    };
    format!("{name} of {subject} in period {}", t + 1)
}

const DIAGNOSTIC_ROWS: usize = 20;

/// Minimizes total constraint violation over the LP relaxation and lists
/// the rows that still need it.
pub fn infeasibility_diagnostic(problem: &MilpProblem, map: &VariableMap, net: &EnergyNetwork) -> String {
    let base = &problem.base;
    let (n, m) = (base.n_vars, base.n_constraints());
    let mut lp = LpProblem::new(n + 2 * m);
    lp.objective = (0..n + 2 * m).map(|j| if j < n { 0.0 } else { 1.0 }).collect();
    lp.bounds[..n].copy_from_slice(&base.bounds);
    for (i, row) in base.constraints.iter().enumerate() {
        let mut coeffs = vec![0.0; n + 2 * m];
        coeffs[..n].copy_from_slice(&row.coeffs);
        coeffs[n + 2 * i] = 1.0;
        coeffs[n + 2 * i + 1] = -1.0;
        lp.add_constraint(coeffs, row.relation, row.rhs);
    }
    let out = match solve_lp(&lp, 1e-9) {
        Ok(out) if out.status == LpStatus::Optimal => out,
        Ok(out) => return format!("diagnostic LP ended {:?}", out.status),
        Err(e) => return format!("diagnostic LP failed: {e}"),
    };
    let mut violated: Vec<(f64, usize)> = (0..m)
        .map(|i| (out.primal[n + 2 * i] + out.primal[n + 2 * i + 1], i))
        .filter(|(v, _)| *v > 1e-7)
        .collect();
    if violated.is_empty() {
        return "the continuous relaxation is feasible; no on/off pattern satisfies the start-stop, \
                minimum-output and calorific rows together"
            .into();
    }
    violated.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut text = String::from("constraints that cannot be met together (shortfall):\n");
    for &(v, i) in violated.iter().take(DIAGNOSTIC_ROWS) {
        let rel = match base.constraints[i].relation {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        };
        text.push_str(&format!("  {} [{rel}] short by {v:.6}\n", row_label(map.rows[i], net)));
    }
    if violated.len() > DIAGNOSTIC_ROWS {
        text.push_str(&format!("  ... and {} more\n", violated.len() - DIAGNOSTIC_ROWS));
    }
    text
}
