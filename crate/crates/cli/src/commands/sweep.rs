//! Budget and flexibility sweeps. Each cell is an independent sequential
//! pipeline; cells run on a bounded worker pool and write their own table
//! file atomically. Failed cells are recorded and the sweep continues.

use gasflow_core::network::{format_value, PlantCase, UnitRole};
use gasflow_core::tsro::{CcgState, WorstCaseMethod};
use gasflow_core::uncertainty::{Budgets, ScenarioIndicators, UncertaintySet};
use rayon::prelude::*;

use super::RunOptions;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{write_atomic, RunLog};
use crate::pipeline::{base_set, load_case, load_history, set_source, stage_model, ForecastRun, SetSource};
use crate::report::{CellStatus, ReportBody, SweepRow, SweepTables};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Gamma,
    DeltaScale,
    EtaMin,
}

impl Axis {
    fn column(self) -> &'static str {
        match self {
            Axis::Gamma => "gamma",
            Axis::DeltaScale => "delta_scale",
            Axis::EtaMin => "eta_min",
        }
    }

    fn render(self, v: f64) -> String {
        match self {
            Axis::Gamma => format!("{}", v as usize),
            _ => format_value(v),
        }
    }
}

enum Cell {
    /// Γ chain over one set, solved in increasing Γ with scenario seeding.
    GammaChain {
        alpha: Option<f64>,
        set: usize,
    },
    DeltaScale(f64),
    EtaMin(f64),
}

struct CellOutput {
    axis: Axis,
    name: String,
    rows: Vec<SweepRow>,
    file: Result<(String, String), CliError>,
    failures: Vec<(i32, String)>,
}

type BuiltSet = (
    Option<f64>,
    Result<(UncertaintySet, Option<ForecastRun>), CliError>,
    RunLog,
);

fn method_name(m: WorstCaseMethod) -> &'static str {
    match m {
        WorstCaseMethod::Exact => "exact",
        WorstCaseMethod::Search => "search",
        WorstCaseMethod::Auto => "auto",
    }
}

fn ok_row(value: f64, alpha: Option<f64>, state: &CcgState) -> SweepRow {
    SweepRow {
        value,
        alpha,
        status: if state.converged {
            CellStatus::Ok
        } else {
            CellStatus::Unconverged
        },
        objective: Some(state.upper_bound),
        lower_bound: Some(state.lower_bound),
        iterations: state.iteration,
        method: Some(state.method),
        error: None,
        exit_code: None,
    }
}

fn failed_row(value: f64, alpha: Option<f64>, e: &CliError) -> SweepRow {
    SweepRow {
        value,
        alpha,
        status: CellStatus::Failed,
        objective: None,
        lower_bound: None,
        iterations: 0,
        method: None,
        error: Some(e.to_string()),
        exit_code: Some(e.exit_code()),
    }
}

fn header(axis: Axis) -> Vec<&'static str> {
    let mut h = Vec::new();
    if axis == Axis::Gamma {
        h.push("alpha");
    }
    h.extend([
        axis.column(),
        "status",
        "objective",
        "lower_bound",
        "iterations",
        "method",
        "error",
    ]);
    h
}

/// Table CSV for one axis. Columns: `[alpha,]<axis>,status,objective,lower_bound,iterations,method,error`.
fn render_table(axis: Axis, rows: &[SweepRow]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(axis))?;
    for r in rows {
        let mut rec = Vec::new();
        if axis == Axis::Gamma {
            rec.push(r.alpha.map(format_value).unwrap_or_default());
        }
        rec.push(axis.render(r.value));
        rec.push(r.status.as_str().to_string());
        rec.push(r.objective.map(format_value).unwrap_or_default());
        rec.push(r.lower_bound.map(format_value).unwrap_or_default());
        rec.push(r.iterations.to_string());
        rec.push(r.method.map(method_name).unwrap_or_default().to_string());
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

fn scale_ramps(case: &PlantCase, scale: f64) -> PlantCase {
    let mut case = case.clone();
    for u in &mut case.network.units {
        if let UnitRole::Storage(s) = &mut u.role {
            s.max_change *= scale;
        }
    }
    case
}

fn set_min_output(case: &PlantCase, eta: f64) -> PlantCase {
    let mut case = case.clone();
    for u in &mut case.network.units {
        if let UnitRole::Conversion(c) = &mut u.role {
            c.min_output_ratio = eta;
        }
    }
    case
}

struct Context<'a> {
    cfg: &'a RunConfig,
    case: &'a PlantCase,
    sets: &'a [(Option<f64>, Result<UncertaintySet, String>)],
    /// Index into `sets` of the set used by the flexibility sweeps.
    base: usize,
}

impl Context<'_> {
    fn set(&self, i: usize) -> Result<&UncertaintySet, CliError> {
        self.sets[i]
            .1
            .as_ref()
            .map_err(|e| CliError::Validation(format!("uncertainty set unavailable: {e}")))
    }

    fn gamma_chain(&self, alpha: Option<f64>, set: usize) -> Vec<SweepRow> {
        let gammas = self.cfg.sweep.gamma.values();
        let base = match self.set(set) {
            Ok(s) => s,
            Err(e) => return gammas.iter().map(|&g| failed_row(g as f64, alpha, &e)).collect(),
        };
        let model = match base
            .with_budgets(&Budgets::Uniform(gammas[0]))
            .map_err(CliError::from)
            .and_then(|s| stage_model(self.case, &s))
        {
            Ok(m) => m,
            Err(e) => return gammas.iter().map(|&g| failed_row(g as f64, alpha, &e)).collect(),
        };
        let mut seeds: Vec<ScenarioIndicators> = Vec::new();
        let mut rows = Vec::new();
        for &g in &gammas {
            let solved = base
                .with_budgets(&Budgets::Uniform(g))
                .map_err(CliError::from)
                .and_then(|set| model.solve(&set, self.cfg, &seeds));
            match solved {
                Ok(state) => {
                    log::info!("gamma {g} (alpha {alpha:?}): objective {:.6}", state.upper_bound);
                    for w in &state.worst {
                        if !seeds.contains(&w.indicators) {
                            seeds.push(w.indicators.clone());
                        }
                    }
                    rows.push(ok_row(g as f64, alpha, &state));
                }
                Err(e) => {
                    log::warn!("gamma {g} (alpha {alpha:?}) failed: {e}");
                    rows.push(failed_row(g as f64, alpha, &e));
                }
            }
        }
        rows
    }

    fn flexibility(&self, value: f64, case: PlantCase) -> SweepRow {
        let solved = self
            .set(self.base)
            .and_then(|base| Ok(base.with_budgets(&self.cfg.budgets)?))
            .and_then(|set| {
                let model = stage_model(&case, &set)?;
                model.solve(&set, self.cfg, &[])
            });
        match solved {
            Ok(state) => ok_row(value, None, &state),
            Err(e) => failed_row(value, None, &e),
        }
    }

    fn run(&self, cell: &Cell) -> (Axis, String, Vec<SweepRow>) {
        match *cell {
            Cell::GammaChain { alpha, set } => {
                let name = match alpha {
                    Some(a) => format!("gamma_alpha_{}", format_value(a)),
                    None => "gamma".to_string(),
                };
                (Axis::Gamma, name, self.gamma_chain(alpha, set))
            }
            Cell::DeltaScale(s) => {
                let row = self.flexibility(s, scale_ramps(self.case, s));
                (Axis::DeltaScale, format!("delta_scale_{}", format_value(s)), vec![row])
            }
            Cell::EtaMin(eta) => {
                let row = self.flexibility(eta, set_min_output(self.case, eta));
                (Axis::EtaMin, format!("eta_min_{}", format_value(eta)), vec![row])
            }
        }
    }
}

fn failures_of(axis: Axis, name: &str, rows: &[SweepRow]) -> Vec<(i32, String)> {
    rows.iter()
        .filter(|r| r.status == CellStatus::Failed)
        .map(|r| {
            (
                r.exit_code.unwrap_or(crate::error::EXIT_VALIDATION),
                format!(
                    "{name} {}={}: {}",
                    axis.column(),
                    axis.render(r.value),
                    r.error.as_deref().unwrap_or("")
                ),
            )
        })
        .collect()
}

pub(super) fn run(cfg: &RunConfig, opts: &RunOptions, log: &mut RunLog, body: &mut ReportBody) -> Result<(), CliError> {
    let case = load_case(cfg, log)?;
    let periods = case.horizon.periods;
    if cfg.sweep.gamma.to > periods {
        return Err(CliError::Validation(format!(
            "sweep.gamma.to {} exceeds the horizon of {periods} periods",
            cfg.sweep.gamma.to
        )));
    }
    let forecasting = matches!(set_source(cfg), SetSource::Forecast);
    let history = if forecasting {
        Some(load_history(cfg, log)?)
    } else {
        None
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start {} workers: {e}", opts.jobs.unwrap_or(0))))?;

    // one set per interval level; without a forecast the level is moot
    let mut alphas: Vec<Option<f64>> = if forecasting {
        cfg.sweep.alphas.iter().map(|&a| Some(a)).collect()
    } else {
        vec![None]
    };
    let base_alpha = if forecasting { Some(cfg.forecaster.alpha) } else { None };
    if !alphas.contains(&base_alpha) {
        alphas.push(base_alpha);
    }
    let built: Vec<BuiltSet> = log.phase("uncertainty", |_| {
        pool.install(|| {
            alphas
                .par_iter()
                .map(|&a| {
                    let mut cell_log = RunLog::new(&cfg.paths.output_dir);
                    let r = base_set(
                        cfg,
                        &case,
                        history.as_ref(),
                        a.unwrap_or(cfg.forecaster.alpha),
                        &mut cell_log,
                    );
                    (a, r, cell_log)
                })
                .collect()
        })
    });
    let mut sets = Vec::new();
    for (alpha, result, cell_log) in built {
        log.inputs.extend(cell_log.inputs);
        for w in cell_log.warnings {
            log.warnings.push(w);
        }
        match result {
            Ok((set, run)) => {
                if let Some(run) = run {
                    let tag = format_value(run.alpha);
                    log.write_with(&format!("forecast/intervals_alpha_{tag}.csv"), |buf| {
                        run.intervals.write_csv(buf)
                    })?;
                    log.write_with(&format!("forecast/metrics_alpha_{tag}.csv"), |buf| {
                        gasflow_core::forecast::write_metrics_csv(&run.metrics, run.alpha, buf)
                    })?;
                    body.forecast.extend(super::metrics_rows(&run));
                }
                sets.push((alpha, Ok(set)));
            }
            Err(e) => {
                log.warn(format!("uncertainty set for alpha {alpha:?} failed: {e}"));
                sets.push((alpha, Err(e.to_string())));
            }
        }
    }
    let base = sets
        .iter()
        .position(|(a, _)| *a == base_alpha)
        .expect("base level present");

    let mut cells: Vec<Cell> = Vec::new();
    for (i, (alpha, _)) in sets.iter().enumerate() {
        if !forecasting || cfg.sweep.alphas.iter().any(|&a| Some(a) == *alpha) {
            cells.push(Cell::GammaChain { alpha: *alpha, set: i });
        }
    }
    cells.extend(cfg.sweep.delta_scale.values().into_iter().map(Cell::DeltaScale));
    cells.extend(cfg.sweep.eta_min.values().into_iter().map(Cell::EtaMin));

    let ctx = Context {
        cfg,
        case: &case,
        sets: &sets,
        base,
    };
    let out_dir = cfg.paths.output_dir.clone();
    let outputs: Vec<CellOutput> = log.phase("cells", |_| {
        pool.install(|| {
            cells
                .par_iter()
                .map(|cell| {
                    let (axis, name, rows) = ctx.run(cell);
                    let rel = format!("cells/{name}.csv");
                    let file = render_table(axis, &rows)
                        .map_err(|e| CliError::io(&out_dir.join(&rel), e))
                        .and_then(|bytes| write_atomic(&out_dir.join(&rel), &bytes))
                        .map(|hash| (rel, hash));
                    let failures = failures_of(axis, &name, &rows);
                    CellOutput {
                        axis,
                        name,
                        rows,
                        file,
                        failures,
                    }
                })
                .collect()
        })
    });

    let mut tables = SweepTables::default();
    let mut first_failure: Option<i32> = None;
    for out in outputs {
        let (rel, hash) = out.file?;
        log.outputs.insert(rel, hash);
        for (code, message) in out.failures {
            first_failure.get_or_insert(code);
            tables.failed_cells.push(message);
        }
        log::debug!("cell {} finished with {} rows", out.name, out.rows.len());
        match out.axis {
            Axis::Gamma => tables.gamma.extend(out.rows),
            Axis::DeltaScale => tables.delta_scale.extend(out.rows),
            Axis::EtaMin => tables.eta_min.extend(out.rows),
        }
    }
    for (axis, rows) in [
        (Axis::Gamma, &tables.gamma),
        (Axis::DeltaScale, &tables.delta_scale),
        (Axis::EtaMin, &tables.eta_min),
    ] {
        let rel = format!("sweep_{}.csv", axis.column());
        let bytes = render_table(axis, rows).map_err(|e| CliError::io(&log.out_dir().join(&rel), e))?;
        log.write(&rel, &bytes)?;
    }
    if let Some(code) = first_failure {
        body.partial_failure = Some((code, format!("{} sweep cells failed", tables.failed_cells.len())));
    }
    body.sweep = Some(tables);
    Ok(())
}
