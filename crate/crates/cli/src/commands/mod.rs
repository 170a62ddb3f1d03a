use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_OK};
use crate::output::{sha256_hex, RunLog};
use crate::pipeline::{base_set, load_case_history, set_source, ForecastRun, SetSource};
use crate::report::{ForecastMetricsRow, Hashes, ReportBody, RunReport};

mod evaluate;
mod forecast;
mod optimize;
mod sweep;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Forecast,
    Optimize,
    Sweep,
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Forecast => "forecast",
            Command::Optimize => "optimize",
            Command::Sweep => "sweep",
            Command::Evaluate => "evaluate",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Overrides the config seed.
    pub seed: Option<u64>,
    /// Worker threads for sweep cells; defaults to the available cores.
    pub jobs: Option<usize>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Loads and validates the config, runs `command` and writes `report.json`.
/// Errors before the output directory is known are returned directly; later
/// failures are recorded in the report's exit code.
pub fn execute(command: Command, config_path: &Path, opts: &RunOptions) -> Result<RunReport, CliError> {
    let started = unix_now();
    let text = std::fs::read_to_string(config_path).map_err(|e| CliError::io(config_path, e))?;
    let mut cfg = RunConfig::from_json(&text)?;
    cfg.resolve_paths(config_path.parent().unwrap_or(Path::new(".")));
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out_dir = cfg.paths.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;

    let mut log = RunLog::new(&out_dir);
    let mut body = ReportBody::default();
    let result = match command {
        Command::Forecast => forecast::run(&cfg, &mut log, &mut body),
        Command::Optimize => optimize::run(&cfg, &mut log, &mut body),
        Command::Sweep => sweep::run(&cfg, opts, &mut log, &mut body),
        Command::Evaluate => evaluate::run(&cfg, &mut log, &mut body),
    };
    let (exit_code, error) = match result {
        Ok(()) => match body.partial_failure.take() {
            Some((code, message)) => (code, Some(message)),
            None => (EXIT_OK, None),
        },
        Err(e) => {
            log::error!("{e}");
            (e.exit_code(), Some(e.to_string()))
        }
    };
    let mut report = RunReport {
        command: command.name().to_string(),
        started_at_unix: started,
        finished_at_unix: 0.0,
        exit_code,
        error,
        seed: cfg.seed,
        config: cfg,
        hashes: Hashes {
            config: sha256_hex(text.as_bytes()),
            inputs: std::mem::take(&mut log.inputs),
            outputs: std::mem::take(&mut log.outputs),
        },
        phases: std::mem::take(&mut log.phases),
        warnings: std::mem::take(&mut log.warnings),
        forecast: body.forecast,
        robust: body.robust,
        sweep: body.sweep,
        evaluation: body.evaluation,
    };
    report.finished_at_unix = unix_now();
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    log.write("report.json", json.as_bytes())?;
    Ok(report)
}

fn metrics_rows(run: &ForecastRun) -> Vec<ForecastMetricsRow> {
    run.metrics
        .iter()
        .map(|m| ForecastMetricsRow {
            alpha: run.alpha,
            arc: m.arc.clone(),
            mape: m.mape,
            picp: m.picp,
            test_points: m.test_points,
            rearranged: m.rearranged,
        })
        .collect()
}

/// Intervals CSV, metrics CSV and model JSON for one forecast run.
fn write_forecast(run: &ForecastRun, log: &mut RunLog, body: &mut ReportBody) -> Result<(), CliError> {
    log.write_with("intervals.csv", |buf| run.intervals.write_csv(buf))?;
    log.write_with("metrics.csv", |buf| {
        gasflow_core::forecast::write_metrics_csv(&run.metrics, run.alpha, buf)
    })?;
    log.write("model.json", run.bank.to_json().as_bytes())?;
    body.forecast.extend(metrics_rows(run));
    Ok(())
}

/// The set an optimize or evaluate run works with. A set file keeps its
/// budgets; other sources take `budgets` from the config.
fn configured_set(
    cfg: &RunConfig,
    case: &gasflow_core::network::PlantCase,
    log: &mut RunLog,
    body: &mut ReportBody,
) -> Result<gasflow_core::uncertainty::UncertaintySet, CliError> {
    let source = set_source(cfg);
    let history = load_case_history(cfg, &source, log)?;
    let (base, forecast) = log.phase("uncertainty", |log| {
        base_set(cfg, case, history.as_ref(), cfg.forecaster.alpha, log)
    })?;
    if let Some(run) = &forecast {
        write_forecast(run, log, body)?;
    }
    match source {
        SetSource::File => Ok(base),
        _ => Ok(base.with_budgets(&cfg.budgets)?),
    }
}
