use gasflow_core::forecast::write_history_csv;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::RunLog;
use crate::pipeline::{load_case, load_history, run_forecast};
use crate::report::ReportBody;

pub(super) fn run(cfg: &RunConfig, log: &mut RunLog, body: &mut ReportBody) -> Result<(), CliError> {
    let case = load_case(cfg, log)?;
    let history = load_history(cfg, log)?;
    if cfg.paths.history.is_none() {
        log.write_with("history.csv", |buf| write_history_csv(&history, buf))?;
    }
    let run = log.phase("forecast", |_| run_forecast(cfg, &case, &history, cfg.forecaster.alpha))?;
    for m in &run.metrics {
        log::info!(
            "{}: MAPE {:.4}, PICP {:.4} over {} points",
            m.arc,
            m.mape,
            m.picp,
            m.test_points
        );
    }
    super::write_forecast(&run, log, body)
}
