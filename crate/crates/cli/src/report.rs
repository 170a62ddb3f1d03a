use std::collections::BTreeMap;

use gasflow_core::network::{ConversionTrace, ObjectiveBreakdown};
use gasflow_core::tsro::WorstCaseMethod;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::PhaseTiming;

/// Everything a run produced, written to `report.json`. Timestamps appear
/// only here; every other output is a pure function of config, seed and inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub started_at_unix: f64,
    pub finished_at_unix: f64,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub hashes: Hashes,
    pub phases: Vec<PhaseTiming>,
    pub warnings: Vec<String>,
    pub forecast: Vec<ForecastMetricsRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust: Option<RobustSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTables>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvaluationSummary>,
}

/// SHA-256 of the config file, every input read and every output written.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hashes {
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetricsRow {
    pub alpha: f64,
    pub arc: String,
    pub mape: f64,
    pub picp: f64,
    pub test_points: usize,
    pub rearranged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustSummary {
    /// Best worst-case total cost found (C&CG upper bound).
    pub objective: f64,
    pub lower_bound: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: WorstCaseMethod,
    pub deterministic_objective: f64,
    pub first_stage_cost: f64,
    /// Cost terms with the robust first stage at nominal supply.
    pub nominal: ObjectiveBreakdown,
    /// Cost terms with the robust first stage at its worst-case supply.
    pub worst_case: ObjectiveBreakdown,
    pub first_stage: Vec<ConversionTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Sweep coordinate: Γ, Δ scale or η⁻.
    pub value: f64,
    /// Interval level of the forecast behind the set, when one was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<f64>,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<WorstCaseMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Exit code the failure maps to.
    #[serde(skip)]
    pub exit_code: Option<i32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Unconverged,
    Failed,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Unconverged => "unconverged",
            CellStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTables {
    pub gamma: Vec<SweepRow>,
    pub delta_scale: Vec<SweepRow>,
    pub eta_min: Vec<SweepRow>,
    pub failed_cells: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub trajectories: usize,
    pub include_nominal: bool,
    pub first_stage_cost: f64,
    pub mean_total: f64,
    pub min_total: f64,
    pub max_total: f64,
    pub p95_total: f64,
    pub slack_violations: usize,
    /// Worst case over the whole set at this first stage.
    pub worst_case_total: f64,
    pub worst_case_method: WorstCaseMethod,
    pub max_within_worst_case: bool,
}

/// Sections filled in by a command.
#[derive(Debug, Default)]
pub struct ReportBody {
    pub forecast: Vec<ForecastMetricsRow>,
    pub robust: Option<RobustSummary>,
    pub sweep: Option<SweepTables>,
    pub evaluation: Option<EvaluationSummary>,
    /// Set when the command finished but some part failed (sweep cells).
    pub partial_failure: Option<(i32, String)>,
}
