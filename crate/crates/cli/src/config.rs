//! Run configuration: one JSON document shared by every subcommand.

use std::path::{Path, PathBuf};

use gasflow_core::forecast::GbdtParams;
use gasflow_core::tsro::{CcgOptions, WorstCaseMethod, DEFAULT_CCG_ITERATIONS, DEFAULT_CCG_TOL};
use gasflow_core::uncertainty::Budgets;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    /// Bundled plant used when `paths.network` is absent.
    #[serde(default)]
    pub instance: Instance,
    /// Generated history used when `paths.history` is absent.
    #[serde(default)]
    pub history: HistoryConfig,
    /// Fixed relative deviation around the nominal supply. When set, the
    /// uncertainty set is built from it instead of a forecast.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<f64>,
    #[serde(default)]
    pub forecaster: ForecasterConfig,
    #[serde(default = "default_budgets")]
    pub budgets: Budgets,
    #[serde(default)]
    pub ccg: CcgConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub costs: CostOverrides,
    #[serde(default)]
    pub seed: u64,
}

fn default_budgets() -> Budgets {
    Budgets::Uniform(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Plant case JSON (network plus horizon).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
    /// Supply history CSV: `timestamp,arc,value`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<PathBuf>,
    /// Precomputed intervals CSV: `arc,period,lower,median,upper`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<PathBuf>,
    /// Uncertainty set JSON written by `optimize`; used by `evaluate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty_set: Option<PathBuf>,
    /// Schedule JSON written by `optimize`; used by `evaluate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("gasflow-out")
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            network: None,
            history: None,
            intervals: None,
            uncertainty_set: None,
            schedule: None,
            output_dir: default_output_dir(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Instance {
    #[default]
    Synthetic,
    Toy {
        #[serde(default = "default_toy_periods")]
        periods: usize,
    },
}

fn default_toy_periods() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistoryConfig {
    /// Observations per arc for the bundled synthetic generator.
    pub length: usize,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self { length: 2500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    pub lags: usize,
    /// Must equal the plant horizon when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub alpha: f64,
    pub trees: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    /// Leading share of each series used for training; the rest is scored.
    pub train_fraction: f64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        let p = GbdtParams::default();
        Self {
            lags: 20,
            horizon: None,
            alpha: 0.1,
            trees: p.n_trees,
            depth: p.max_depth,
            learning_rate: p.learning_rate,
            min_leaf: p.min_leaf,
            train_fraction: 0.8,
        }
    }
}

impl ForecasterConfig {
    pub fn params(&self) -> GbdtParams {
        GbdtParams {
            n_trees: self.trees,
            max_depth: self.depth,
            learning_rate: self.learning_rate,
            min_leaf: self.min_leaf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcgConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub method: WorstCaseMethod,
}

impl Default for CcgConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_CCG_TOL,
            max_iterations: DEFAULT_CCG_ITERATIONS,
            method: WorstCaseMethod::Auto,
        }
    }
}

impl From<CcgConfig> for CcgOptions {
    fn from(c: CcgConfig) -> Self {
        CcgOptions {
            tolerance: c.tolerance,
            max_iterations: c.max_iterations,
            method: c.method,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntRange {
    pub from: usize,
    pub to: usize,
}

impl IntRange {
    pub fn values(&self) -> Vec<usize> {
        (self.from..=self.to).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloatRange {
    pub from: f64,
    pub to: f64,
    pub step: f64,
}

impl FloatRange {
    /// Grid points from `from` to `to` inclusive, snapped to 1e-9 so that
    /// `0.1 * 3` prints as `0.3`.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.to - self.from) / self.step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| ((self.from + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect()
    }

    fn check(&self, name: &str) -> Result<(), CliError> {
        let finite = self.from.is_finite() && self.to.is_finite() && self.step.is_finite();
        if !finite || self.step <= 0.0 || self.from > self.to {
            return Err(CliError::Validation(format!(
                "sweep.{name}: need finite from <= to and step > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub gamma: IntRange,
    /// Interval levels for the budget sweep; each gets its own forecast.
    pub alphas: Vec<f64>,
    /// Multiplier on every gasholder's ramp limit.
    pub delta_scale: FloatRange,
    /// Minimum output ratio applied to every conversion unit.
    pub eta_min: FloatRange,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gamma: IntRange { from: 0, to: 8 },
            alphas: vec![0.01, 0.05, 0.1],
            delta_scale: FloatRange {
                from: 0.5,
                to: 2.0,
                step: 0.1,
            },
            eta_min: FloatRange {
                from: 0.0,
                to: 0.3,
                step: 0.05,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub samples: usize,
    /// Prepend the nominal trajectory to the samples.
    pub include_nominal: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            include_nominal: true,
        }
    }
}

/// Cost weights. Absent fields keep the plant case's values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_stop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<f64>,
    /// Shortage penalty for every produced-energy demand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_penalty: Option<f64>,
    /// Surplus penalty for every emitted-gas demand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emission_penalty: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            CliError::Validation(format!(
                "config schema error at {}: {}",
                gasflow_core::network::json_pointer(e.path()),
                e.inner()
            ))
        })
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [
            &mut p.network,
            &mut p.history,
            &mut p.intervals,
            &mut p.uncertainty_set,
            &mut p.schedule,
        ]
        .into_iter()
        .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if p.output_dir.is_relative() {
            p.output_dir = base.join(&p.output_dir);
        }
    }

    /// Checks ranges and that every referenced input file exists.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        let f = &self.forecaster;
        if !(f.alpha > 0.0 && f.alpha <= 0.5) {
            return bad(format!("forecaster.alpha {} outside (0, 0.5]", f.alpha));
        }
        if f.lags == 0 {
            return bad("forecaster.lags must be positive".into());
        }
        if !(f.train_fraction > 0.0 && f.train_fraction < 1.0) {
            return bad(format!("forecaster.train_fraction {} outside (0, 1)", f.train_fraction));
        }
        if let Err(e) = f.params().validate() {
            return bad(format!("forecaster: {e}"));
        }
        if let Some(d) = self.deviation {
            if !(d.is_finite() && d >= 0.0) {
                return bad(format!("deviation {d} must be a nonnegative number"));
            }
        }
        if let Instance::Toy { periods: 0 } = self.instance {
            return bad("instance.periods must be positive".into());
        }
        if !(self.ccg.tolerance >= 0.0) || self.ccg.max_iterations == 0 {
            return bad("ccg: need tolerance >= 0 and max_iterations >= 1".into());
        }
        let s = &self.sweep;
        if s.gamma.from > s.gamma.to {
            return bad(format!("sweep.gamma: from {} exceeds to {}", s.gamma.from, s.gamma.to));
        }
        if s.alphas.is_empty() {
            return bad("sweep.alphas is empty".into());
        }
        if let Some(a) = s.alphas.iter().find(|a| !(**a > 0.0 && **a <= 0.5)) {
            return bad(format!("sweep.alphas: {a} outside (0, 0.5]"));
        }
        s.delta_scale.check("delta_scale")?;
        s.eta_min.check("eta_min")?;
        if s.delta_scale.from <= 0.0 {
            return bad("sweep.delta_scale must stay positive".into());
        }
        if s.eta_min.from < 0.0 || s.eta_min.to >= 1.0 {
            return bad("sweep.eta_min must lie in [0, 1)".into());
        }
        for (name, w) in [
            ("start_stop", self.costs.start_stop),
            ("deviation", self.costs.deviation),
            ("energy_penalty", self.costs.energy_penalty),
            ("emission_penalty", self.costs.emission_penalty),
        ] {
            if let Some(v) = w {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("costs.{name} must be a nonnegative number, got {v}"));
                }
            }
        }
        let p = &self.paths;
        for (name, path) in [
            ("network", &p.network),
            ("history", &p.history),
            ("intervals", &p.intervals),
            ("uncertainty_set", &p.uncertainty_set),
            ("schedule", &p.schedule),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(CliError::Io {
                        path: path.clone(),
                        message: format!("paths.{name} does not exist"),
                    });
                }
            }
        }
        Ok(())
    }
}
