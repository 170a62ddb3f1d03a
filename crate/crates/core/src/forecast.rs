//! Multi-step quantile forecasting of gas supply with gradient-boosted
//! regression trees under pinball loss.
//!
//! Forecasting is direct: one model per (arc, step, quantile level), each fed
//! the `p` most recent observations `[z_{τ-1}, ..., z_{τ-p}]` and predicting
//! `z_{τ+t-1}` for step `t`. Intervals use levels `α/2`, `0.5` and `1 - α/2`,
//! so the band targets coverage `1 - α`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::format_value;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("history of length {len} too short: need more than p + T = {required}")]
    InsufficientHistory { len: usize, required: usize },
    #[error("quantile level {0} outside (0, 1)")]
    InvalidLevel(f64),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("expected {expected} lag values, got {got}")]
    LagLength { expected: usize, got: usize },
    #[error("no model for arc {arc}, step {step}, level {level}")]
    MissingModel { arc: String, step: usize, level: f64 },
    #[error("length mismatch: {0} predictions vs {1} actuals")]
    LengthMismatch(usize, usize),
    #[error("actual value at index {0} is zero; percentage error undefined")]
    ZeroActual(usize),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Supervised pairs for one horizon step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepData {
    /// 1-based horizon step.
    pub step: usize,
    /// Lag vectors, most recent first.
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    /// Index in the series of each target.
    pub target_index: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub lags: usize,
    pub horizon: usize,
    pub steps: Vec<StepData>,
}

/// Builds direct multi-step supervised pairs in chronological order.
///
/// For step `t` and origin `τ` (`p <= τ <= len - t`), the features are
/// `[z[τ-1], ..., z[τ-p]]` and the target is `z[τ+t-1]`, giving
/// `len - p - t + 1` pairs.
pub fn make_supervised(history: &[f64], p: usize, horizon: usize) -> Result<SeriesDataset, ForecastError> {
    if p == 0 || horizon == 0 {
        return Err(ForecastError::InvalidParams(
            "lag order and horizon must be positive".into(),
        ));
    }
    if history.len() <= p + horizon {
        return Err(ForecastError::InsufficientHistory {
            len: history.len(),
            required: p + horizon,
        });
    }
    let steps = (1..=horizon)
        .map(|t| {
            let origins = p..=history.len() - t;
            StepData {
                step: t,
                features: origins.clone().map(|tau| lag_vector(history, tau, p)).collect(),
                targets: origins.clone().map(|tau| history[tau + t - 1]).collect(),
                target_index: origins.map(|tau| tau + t - 1).collect(),
            }
        })
        .collect();
    Ok(SeriesDataset {
        lags: p,
        horizon,
        steps,
    })
}

/// `[z[τ-1], ..., z[τ-p]]`.
pub fn lag_vector(series: &[f64], tau: usize, p: usize) -> Vec<f64> {
    (1..=p).map(|i| series[tau - i]).collect()
}

/// Pinball loss of a single residual `y - pred` at level `q`.
pub fn pinball(q: f64, y: f64, pred: f64) -> f64 {
    let r = y - pred;
    if r >= 0.0 {
        q * r
    } else {
        (q - 1.0) * r
    }
}

pub fn mean_pinball(q: f64, ys: &[f64], preds: &[f64]) -> f64 {
    ys.iter().zip(preds).map(|(&y, &f)| pinball(q, y, f)).sum::<f64>() / ys.len() as f64
}

/// Lower empirical quantile: the `ceil(q n)`-th smallest value, a minimizer
/// of the empirical pinball loss.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Binary regression tree; inputs with `x[feature] <= threshold` go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl RegressionTree {
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
                TreeNode::Leaf { .. } => return i,
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_of(x)] {
            TreeNode::Leaf { value } => value,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 3,
            learning_rate: 0.05,
            min_leaf: 10,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.n_trees == 0 {
            return Err(ForecastError::InvalidParams("need at least one tree".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(ForecastError::InvalidParams("learning rate must lie in (0, 1]".into()));
        }
        if self.min_leaf == 0 {
            return Err(ForecastError::InvalidParams("min_leaf must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileGbdtModel {
    pub level: f64,
    pub lags: usize,
    pub initial: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
    /// Mean training pinball loss after initialization and after each round.
    pub training_loss: Vec<f64>,
}

impl QuantileGbdtModel {
    pub fn predict(&self, lags: &[f64]) -> Result<f64, ForecastError> {
        if lags.len() != self.lags {
            return Err(ForecastError::LagLength {
                expected: self.lags,
                got: lags.len(),
            });
        }
        Ok(self.predict_unchecked(lags))
    }

    fn predict_unchecked(&self, x: &[f64]) -> f64 {
        self.initial + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

pub fn predict(model: &QuantileGbdtModel, lags: &[f64]) -> Result<f64, ForecastError> {
    model.predict(lags)
}

/// Fits one step of a dataset.
pub fn fit_quantile_gbdt(
    ds: &SeriesDataset,
    step: usize,
    level: f64,
    params: &GbdtParams,
) -> Result<QuantileGbdtModel, ForecastError> {
    let data = ds
        .steps
        .iter()
        .find(|s| s.step == step)
        .ok_or_else(|| ForecastError::InvalidParams(format!("dataset has no step {step}")))?;
    fit_samples(&data.features, &data.targets, level, params)
}

/// Gradient boosting under pinball loss: least-squares trees on the negative
/// gradient, leaves refit to the level-quantile of in-leaf residuals.
pub fn fit_samples(
    features: &[Vec<f64>],
    targets: &[f64],
    level: f64,
    params: &GbdtParams,
) -> Result<QuantileGbdtModel, ForecastError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ForecastError::InvalidLevel(level));
    }
    params.validate()?;
    if targets.is_empty() || features.len() != targets.len() {
        return Err(ForecastError::EmptyDataset);
    }
    let n = targets.len();
    let p = features[0].len();
    if features.iter().any(|x| x.len() != p) {
        return Err(ForecastError::InvalidParams("ragged feature matrix".into()));
    }

    let sorted: Vec<SortedFeature> = (0..p)
        .map(|f| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| features[a][f].total_cmp(&features[b][f]).then(a.cmp(&b)));
            let values = order.iter().map(|&i| features[i][f]).collect();
            SortedFeature { order, values }
        })
        .collect();

    let initial = empirical_quantile(targets, level);
    let mut fitted = vec![initial; n];
    let mut training_loss = vec![mean_pinball(level, targets, &fitted)];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut grad = vec![0.0; n];
    for _ in 0..params.n_trees {
        for i in 0..n {
            grad[i] = if targets[i] > fitted[i] { level } else { level - 1.0 };
        }
        let (mut tree, leaf_of) = grow_tree(features, &grad, &sorted, params);
        let mut members: Vec<Vec<f64>> = vec![Vec::new(); tree.nodes.len()];
        for i in 0..n {
            members[leaf_of[i]].push(targets[i] - fitted[i]);
        }
        for (leaf, residuals) in members.iter().enumerate() {
            if !residuals.is_empty() {
                tree.nodes[leaf] = TreeNode::Leaf {
                    value: empirical_quantile(residuals, level),
                };
            }
        }
        for i in 0..n {
            if let TreeNode::Leaf { value } = tree.nodes[leaf_of[i]] {
                fitted[i] += params.learning_rate * value;
            }
        }
        training_loss.push(mean_pinball(level, targets, &fitted));
        trees.push(tree);
    }
    Ok(QuantileGbdtModel {
        level,
        lags: p,
        initial,
        learning_rate: params.learning_rate,
        trees,
        training_loss,
    })
}

struct SortedFeature {
    order: Vec<usize>,
    values: Vec<f64>,
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Level-wise least-squares CART using presorted feature orders. Returns the
/// tree (leaf values unset) and each sample's leaf node.
fn grow_tree(
    features: &[Vec<f64>],
    grad: &[f64],
    sorted: &[SortedFeature],
    params: &GbdtParams,
) -> (RegressionTree, Vec<usize>) {
    let n = grad.len();
    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    let mut node_of = vec![0usize; n];
    let mut frontier = vec![0usize];
    for _ in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        // node id -> frontier slot
        let mut slot = vec![usize::MAX; nodes.len()];
        for (s, &nd) in frontier.iter().enumerate() {
            slot[nd] = s;
        }
        let mut total = vec![(0usize, 0.0f64); frontier.len()];
        for i in 0..n {
            let s = slot[node_of[i]];
            if s != usize::MAX {
                total[s].0 += 1;
                total[s].1 += grad[i];
            }
        }
        let mut best: Vec<Option<Candidate>> = (0..frontier.len()).map(|_| None).collect();
        let mut running = vec![(0usize, 0.0f64, f64::NAN); frontier.len()];
        for (f, feat) in sorted.iter().enumerate() {
            running.iter_mut().for_each(|r| *r = (0, 0.0, f64::NAN));
            for (&i, &x) in feat.order.iter().zip(&feat.values) {
                let s = slot[node_of[i]];
                if s == usize::MAX {
                    continue;
                }
                let (cnt, sum, last) = running[s];
                let (nt, st) = total[s];
                if cnt >= params.min_leaf && nt - cnt >= params.min_leaf && x > last {
                    let right = st - sum;
                    let gain = sum * sum / cnt as f64 + right * right / (nt - cnt) as f64 - st * st / nt as f64;
                    if gain > 1e-12 && best[s].as_ref().is_none_or(|b| gain > b.gain) {
                        best[s] = Some(Candidate {
                            gain,
                            feature: f,
                            threshold: 0.5 * (last + x),
                        });
                    }
                }
                running[s] = (cnt + 1, sum + grad[i], x);
            }
        }
        let mut next = Vec::new();
        let mut children = vec![None; nodes.len()];
        for (s, &nd) in frontier.iter().enumerate() {
            if let Some(c) = best[s].take() {
                let left = nodes.len();
                nodes.push(TreeNode::Leaf { value: 0.0 });
                nodes.push(TreeNode::Leaf { value: 0.0 });
                nodes[nd] = TreeNode::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right: left + 1,
                };
                children[nd] = Some((c.feature, c.threshold, left));
                next.push(left);
                next.push(left + 1);
            }
        }
        for i in 0..n {
            if let Some((f, thr, left)) = children[node_of[i]] {
                node_of[i] = if features[i][f] <= thr { left } else { left + 1 };
            }
        }
        frontier = next;
    }
    let tree = RegressionTree {
        nodes,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
    };
    (tree, node_of)
}

/// Quantile levels `(α/2, 0.5, 1 - α/2)` for a nominal coverage of `1 - α`.
pub fn interval_levels(alpha: f64) -> [f64; 3] {
    [alpha / 2.0, 0.5, 1.0 - alpha / 2.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub arc: String,
    pub step: usize,
    pub level: f64,
    pub model: QuantileGbdtModel,
}

/// Every model needed to forecast all supply arcs over the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBank {
    pub version: u32,
    pub alpha: f64,
    pub lags: usize,
    pub horizon: usize,
    pub params: GbdtParams,
    pub models: Vec<ModelEntry>,
}

impl ModelBank {
    pub fn get(&self, arc: &str, step: usize, level: f64) -> Result<&QuantileGbdtModel, ForecastError> {
        self.models
            .iter()
            .find(|e| e.arc == arc && e.step == step && e.level == level)
            .map(|e| &e.model)
            .ok_or_else(|| ForecastError::MissingModel {
                arc: arc.to_string(),
                step,
                level,
            })
    }

    pub fn arcs(&self) -> Vec<String> {
        let mut arcs: Vec<String> = self.models.iter().map(|e| e.arc.clone()).collect();
        arcs.dedup();
        arcs
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ForecastError> {
        let bank: ModelBank = serde_json::from_str(text)?;
        if bank.version != MODEL_FORMAT_VERSION {
            return Err(ForecastError::Version(bank.version));
        }
        Ok(bank)
    }
}

/// Trains every (arc, step, level) model on the first `train_len`
/// observations of each series. Pairs whose target lies at or beyond
/// `train_len` are held out. Models train in parallel.
pub fn train_bank(
    history: &BTreeMap<String, Vec<f64>>,
    train_len: usize,
    lags: usize,
    horizon: usize,
    alpha: f64,
    params: &GbdtParams,
) -> Result<ModelBank, ForecastError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ForecastError::InvalidLevel(alpha));
    }
    let mut jobs = Vec::new();
    for (arc, series) in history {
        let train = &series[..train_len.min(series.len())];
        let ds = make_supervised(train, lags, horizon)?;
        for step in 1..=horizon {
            for level in interval_levels(alpha) {
                jobs.push((arc.clone(), step, level, ds.clone()));
            }
        }
    }
    let models = jobs
        .into_par_iter()
        .map(|(arc, step, level, ds)| {
            let model = fit_quantile_gbdt(&ds, step, level, params)?;
            Ok(ModelEntry {
                arc,
                step,
                level,
                model,
            })
        })
        .collect::<Result<Vec<_>, ForecastError>>()?;
    Ok(ModelBank {
        version: MODEL_FORMAT_VERSION,
        alpha,
        lags,
        horizon,
        params: *params,
        models,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileTriple {
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastIntervals {
    pub alpha: f64,
    pub periods: usize,
    pub arcs: BTreeMap<String, Vec<QuantileTriple>>,
}

/// Per-cell crossing events fixed by sorting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RearrangementReport {
    pub cells: Vec<(String, usize)>,
}

impl RearrangementReport {
    pub fn count(&self) -> usize {
        self.cells.len()
    }
}

fn rearrange(raw: [f64; 3]) -> ([f64; 3], bool) {
    let mut sorted = raw;
    sorted.sort_by(f64::total_cmp);
    (sorted, sorted != raw)
}

/// Forecasts the `horizon` periods that follow each arc's history.
pub fn forecast_intervals(
    bank: &ModelBank,
    history: &BTreeMap<String, Vec<f64>>,
) -> Result<(ForecastIntervals, RearrangementReport), ForecastError> {
    let mut arcs = BTreeMap::new();
    let mut report = RearrangementReport::default();
    for (arc, series) in history {
        if series.len() < bank.lags {
            return Err(ForecastError::InsufficientHistory {
                len: series.len(),
                required: bank.lags,
            });
        }
        let lags = lag_vector(series, series.len(), bank.lags);
        let mut cells = Vec::with_capacity(bank.horizon);
        for step in 1..=bank.horizon {
            let (triple, crossed) = predict_cell(bank, arc, step, &lags)?;
            if crossed {
                report.cells.push((arc.clone(), step));
            }
            cells.push(triple);
        }
        arcs.insert(arc.clone(), cells);
    }
    Ok((
        ForecastIntervals {
            alpha: bank.alpha,
            periods: bank.horizon,
            arcs,
        },
        report,
    ))
}

fn predict_cell(
    bank: &ModelBank,
    arc: &str,
    step: usize,
    lags: &[f64],
) -> Result<(QuantileTriple, bool), ForecastError> {
    let [lo, mid, hi] = interval_levels(bank.alpha);
    let raw = [
        bank.get(arc, step, lo)?.predict(lags)?,
        bank.get(arc, step, mid)?.predict(lags)?,
        bank.get(arc, step, hi)?.predict(lags)?,
    ];
    let ([lower, median, upper], crossed) = rearrange(raw);
    Ok((QuantileTriple { lower, median, upper }, crossed))
}

impl ForecastIntervals {
    /// CSV columns: `arc,period,lower,median,upper`, periods 1-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ForecastError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["arc", "period", "lower", "median", "upper"])?;
        for (arc, cells) in &self.arcs {
            for (t, c) in cells.iter().enumerate() {
                w.write_record([
                    arc.as_str(),
                    &(t + 1).to_string(),
                    &format_value(c.lower),
                    &format_value(c.median),
                    &format_value(c.upper),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, alpha: f64) -> Result<Self, ForecastError> {
        #[derive(Deserialize)]
        struct Row {
            arc: String,
            period: usize,
            lower: f64,
            median: f64,
            upper: f64,
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut arcs: BTreeMap<String, Vec<QuantileTriple>> = BTreeMap::new();
        for rec in rdr.deserialize::<Row>() {
            let row = rec.map_err(csv_parse_error)?;
            let cells = arcs.entry(row.arc.clone()).or_default();
            if row.period != cells.len() + 1 {
                return Err(ForecastError::InvalidParams(format!(
                    "arc {} periods must be listed in order starting at 1",
                    row.arc
                )));
            }
            cells.push(QuantileTriple {
                lower: row.lower,
                median: row.median,
                upper: row.upper,
            });
        }
        let periods = arcs.values().map(Vec::len).max().unwrap_or(0);
        if arcs.values().any(|c| c.len() != periods) {
            return Err(ForecastError::InvalidParams("arcs have different period counts".into()));
        }
        Ok(ForecastIntervals { alpha, periods, arcs })
    }
}

fn csv_parse_error(e: csv::Error) -> ForecastError {
    let line = e.position().map_or(0, |p| p.line());
    ForecastError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Mean absolute percentage error as a fraction, relative to the actuals.
pub fn mape(predicted: &[f64], actual: &[f64]) -> Result<f64, ForecastError> {
    if predicted.len() != actual.len() {
        return Err(ForecastError::LengthMismatch(predicted.len(), actual.len()));
    }
    if actual.is_empty() {
        return Err(ForecastError::EmptyDataset);
    }
    let mut total = 0.0;
    for (i, (&p, &a)) in predicted.iter().zip(actual).enumerate() {
        if a == 0.0 {
            return Err(ForecastError::ZeroActual(i));
        }
        total += ((p - a) / a).abs();
    }
    Ok(total / actual.len() as f64)
}

/// Fraction of actuals strictly inside `(lower, upper)`.
pub fn picp(lower: &[f64], upper: &[f64], actual: &[f64]) -> Result<f64, ForecastError> {
    if lower.len() != actual.len() || upper.len() != actual.len() {
        return Err(ForecastError::LengthMismatch(
            lower.len().min(upper.len()),
            actual.len(),
        ));
    }
    if actual.is_empty() {
        return Ok(0.0);
    }
    let inside = actual
        .iter()
        .zip(lower.iter().zip(upper))
        .filter(|(&z, (&lo, &hi))| lo < z && z < hi)
        .count();
    Ok(inside as f64 / actual.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcMetrics {
    pub arc: String,
    pub mape: f64,
    pub picp: f64,
    pub test_points: usize,
    pub rearranged: usize,
}

/// Scores a bank on held-out pairs: every step's pairs whose target index is
/// at or beyond `train_len`. MAPE uses the median model.
pub fn evaluate_bank(
    bank: &ModelBank,
    history: &BTreeMap<String, Vec<f64>>,
    train_len: usize,
) -> Result<Vec<ArcMetrics>, ForecastError> {
    let mut out = Vec::new();
    for (arc, series) in history {
        let ds = make_supervised(series, bank.lags, bank.horizon)?;
        let (mut lo, mut mid, mut hi, mut actual) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut rearranged = 0;
        for data in &ds.steps {
            for k in 0..data.targets.len() {
                if data.target_index[k] < train_len {
                    continue;
                }
                let (cell, crossed) = predict_cell(bank, arc, data.step, &data.features[k])?;
                rearranged += usize::from(crossed);
                lo.push(cell.lower);
                mid.push(cell.median);
                hi.push(cell.upper);
                actual.push(data.targets[k]);
            }
        }
        out.push(ArcMetrics {
            arc: arc.clone(),
            mape: mape(&mid, &actual)?,
            picp: picp(&lo, &hi, &actual)?,
            test_points: actual.len(),
            rearranged,
        });
    }
    Ok(out)
}

pub fn write_metrics_csv<W: Write>(metrics: &[ArcMetrics], alpha: f64, out: W) -> Result<(), ForecastError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["arc", "alpha", "mape", "picp", "test_points", "rearranged"])?;
    for m in metrics {
        w.write_record([
            m.arc.as_str(),
            &format_value(alpha),
            &format_value(m.mape),
            &format_value(m.picp),
            &m.test_points.to_string(),
            &m.rearranged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses history CSV with columns `timestamp,arc,value`. Rows of an arc
/// must be in increasing timestamp order (numeric when both parse as
/// numbers, lexicographic otherwise).
pub fn read_history_csv<R: Read>(input: R) -> Result<BTreeMap<String, Vec<f64>>, ForecastError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(csv_parse_error)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| ForecastError::Parse {
                line: 1,
                message: format!("missing column '{name}'"),
            })
    };
    let (ts_col, arc_col, val_col) = (col("timestamp")?, col("arc")?, col("value")?);
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut last_ts: BTreeMap<String, String> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_parse_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let (ts, arc) = (field(ts_col), field(arc_col));
        let value: f64 = field(val_col).parse().map_err(|_| ForecastError::Parse {
            line,
            message: format!("value '{}' is not a number", field(val_col)),
        })?;
        if let Some(prev) = last_ts.get(arc) {
            let ordered = match (prev.parse::<f64>(), ts.parse::<f64>()) {
                (Ok(a), Ok(b)) => a < b,
                _ => prev.as_str() < ts,
            };
            if !ordered {
                return Err(ForecastError::Parse {
                    line,
                    message: format!("timestamp '{ts}' for arc {arc} is not after '{prev}'"),
                });
            }
        }
        last_ts.insert(arc.to_string(), ts.to_string());
        series.entry(arc.to_string()).or_default().push(value);
    }
    Ok(series)
}

/// Writes history with integer timestamps `0..len`.
pub fn write_history_csv<W: Write>(series: &BTreeMap<String, Vec<f64>>, out: W) -> Result<(), ForecastError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "arc", "value"])?;
    for (arc, values) in series {
        for (i, v) in values.iter().enumerate() {
            w.write_record([&i.to_string(), arc.as_str(), &format_value(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}
