//! Box and budget uncertainty sets over supply trajectories.
//!
//! A realization is `z = z° + ξ⁺ ẑ⁺ - ξ⁻ ẑ⁻` per (arc, period), with
//! `ξ⁺ + ξ⁻ <= 1` per cell and at most `Γ_a` deviating periods per arc. A box
//! set is the budget set with `Γ_a = T` on every arc.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::ForecastIntervals;
use crate::network::{format_value, EnergyNetwork};

/// Supply per arc id, one value per period.
pub type SupplyPath = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("arc {0} missing")]
    MissingArc(String),
    #[error("arc {arc} has {got} periods, expected {expected}")]
    Periods { arc: String, got: usize, expected: usize },
    #[error("arc {arc}: budget {budget} outside [0, {periods}]")]
    BudgetRange { arc: String, budget: usize, periods: usize },
    #[error("arc {arc}: {used} deviating periods exceed budget {budget}")]
    BudgetExceeded { arc: String, used: f64, budget: usize },
    #[error("arc {arc}, period {period}: up and down deviation both set")]
    Conflict { arc: String, period: usize },
    #[error("arc {arc}, period {period}: invalid value {message}")]
    Value {
        arc: String,
        period: usize,
        message: String,
    },
    #[error("box set requires budget = T on every arc; arc {0} differs")]
    NotBox(String),
    #[error("uncertain arcs {set:?} do not match the network's supply arcs {network:?}")]
    ArcMismatch { set: Vec<String>, network: Vec<String> },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Box,
    Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcUncertainty {
    pub arc: String,
    pub nominal: Vec<f64>,
    pub down: Vec<f64>,
    pub up: Vec<f64>,
    pub budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSet")]
pub struct UncertaintySet {
    pub kind: SetKind,
    pub periods: usize,
    pub arcs: Vec<ArcUncertainty>,
}

#[derive(Deserialize)]
struct RawSet {
    kind: SetKind,
    periods: usize,
    arcs: Vec<ArcUncertainty>,
}

impl TryFrom<RawSet> for UncertaintySet {
    type Error = UncertaintyError;

    fn try_from(raw: RawSet) -> Result<Self, Self::Error> {
        let set = UncertaintySet {
            kind: raw.kind,
            periods: raw.periods,
            arcs: raw.arcs,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Per-arc budgets: one shared value or an explicit map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budgets {
    Uniform(usize),
    PerArc(BTreeMap<String, usize>),
}

impl Budgets {
    pub fn for_arc(&self, arc: &str) -> Result<usize, UncertaintyError> {
        match self {
            Budgets::Uniform(g) => Ok(*g),
            Budgets::PerArc(map) => map
                .get(arc)
                .copied()
                .ok_or_else(|| UncertaintyError::MissingArc(arc.to_string())),
        }
    }
}

impl UncertaintySet {
    pub fn budget(periods: usize, arcs: Vec<ArcUncertainty>) -> Result<Self, UncertaintyError> {
        let set = UncertaintySet {
            kind: SetKind::Budget,
            periods,
            arcs,
        };
        set.validate()?;
        Ok(set)
    }

    /// Box set; every budget is set to `periods`.
    pub fn boxed(periods: usize, mut arcs: Vec<ArcUncertainty>) -> Result<Self, UncertaintyError> {
        for a in &mut arcs {
            a.budget = periods;
        }
        let set = UncertaintySet {
            kind: SetKind::Box,
            periods,
            arcs,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), UncertaintyError> {
        for a in &self.arcs {
            for (name, v) in [("nominal", &a.nominal), ("down", &a.down), ("up", &a.up)] {
                if v.len() != self.periods {
                    return Err(UncertaintyError::Periods {
                        arc: format!("{} ({name})", a.arc),
                        got: v.len(),
                        expected: self.periods,
                    });
                }
            }
            for t in 0..self.periods {
                if !a.nominal[t].is_finite() || !(a.down[t] >= 0.0) || !(a.up[t] >= 0.0) || !a.up[t].is_finite() {
                    return Err(UncertaintyError::Value {
                        arc: a.arc.clone(),
                        period: t + 1,
                        message: "deviations must be finite and nonnegative".into(),
                    });
                }
            }
            if a.budget > self.periods {
                return Err(UncertaintyError::BudgetRange {
                    arc: a.arc.clone(),
                    budget: a.budget,
                    periods: self.periods,
                });
            }
            if self.kind == SetKind::Box && a.budget != self.periods {
                return Err(UncertaintyError::NotBox(a.arc.clone()));
            }
        }
        Ok(())
    }

    /// Same set with new budgets; a box set becomes a budget set.
    pub fn with_budgets(&self, budgets: &Budgets) -> Result<Self, UncertaintyError> {
        let mut arcs = self.arcs.clone();
        for a in &mut arcs {
            a.budget = budgets.for_arc(&a.arc)?;
        }
        UncertaintySet::budget(self.periods, arcs)
    }

    pub fn arc_ids(&self) -> Vec<String> {
        self.arcs.iter().map(|a| a.arc.clone()).collect()
    }

    pub fn nominal(&self) -> SupplyPath {
        self.arcs.iter().map(|a| (a.arc.clone(), a.nominal.clone())).collect()
    }

    /// Checks that the set covers exactly the network's supply arcs.
    pub fn check_network(&self, net: &EnergyNetwork, periods: usize) -> Result<(), UncertaintyError> {
        let mut mine = self.arc_ids();
        mine.sort();
        let mut theirs: Vec<String> = net.supply_arcs().into_iter().map(|a| net.arcs[a].id.clone()).collect();
        theirs.sort();
        if mine != theirs {
            return Err(UncertaintyError::ArcMismatch {
                set: mine,
                network: theirs,
            });
        }
        if self.periods != periods {
            return Err(UncertaintyError::Periods {
                arc: "*".into(),
                got: self.periods,
                expected: periods,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, UncertaintyError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Builds a budget set from forecast triples: `z° = q_0.5`,
/// `ẑ⁻ = z° - q_lo`, `ẑ⁺ = q_hi - z°`. Crossed quantiles clip the affected
/// deviation to zero and add a warning.
pub fn from_forecast(
    intervals: &ForecastIntervals,
    budgets: &Budgets,
) -> Result<(UncertaintySet, Vec<String>), UncertaintyError> {
    if let Budgets::PerArc(map) = budgets {
        if let Some(extra) = map.keys().find(|k| !intervals.arcs.contains_key(*k)) {
            return Err(UncertaintyError::MissingArc(extra.clone()));
        }
    }
    let mut warnings = Vec::new();
    let mut arcs = Vec::new();
    for (arc, cells) in &intervals.arcs {
        if cells.len() != intervals.periods {
            return Err(UncertaintyError::Periods {
                arc: arc.clone(),
                got: cells.len(),
                expected: intervals.periods,
            });
        }
        let mut a = ArcUncertainty {
            arc: arc.clone(),
            nominal: Vec::new(),
            down: Vec::new(),
            up: Vec::new(),
            budget: budgets.for_arc(arc)?,
        };
        for (t, c) in cells.iter().enumerate() {
            let (mut down, mut up) = (c.median - c.lower, c.upper - c.median);
            if down < 0.0 {
                warnings.push(format!(
                    "{arc} period {}: lower quantile above median, deviation clipped",
                    t + 1
                ));
                down = 0.0;
            }
            if up < 0.0 {
                warnings.push(format!(
                    "{arc} period {}: upper quantile below median, deviation clipped",
                    t + 1
                ));
                up = 0.0;
            }
            a.nominal.push(c.median);
            a.down.push(down);
            a.up.push(up);
        }
        arcs.push(a);
    }
    Ok((UncertaintySet::budget(intervals.periods, arcs)?, warnings))
}

/// Binary extreme-point indicators, indexed `[arc][period]` in set order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenarioIndicators {
    pub up: Vec<Vec<bool>>,
    pub down: Vec<Vec<bool>>,
}

impl ScenarioIndicators {
    pub fn nominal(set: &UncertaintySet) -> Self {
        let zeros = vec![vec![false; set.periods]; set.arcs.len()];
        Self {
            up: zeros.clone(),
            down: zeros,
        }
    }

    /// Deviating periods per arc.
    pub fn used(&self, arc: usize) -> usize {
        self.up[arc]
            .iter()
            .zip(&self.down[arc])
            .filter(|(u, d)| **u || **d)
            .count()
    }
}

/// Continuous weights `ξ ∈ [0, 1]`, indexed `[arc][period]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioWeights {
    pub up: Vec<Vec<f64>>,
    pub down: Vec<Vec<f64>>,
}

impl From<&ScenarioIndicators> for ScenarioWeights {
    fn from(ind: &ScenarioIndicators) -> Self {
        let conv = |m: &Vec<Vec<bool>>| {
            m.iter()
                .map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect())
                .collect()
        };
        Self {
            up: conv(&ind.up),
            down: conv(&ind.down),
        }
    }
}

pub fn realize(set: &UncertaintySet, ind: &ScenarioIndicators) -> Result<SupplyPath, UncertaintyError> {
    realize_weights(set, &ScenarioWeights::from(ind))
}

/// Realization under continuous weights; `ξ⁺ + ξ⁻ <= 1` per cell and the
/// weight total per arc must stay within its budget.
pub fn realize_weights(set: &UncertaintySet, w: &ScenarioWeights) -> Result<SupplyPath, UncertaintyError> {
    let shape_ok = |m: &Vec<Vec<f64>>| m.len() == set.arcs.len() && m.iter().all(|r| r.len() == set.periods);
    if !shape_ok(&w.up) || !shape_ok(&w.down) {
        return Err(UncertaintyError::Periods {
            arc: "indicators".into(),
            got: w.up.first().map_or(0, Vec::len),
            expected: set.periods,
        });
    }
    let mut out = SupplyPath::new();
    for (i, a) in set.arcs.iter().enumerate() {
        let mut used = 0.0;
        let mut z = Vec::with_capacity(set.periods);
        for t in 0..set.periods {
            let (up, down) = (w.up[i][t], w.down[i][t]);
            if !(0.0..=1.0).contains(&up) || !(0.0..=1.0).contains(&down) {
                return Err(UncertaintyError::Value {
                    arc: a.arc.clone(),
                    period: t + 1,
                    message: format!("weights ({up}, {down}) outside [0, 1]"),
                });
            }
            if up + down > 1.0 + 1e-12 {
                return Err(UncertaintyError::Conflict {
                    arc: a.arc.clone(),
                    period: t + 1,
                });
            }
            used += up + down;
            z.push(a.nominal[t] + up * a.up[t] - down * a.down[t]);
        }
        if used > a.budget as f64 + 1e-9 {
            return Err(UncertaintyError::BudgetExceeded {
                arc: a.arc.clone(),
                used,
                budget: a.budget,
            });
        }
        out.insert(a.arc.clone(), z);
    }
    Ok(out)
}

/// Seeded trajectories inside the set. Each arc picks a uniform number of
/// deviating periods in `0..=Γ_a`, uniform distinct periods, and a fair
/// direction per period. Half of the samples (by coin flip) are extreme
/// points; the rest scale each chosen deviation by a uniform weight.
pub fn sample(set: &UncertaintySet, seed: u64, n: usize) -> Vec<SupplyPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let extreme: bool = rng.gen();
            let mut w = ScenarioWeights {
                up: vec![vec![0.0; set.periods]; set.arcs.len()],
                down: vec![vec![0.0; set.periods]; set.arcs.len()],
            };
            for (i, a) in set.arcs.iter().enumerate() {
                let k = rng.gen_range(0..=a.budget.min(set.periods));
                for t in index::sample(&mut rng, set.periods, k).into_vec() {
                    let weight = if extreme { 1.0 } else { rng.gen::<f64>() };
                    if rng.gen::<bool>() {
                        w.up[i][t] = weight;
                    } else {
                        w.down[i][t] = weight;
                    }
                }
            }
            realize_weights(set, &w).expect("sampled weights are feasible")
        })
        .collect()
}

/// Trajectories as CSV: `sample,arc,period,value`, periods 1-based.
pub fn write_paths_csv<W: Write>(paths: &[SupplyPath], out: W) -> Result<(), UncertaintyError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample", "arc", "period", "value"])?;
    for (s, path) in paths.iter().enumerate() {
        for (arc, values) in path {
            for (t, v) in values.iter().enumerate() {
                w.write_record([&s.to_string(), arc.as_str(), &(t + 1).to_string(), &format_value(*v)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_paths_csv<R: Read>(input: R) -> Result<Vec<SupplyPath>, UncertaintyError> {
    #[derive(Deserialize)]
    struct Row {
        sample: usize,
        arc: String,
        period: usize,
        value: f64,
    }
    let mut paths: Vec<SupplyPath> = Vec::new();
    for rec in csv::Reader::from_reader(input).deserialize::<Row>() {
        let row = rec?;
        if row.sample >= paths.len() {
            paths.resize_with(row.sample + 1, SupplyPath::new);
        }
        let series = paths[row.sample].entry(row.arc.clone()).or_default();
        if row.period != series.len() + 1 {
            return Err(UncertaintyError::Value {
                arc: row.arc,
                period: row.period,
                message: "periods out of order".into(),
            });
        }
        series.push(row.value);
    }
    Ok(paths)
}
