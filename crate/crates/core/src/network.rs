//! Byproduct-gas network and its deterministic scheduling model.
//!
//! A network has four unit roles: supply (gas producers), storage
//! (gasholders), conversion (boilers, CHP, ...), and demand. Flows on arcs
//! from a supply unit into a gasholder are the uncertain supply `z`; every
//! other arc carries a decision flow `f`.
//!
//! [`build_deterministic`] compiles a network plus horizon data into a
//! minimization MILP with, per period:
//!
//! - gasholder mass balance, level bounds, ramp limits, mid-level deviation;
//! - conversion energy balance, on-state flow capacity, minimum mixed
//!   calorific value of inputs, minimum output ratio or forced off;
//! - start-stop linking of on/off states;
//! - demand coverage with shortage/surplus variables.
//!
//! Gasholder level bounds and ramp limits are elastic: one nonnegative slack
//! per gasholder and period relaxes all four rows at a large penalty, so the
//! recourse problem stays feasible for any supply realization.
//!
//! Flows and calorific values are abstract consistent units: an arc's energy
//! content is `flow * calorific`, and demands are stated in flow units of the
//! energy arriving at the demand unit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{LpProblem, Relation, UNBOUNDED};
use crate::milp::{MilpOutcome, MilpProblem, MilpStatus};

/// Elastic slack penalty as a multiple of the largest objective weight.
pub const ELASTIC_PENALTY_FACTOR: f64 = 1e3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("network validation failed:\n{0}")]
    Validation(ValidationReport),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("solver outcome is not optimal")]
    NotOptimal,
    #[error("objective breakdown {breakdown:.6} disagrees with solver objective {solver:.6}")]
    ObjectiveMismatch { breakdown: f64, solver: f64 },
    #[error("schema error at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandClass {
    /// Byproduct gas released to the environment; surplus is penalized.
    EmittedGas,
    /// Steam or electricity; shortage is penalized.
    ProducedEnergy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageParams {
    pub level_min: f64,
    pub level_max: f64,
    /// Largest level change between consecutive periods.
    pub max_change: f64,
    pub level_mid: f64,
    pub initial_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionParams {
    /// Output energy over input energy, in (0, 1].
    pub efficiency: f64,
    /// Minimum mixed calorific value of the inputs while on.
    pub min_input_calorific: f64,
    /// Minimum output as a fraction of total output capacity while on.
    pub min_output_ratio: f64,
    /// On/off state before the first period.
    #[serde(default = "default_true")]
    pub initially_on: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandParams {
    pub class: DemandClass,
    /// Cost per unit of shortage (produced energy) or surplus (emitted gas).
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum UnitRole {
    Supply,
    Storage(StorageParams),
    Conversion(ConversionParams),
    Demand(DemandParams),
}

impl UnitRole {
    pub fn name(&self) -> &'static str {
        match self {
            UnitRole::Supply => "supply",
            UnitRole::Storage(_) => "storage",
            UnitRole::Conversion(_) => "conversion",
            UnitRole::Demand(_) => "demand",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    #[serde(flatten)]
    pub role: UnitRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub id: String,
    pub from: String,
    pub to: String,
    pub energy: String,
    /// Energy per unit of flow.
    pub calorific: f64,
    /// Flow bounds while the adjacent conversion unit is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyNetwork {
    #[serde(default)]
    pub energies: Vec<String>,
    pub units: Vec<Unit>,
    pub arcs: Vec<Arc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonData {
    pub periods: usize,
    /// Per demand unit, one value per period. Missing units default to zero.
    #[serde(default)]
    pub demands: BTreeMap<String, Vec<f64>>,
    /// Per supply-to-storage arc, the nominal supply per period.
    pub nominal_supply: BTreeMap<String, Vec<f64>>,
    /// Cost per start or stop of a conversion unit.
    pub start_stop_cost: f64,
    /// Cost per unit of gasholder deviation from its middle level.
    pub deviation_cost: f64,
    /// Single big-M for all switching rows; per-row constants when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
}

/// Network plus horizon, the on-disk plant description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "CaseDocument", into = "CaseDocument")]
pub struct PlantCase {
    pub network: EnergyNetwork,
    pub horizon: HorizonData,
}

/// On-disk layout: network fields at the top level next to `horizon`.
#[derive(Clone, Serialize, Deserialize)]
struct CaseDocument {
    #[serde(default)]
    energies: Vec<String>,
    units: Vec<Unit>,
    arcs: Vec<Arc>,
    horizon: HorizonData,
}

impl From<CaseDocument> for PlantCase {
    fn from(doc: CaseDocument) -> Self {
        PlantCase {
            network: EnergyNetwork {
                energies: doc.energies,
                units: doc.units,
                arcs: doc.arcs,
            },
            horizon: doc.horizon,
        }
    }
}

impl From<PlantCase> for CaseDocument {
    fn from(case: PlantCase) -> Self {
        CaseDocument {
            energies: case.network.energies,
            units: case.network.units,
            arcs: case.network.arcs,
            horizon: case.horizon,
        }
    }
}

impl PlantCase {
    /// Parses JSON, reporting schema errors with a JSON pointer.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ModelError::Schema {
            pointer: json_pointer(e.path()),
            message: e.inner().to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plant case serializes")
    }
}

/// Converts a serde path (`units[2].level_max`) into a JSON pointer (`/units/2/level_max`).
pub fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    DuplicateId,
    DanglingArc,
    Layering,
    StorageGas,
    BoundOrder,
    Parameter,
    Calorific,
    Capacity,
    UnknownEnergy,
    ConversionPorts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub subject: String,
    pub rule: Rule,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, subject: &str, rule: Rule, message: impl Into<String>) {
        self.violations.push(Violation {
            subject: subject.to_string(),
            rule,
            message: message.into(),
        });
    }

    pub fn has(&self, subject: &str, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.subject == subject && v.rule == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  {} [{:?}]: {}", v.subject, v.rule, v.message)?;
        }
        Ok(())
    }
}

impl EnergyNetwork {
    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.units.iter().position(|u| u.id == id)
    }

    pub fn arc_index(&self, id: &str) -> Option<usize> {
        self.arcs.iter().position(|a| a.id == id)
    }

    fn role_of(&self, id: &str) -> Option<&UnitRole> {
        self.units.iter().find(|u| u.id == id).map(|u| &u.role)
    }

    /// Arcs from a supply unit into a gasholder: the uncertain supply.
    pub fn supply_arcs(&self) -> Vec<usize> {
        (0..self.arcs.len()).filter(|&a| self.is_supply_arc(a)).collect()
    }

    pub fn is_supply_arc(&self, a: usize) -> bool {
        let arc = &self.arcs[a];
        matches!(self.role_of(&arc.from), Some(UnitRole::Supply))
            && matches!(self.role_of(&arc.to), Some(UnitRole::Storage(_)))
    }

    pub fn inbound(&self, unit: usize) -> Vec<usize> {
        let id = &self.units[unit].id;
        (0..self.arcs.len()).filter(|&a| &self.arcs[a].to == id).collect()
    }

    pub fn outbound(&self, unit: usize) -> Vec<usize> {
        let id = &self.units[unit].id;
        (0..self.arcs.len()).filter(|&a| &self.arcs[a].from == id).collect()
    }

    pub fn storage_units(&self) -> Vec<usize> {
        self.units_where(|r| matches!(r, UnitRole::Storage(_)))
    }

    pub fn conversion_units(&self) -> Vec<usize> {
        self.units_where(|r| matches!(r, UnitRole::Conversion(_)))
    }

    pub fn demand_units(&self) -> Vec<usize> {
        self.units_where(|r| matches!(r, UnitRole::Demand(_)))
    }

    fn units_where(&self, pred: impl Fn(&UnitRole) -> bool) -> Vec<usize> {
        (0..self.units.len()).filter(|&k| pred(&self.units[k].role)).collect()
    }

    pub fn storage(&self, k: usize) -> &StorageParams {
        match &self.units[k].role {
            UnitRole::Storage(p) => p,
            other => panic!("unit {} is {}, not storage", self.units[k].id, other.name()),
        }
    }

    pub fn conversion(&self, k: usize) -> &ConversionParams {
        match &self.units[k].role {
            UnitRole::Conversion(p) => p,
            other => panic!("unit {} is {}, not conversion", self.units[k].id, other.name()),
        }
    }

    pub fn demand(&self, k: usize) -> &DemandParams {
        match &self.units[k].role {
            UnitRole::Demand(p) => p,
            other => panic!("unit {} is {}, not demand", self.units[k].id, other.name()),
        }
    }

    fn arc_capacity(&self, a: usize) -> (f64, f64) {
        let arc = &self.arcs[a];
        (arc.flow_min.unwrap_or(0.0), arc.flow_max.unwrap_or(0.0))
    }
}

/// Checks every structural and parameter rule; an empty report means the
/// network can be compiled.
pub fn validate_network(net: &EnergyNetwork) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for u in &net.units {
        *seen.entry(u.id.as_str()).or_default() += 1;
    }
    for a in &net.arcs {
        *seen.entry(a.id.as_str()).or_default() += 1;
    }
    let mut dups: Vec<&str> = seen.iter().filter(|(_, &c)| c > 1).map(|(k, _)| *k).collect();
    dups.sort_unstable();
    for id in dups {
        report.push(id, Rule::DuplicateId, "identifier used more than once");
    }

    for u in &net.units {
        match &u.role {
            UnitRole::Storage(p) => {
                if !(p.level_min <= p.level_mid && p.level_mid <= p.level_max) {
                    report.push(
                        &u.id,
                        Rule::BoundOrder,
                        format!(
                            "levels must satisfy min <= mid <= max, got {} / {} / {}",
                            p.level_min, p.level_mid, p.level_max
                        ),
                    );
                }
                if !(p.level_min <= p.initial_level && p.initial_level <= p.level_max) {
                    report.push(&u.id, Rule::BoundOrder, "initial level outside [min, max]");
                }
                if !(p.max_change > 0.0) {
                    report.push(&u.id, Rule::Parameter, "max_change must be positive");
                }
            }
            UnitRole::Conversion(p) => {
                if !(p.efficiency > 0.0 && p.efficiency <= 1.0) {
                    report.push(&u.id, Rule::Parameter, "efficiency must lie in (0, 1]");
                }
                if !(0.0..1.0).contains(&p.min_output_ratio) {
                    report.push(&u.id, Rule::Parameter, "min_output_ratio must lie in [0, 1)");
                }
                if !(p.min_input_calorific >= 0.0) {
                    report.push(&u.id, Rule::Parameter, "min_input_calorific must be nonnegative");
                }
            }
            UnitRole::Demand(p) => {
                if !(p.penalty >= 0.0) {
                    report.push(&u.id, Rule::Parameter, "penalty must be nonnegative");
                }
            }
            UnitRole::Supply => {}
        }
    }

    for arc in &net.arcs {
        let from = net.role_of(&arc.from);
        let to = net.role_of(&arc.to);
        if from.is_none() || to.is_none() {
            report.push(&arc.id, Rule::DanglingArc, "arc references an unknown unit");
            continue;
        }
        let (from, to) = (from.unwrap(), to.unwrap());
        let allowed = matches!(
            (from, to),
            (
                UnitRole::Supply,
                UnitRole::Storage(_) | UnitRole::Conversion(_) | UnitRole::Demand(_)
            ) | (UnitRole::Storage(_), UnitRole::Conversion(_) | UnitRole::Demand(_))
                | (UnitRole::Conversion(_), UnitRole::Demand(_))
        );
        if !allowed {
            report.push(
                &arc.id,
                Rule::Layering,
                format!("{} -> {} is not a permitted direction", from.name(), to.name()),
            );
        }
        if !(arc.calorific > 0.0) {
            report.push(&arc.id, Rule::Calorific, "calorific value must be positive");
        }
        if !net.energies.is_empty() && !net.energies.contains(&arc.energy) {
            report.push(
                &arc.id,
                Rule::UnknownEnergy,
                format!("energy {} not declared", arc.energy),
            );
        }
        let touches_conversion = matches!(from, UnitRole::Conversion(_)) || matches!(to, UnitRole::Conversion(_));
        if touches_conversion {
            match (arc.flow_min, arc.flow_max) {
                (Some(lo), Some(hi)) if 0.0 <= lo && lo <= hi && hi > 0.0 => {}
                _ => report.push(
                    &arc.id,
                    Rule::Capacity,
                    "conversion arcs need 0 <= flow_min <= flow_max with flow_max > 0",
                ),
            }
        }
    }

    for k in 0..net.units.len() {
        let id = &net.units[k].id;
        match &net.units[k].role {
            UnitRole::Storage(_) => {
                let inbound: Vec<usize> = net.inbound(k).into_iter().filter(|&a| net.is_supply_arc(a)).collect();
                let mut gases: Vec<&str> = inbound.iter().map(|&a| net.arcs[a].energy.as_str()).collect();
                gases.sort_unstable();
                gases.dedup();
                if gases.len() != 1 {
                    report.push(
                        id,
                        Rule::StorageGas,
                        format!(
                            "gasholder needs exactly one gas kind on its supply arcs, found {}",
                            gases.len()
                        ),
                    );
                } else if net.outbound(k).iter().any(|&a| net.arcs[a].energy != gases[0]) {
                    report.push(id, Rule::StorageGas, "outbound arcs must carry the stored gas");
                }
            }
            UnitRole::Conversion(_) if net.inbound(k).is_empty() || net.outbound(k).is_empty() => {
                report.push(id, Rule::ConversionPorts, "conversion unit needs input and output arcs");
            }
            _ => {}
        }
    }
    report
}

fn check_horizon(net: &EnergyNetwork, horizon: &HorizonData) -> Result<(), ModelError> {
    let t = horizon.periods;
    if t == 0 {
        return Err(ModelError::Dimension("horizon needs at least one period".into()));
    }
    for (id, series) in &horizon.demands {
        let Some(k) = net.unit_index(id) else {
            return Err(ModelError::Dimension(format!("demand for unknown unit {id}")));
        };
        if !matches!(net.units[k].role, UnitRole::Demand(_)) {
            return Err(ModelError::Dimension(format!("{id} is not a demand unit")));
        }
        if series.len() != t {
            return Err(ModelError::Dimension(format!(
                "demand {id} has {} periods, horizon has {t}",
                series.len()
            )));
        }
        if series.iter().any(|d| !(*d >= 0.0)) {
            return Err(ModelError::Dimension(format!("demand {id} has negative values")));
        }
    }
    for a in net.supply_arcs() {
        let id = &net.arcs[a].id;
        match horizon.nominal_supply.get(id) {
            Some(s) if s.len() == t => {}
            Some(s) => {
                return Err(ModelError::Dimension(format!(
                    "nominal supply {id} has {} periods, horizon has {t}",
                    s.len()
                )))
            }
            None => return Err(ModelError::Dimension(format!("missing nominal supply for arc {id}"))),
        }
    }
    for id in horizon.nominal_supply.keys() {
        match net.arc_index(id) {
            Some(a) if net.is_supply_arc(a) => {}
            _ => return Err(ModelError::Dimension(format!("{id} is not a supply-to-gasholder arc"))),
        }
    }
    if !(horizon.start_stop_cost >= 0.0 && horizon.deviation_cost >= 0.0) {
        return Err(ModelError::Dimension("objective weights must be nonnegative".into()));
    }
    Ok(())
}

/// Semantic role of a compiled variable. Periods are 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarKind {
    Flow { arc: usize, t: usize },
    Level { unit: usize, t: usize },
    Deviation { unit: usize, t: usize },
    LevelSlack { unit: usize, t: usize },
    Unmet { unit: usize, t: usize },
    On { unit: usize, t: usize },
    StartStop { unit: usize, t: usize },
}

impl VarKind {
    pub fn is_first_stage(&self) -> bool {
        matches!(self, VarKind::On { .. } | VarKind::StartStop { .. })
    }

    pub fn period(&self) -> usize {
        match *self {
            VarKind::Flow { t, .. }
            | VarKind::Level { t, .. }
            | VarKind::Deviation { t, .. }
            | VarKind::LevelSlack { t, .. }
            | VarKind::Unmet { t, .. }
            | VarKind::On { t, .. }
            | VarKind::StartStop { t, .. } => t,
        }
    }

    pub fn label(&self, net: &EnergyNetwork) -> String {
        let u = |k: usize| net.units[k].id.as_str();
        match *self {
            VarKind::Flow { arc, t } => format!("f[{},{}]", net.arcs[arc].id, t + 1),
            VarKind::Level { unit, t } => format!("u[{},{}]", u(unit), t + 1),
            VarKind::Deviation { unit, t } => format!("v[{},{}]", u(unit), t + 1),
            VarKind::LevelSlack { unit, t } => format!("e[{},{}]", u(unit), t + 1),
            VarKind::Unmet { unit, t } => format!("w[{},{}]", u(unit), t + 1),
            VarKind::On { unit, t } => format!("O[{},{}]", u(unit), t + 1),
            VarKind::StartStop { unit, t } => format!("S[{},{}]", u(unit), t + 1),
        }
    }
}

/// Origin of a compiled row. Periods are 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    MassBalance { unit: usize, t: usize },
    LevelLower { unit: usize, t: usize },
    LevelUpper { unit: usize, t: usize },
    RampUp { unit: usize, t: usize },
    RampDown { unit: usize, t: usize },
    DeviationAbove { unit: usize, t: usize },
    DeviationBelow { unit: usize, t: usize },
    ConversionBalance { unit: usize, t: usize },
    FlowMin { arc: usize, t: usize },
    FlowMax { arc: usize, t: usize },
    InputCalorific { unit: usize, t: usize },
    MinOutput { unit: usize, t: usize },
    ForcedOff { unit: usize, t: usize },
    StartUp { unit: usize, t: usize },
    ShutDown { unit: usize, t: usize },
    Demand { unit: usize, t: usize },
}

/// Bidirectional index between compiled variables and their semantic names,
/// plus the origin of every compiled row.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableMap {
    pub periods: usize,
    pub n_units: usize,
    pub n_arcs: usize,
    vars: Vec<VarKind>,
    index: HashMap<VarKind, usize>,
    pub rows: Vec<RowKind>,
    pub supply_arcs: Vec<usize>,
    /// Penalty on the elastic level slacks.
    pub elastic_penalty: f64,
}

impl VariableMap {
    fn new(periods: usize, net: &EnergyNetwork) -> Self {
        Self {
            periods,
            n_units: net.units.len(),
            n_arcs: net.arcs.len(),
            vars: Vec::new(),
            index: HashMap::new(),
            rows: Vec::new(),
            supply_arcs: net.supply_arcs(),
            elastic_penalty: 0.0,
        }
    }

    fn add(&mut self, kind: VarKind) -> usize {
        let j = self.vars.len();
        self.vars.push(kind);
        self.index.insert(kind, j);
        j
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, kind: VarKind) -> Option<usize> {
        self.index.get(&kind).copied()
    }

    pub fn kind(&self, j: usize) -> VarKind {
        self.vars[j]
    }

    pub fn kinds(&self) -> &[VarKind] {
        &self.vars
    }

    fn var(&self, kind: VarKind) -> usize {
        self.index[&kind]
    }

    pub fn first_stage_vars(&self) -> Vec<usize> {
        (0..self.vars.len())
            .filter(|&j| self.vars[j].is_first_stage())
            .collect()
    }

    pub fn second_stage_vars(&self) -> Vec<usize> {
        (0..self.vars.len())
            .filter(|&j| !self.vars[j].is_first_stage())
            .collect()
    }

    /// Whether this map was compiled from a network of the same shape.
    pub fn matches(&self, net: &EnergyNetwork, horizon: &HorizonData) -> bool {
        self.periods == horizon.periods && self.n_units == net.units.len() && self.n_arcs == net.arcs.len()
    }
}

struct RowBuilder<'a> {
    lp: &'a mut LpProblem,
    map: &'a mut VariableMap,
}

impl RowBuilder<'_> {
    fn row(&mut self, kind: RowKind, terms: &[(usize, f64)], rel: Relation, rhs: f64) {
        self.lp.add_sparse_constraint(terms, rel, rhs);
        self.map.rows.push(kind);
    }
}

/// Compiles the deterministic scheduling MILP at nominal supply.
pub fn build_deterministic(
    net: &EnergyNetwork,
    horizon: &HorizonData,
) -> Result<(MilpProblem, VariableMap), ModelError> {
    let report = validate_network(net);
    if !report.is_empty() {
        return Err(ModelError::Validation(report));
    }
    check_horizon(net, horizon)?;
    let periods = horizon.periods;
    let storages = net.storage_units();
    let conversions = net.conversion_units();
    let demands = net.demand_units();

    let mut map = VariableMap::new(periods, net);
    for t in 0..periods {
        for a in 0..net.arcs.len() {
            if !net.is_supply_arc(a) {
                map.add(VarKind::Flow { arc: a, t });
            }
        }
        for &k in &storages {
            map.add(VarKind::Level { unit: k, t });
            map.add(VarKind::Deviation { unit: k, t });
            map.add(VarKind::LevelSlack { unit: k, t });
        }
        for &k in &demands {
            map.add(VarKind::Unmet { unit: k, t });
        }
        for &k in &conversions {
            map.add(VarKind::On { unit: k, t });
            map.add(VarKind::StartStop { unit: k, t });
        }
    }

    let n = map.len();
    let mut lp = LpProblem::new(n);
    let mut binaries = Vec::new();
    let max_weight = demands
        .iter()
        .map(|&k| net.demand(k).penalty)
        .fold(horizon.start_stop_cost.max(horizon.deviation_cost), f64::max);
    let elastic = ELASTIC_PENALTY_FACTOR * if max_weight > 0.0 { max_weight } else { 1.0 };
    map.elastic_penalty = elastic;
    for (j, kind) in map.vars.iter().enumerate() {
        match *kind {
            VarKind::Level { .. } => lp.bounds[j] = (-UNBOUNDED, UNBOUNDED),
            VarKind::On { .. } | VarKind::StartStop { .. } => {
                lp.bounds[j] = (0.0, 1.0);
                binaries.push(j);
            }
            _ => {}
        }
        lp.objective[j] = match *kind {
            VarKind::StartStop { .. } => horizon.start_stop_cost,
            VarKind::Deviation { .. } => horizon.deviation_cost,
            VarKind::Unmet { unit, .. } => net.demand(unit).penalty,
            VarKind::LevelSlack { .. } => elastic,
            _ => 0.0,
        };
    }

    let mut b = RowBuilder {
        lp: &mut lp,
        map: &mut map,
    };
    let flow = |b: &RowBuilder, a: usize, t: usize| b.map.var(VarKind::Flow { arc: a, t });

    for t in 0..periods {
        for &k in &storages {
            let p = net.storage(k);
            let u = b.map.var(VarKind::Level { unit: k, t });
            let v = b.map.var(VarKind::Deviation { unit: k, t });
            let e = b.map.var(VarKind::LevelSlack { unit: k, t });
            let prev = (t > 0).then(|| b.map.var(VarKind::Level { unit: k, t: t - 1 }));
            let u0 = if t == 0 { p.initial_level } else { 0.0 };

            // mass balance: u_t - u_{t-1} + sum_out f = sum_in z
            let mut terms = vec![(u, 1.0)];
            if let Some(pu) = prev {
                terms.push((pu, -1.0));
            }
            for a in net.outbound(k) {
                terms.push((flow(&b, a, t), 1.0));
            }
            let supply: f64 = net
                .inbound(k)
                .into_iter()
                .filter(|&a| net.is_supply_arc(a))
                .map(|a| horizon.nominal_supply[&net.arcs[a].id][t])
                .sum();
            b.row(RowKind::MassBalance { unit: k, t }, &terms, Relation::Eq, supply + u0);

            b.row(
                RowKind::LevelLower { unit: k, t },
                &[(u, 1.0), (e, 1.0)],
                Relation::Ge,
                p.level_min,
            );
            b.row(
                RowKind::LevelUpper { unit: k, t },
                &[(u, 1.0), (e, -1.0)],
                Relation::Le,
                p.level_max,
            );

            let mut up = vec![(u, 1.0), (e, -1.0)];
            let mut down = vec![(u, -1.0), (e, -1.0)];
            if let Some(pu) = prev {
                up.push((pu, -1.0));
                down.push((pu, 1.0));
            }
            b.row(RowKind::RampUp { unit: k, t }, &up, Relation::Le, p.max_change + u0);
            b.row(RowKind::RampDown { unit: k, t }, &down, Relation::Le, p.max_change - u0);

            b.row(
                RowKind::DeviationAbove { unit: k, t },
                &[(u, 1.0), (v, -1.0)],
                Relation::Le,
                p.level_mid,
            );
            b.row(
                RowKind::DeviationBelow { unit: k, t },
                &[(u, -1.0), (v, -1.0)],
                Relation::Le,
                -p.level_mid,
            );
        }

        for &k in &conversions {
            let p = net.conversion(k);
            let on = b.map.var(VarKind::On { unit: k, t });
            let s = b.map.var(VarKind::StartStop { unit: k, t });
            let inputs = net.inbound(k);
            let outputs = net.outbound(k);

            let mut terms = Vec::new();
            for &a in &inputs {
                terms.push((flow(&b, a, t), p.efficiency * net.arcs[a].calorific));
            }
            for &a in &outputs {
                terms.push((flow(&b, a, t), -net.arcs[a].calorific));
            }
            b.row(RowKind::ConversionBalance { unit: k, t }, &terms, Relation::Eq, 0.0);

            for &a in inputs.iter().chain(&outputs) {
                let (lo, hi) = net.arc_capacity(a);
                let f = flow(&b, a, t);
                b.row(
                    RowKind::FlowMin { arc: a, t },
                    &[(f, 1.0), (on, -lo)],
                    Relation::Ge,
                    0.0,
                );
                b.row(
                    RowKind::FlowMax { arc: a, t },
                    &[(f, 1.0), (on, -hi)],
                    Relation::Le,
                    0.0,
                );
            }

            // sum f*(omega - eta_in) >= M (O - 1); M covers the worst shortfall
            let tight_cal: f64 = inputs
                .iter()
                .map(|&a| net.arc_capacity(a).1 * (p.min_input_calorific - net.arcs[a].calorific).max(0.0))
                .sum();
            let m_cal = horizon.big_m.unwrap_or(tight_cal);
            let mut terms: Vec<(usize, f64)> = inputs
                .iter()
                .map(|&a| (flow(&b, a, t), net.arcs[a].calorific - p.min_input_calorific))
                .collect();
            if m_cal != 0.0 {
                terms.push((on, -m_cal));
            }
            b.row(RowKind::InputCalorific { unit: k, t }, &terms, Relation::Ge, -m_cal);

            let cap_out: f64 = outputs.iter().map(|&a| net.arc_capacity(a).1).sum();
            let threshold = p.min_output_ratio * cap_out;
            let m_min = horizon.big_m.unwrap_or(threshold);
            let mut terms: Vec<(usize, f64)> = outputs.iter().map(|&a| (flow(&b, a, t), 1.0)).collect();
            if m_min != 0.0 {
                terms.push((on, -m_min));
            }
            b.row(
                RowKind::MinOutput { unit: k, t },
                &terms,
                Relation::Ge,
                threshold - m_min,
            );

            let m_off = horizon.big_m.unwrap_or(cap_out);
            let mut terms: Vec<(usize, f64)> = outputs.iter().map(|&a| (flow(&b, a, t), 1.0)).collect();
            terms.push((on, -m_off));
            b.row(RowKind::ForcedOff { unit: k, t }, &terms, Relation::Le, 0.0);

            // start-stop: |O_t - O_{t-1}| <= S_t
            let (prev_terms, prev_const) = if t == 0 {
                (None, if p.initially_on { 1.0 } else { 0.0 })
            } else {
                (Some(b.map.var(VarKind::On { unit: k, t: t - 1 })), 0.0)
            };
            let mut su = vec![(on, 1.0), (s, -1.0)];
            let mut sd = vec![(on, -1.0), (s, -1.0)];
            if let Some(po) = prev_terms {
                su.push((po, -1.0));
                sd.push((po, 1.0));
            }
            b.row(RowKind::StartUp { unit: k, t }, &su, Relation::Le, prev_const);
            b.row(RowKind::ShutDown { unit: k, t }, &sd, Relation::Le, -prev_const);
        }

        for &k in &demands {
            let p = net.demand(k);
            let w = b.map.var(VarKind::Unmet { unit: k, t });
            let d = horizon.demands.get(&net.units[k].id).map_or(0.0, |s| s[t]);
            let mut terms: Vec<(usize, f64)> = net.inbound(k).into_iter().map(|a| (flow(&b, a, t), 1.0)).collect();
            match p.class {
                // surplus above demand is emitted: w >= sum f - d
                DemandClass::EmittedGas => {
                    terms.push((w, -1.0));
                    b.row(RowKind::Demand { unit: k, t }, &terms, Relation::Le, d);
                }
                // shortage: sum f + w >= d
                DemandClass::ProducedEnergy => {
                    terms.push((w, 1.0));
                    b.row(RowKind::Demand { unit: k, t }, &terms, Relation::Ge, d);
                }
            }
        }
    }
    // supply arcs into conversion/demand units carry decision flows with no
    // capacity row; their flows are only limited by downstream rows.
    for a in 0..net.arcs.len() {
        if let Some(hi) = net.arcs[a].flow_max {
            let from_supply = matches!(net.role_of(&net.arcs[a].from), Some(UnitRole::Supply));
            let to_demand = matches!(net.role_of(&net.arcs[a].to), Some(UnitRole::Demand(_)));
            if from_supply && to_demand {
                for t in 0..periods {
                    let j = map.var(VarKind::Flow { arc: a, t });
                    lp.bounds[j].1 = hi;
                }
            }
        }
    }

    Ok((MilpProblem::new(lp, binaries), map))
}

/// Objective split into its cost terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub start_stop: f64,
    pub deviation: f64,
    pub demand: f64,
    /// Elastic level/ramp slack penalty; zero unless a gasholder limit was violated.
    pub slack_penalty: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageTrace {
    pub unit: String,
    pub level: Vec<f64>,
    pub deviation: Vec<f64>,
    pub slack: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionTrace {
    pub unit: String,
    pub on: Vec<bool>,
    pub start_stop: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub arc: String,
    pub flow: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandTrace {
    pub unit: String,
    pub unmet: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub periods: usize,
    pub storage: Vec<StorageTrace>,
    pub conversion: Vec<ConversionTrace>,
    pub flows: Vec<FlowTrace>,
    pub demand: Vec<DemandTrace>,
    pub objective: ObjectiveBreakdown,
}

/// Computes the objective terms from a variable assignment.
pub fn objective_breakdown(
    x: &[f64],
    map: &VariableMap,
    net: &EnergyNetwork,
    horizon: &HorizonData,
) -> ObjectiveBreakdown {
    let mut br = ObjectiveBreakdown::default();
    for (j, kind) in map.kinds().iter().enumerate() {
        match *kind {
            VarKind::StartStop { .. } => br.start_stop += horizon.start_stop_cost * x[j],
            VarKind::Deviation { .. } => br.deviation += horizon.deviation_cost * x[j],
            VarKind::Unmet { unit, .. } => br.demand += net.demand(unit).penalty * x[j],
            VarKind::LevelSlack { .. } => br.slack_penalty += map.elastic_penalty * x[j],
            _ => {}
        }
    }
    br.total = br.start_stop + br.deviation + br.demand + br.slack_penalty;
    br
}

/// Turns a solved deterministic model back into a semantic schedule.
pub fn extract_schedule(
    outcome: &MilpOutcome,
    map: &VariableMap,
    net: &EnergyNetwork,
    horizon: &HorizonData,
) -> Result<Schedule, ModelError> {
    if outcome.status != MilpStatus::Optimal {
        return Err(ModelError::NotOptimal);
    }
    if outcome.assignment.len() != map.len() || !map.matches(net, horizon) {
        return Err(ModelError::Dimension(format!(
            "assignment has {} values and map covers {} variables over {} periods; network/horizon disagree",
            outcome.assignment.len(),
            map.len(),
            map.periods
        )));
    }
    let x = &outcome.assignment;
    let t_all = 0..horizon.periods;
    let val = |k: VarKind| x[map.var(k)];
    let storage = net
        .storage_units()
        .into_iter()
        .map(|k| StorageTrace {
            unit: net.units[k].id.clone(),
            level: t_all.clone().map(|t| val(VarKind::Level { unit: k, t })).collect(),
            deviation: t_all.clone().map(|t| val(VarKind::Deviation { unit: k, t })).collect(),
            slack: t_all.clone().map(|t| val(VarKind::LevelSlack { unit: k, t })).collect(),
        })
        .collect();
    let conversion = net
        .conversion_units()
        .into_iter()
        .map(|k| ConversionTrace {
            unit: net.units[k].id.clone(),
            on: t_all.clone().map(|t| val(VarKind::On { unit: k, t }) > 0.5).collect(),
            start_stop: t_all
                .clone()
                .map(|t| val(VarKind::StartStop { unit: k, t }) > 0.5)
                .collect(),
        })
        .collect();
    let flows = (0..net.arcs.len())
        .map(|a| FlowTrace {
            arc: net.arcs[a].id.clone(),
            flow: if net.is_supply_arc(a) {
                horizon.nominal_supply[&net.arcs[a].id].clone()
            } else {
                t_all.clone().map(|t| val(VarKind::Flow { arc: a, t })).collect()
            },
        })
        .collect();
    let demand = net
        .demand_units()
        .into_iter()
        .map(|k| DemandTrace {
            unit: net.units[k].id.clone(),
            unmet: t_all.clone().map(|t| val(VarKind::Unmet { unit: k, t })).collect(),
        })
        .collect();
    let objective = objective_breakdown(x, map, net, horizon);
    if (objective.total - outcome.objective_value).abs() > 1e-6 * (1.0 + outcome.objective_value.abs()) {
        return Err(ModelError::ObjectiveMismatch {
            breakdown: objective.total,
            solver: outcome.objective_value,
        });
    }
    Ok(Schedule {
        periods: horizon.periods,
        storage,
        conversion,
        flows,
        demand,
        objective,
    })
}

impl Schedule {
    /// Long-format CSV: `kind,entity,period,quantity,value`, periods 1-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "entity", "period", "quantity", "value"])?;
        let mut put = |kind: &str, entity: &str, t: usize, q: &str, v: f64| {
            w.write_record([kind, entity, &(t + 1).to_string(), q, &format_value(v)])
        };
        for s in &self.storage {
            for t in 0..self.periods {
                put("storage", &s.unit, t, "level", s.level[t])?;
                put("storage", &s.unit, t, "deviation", s.deviation[t])?;
                put("storage", &s.unit, t, "slack", s.slack[t])?;
            }
        }
        for c in &self.conversion {
            for t in 0..self.periods {
                put("conversion", &c.unit, t, "on", f64::from(u8::from(c.on[t])))?;
                put(
                    "conversion",
                    &c.unit,
                    t,
                    "start_stop",
                    f64::from(u8::from(c.start_stop[t])),
                )?;
            }
        }
        for f in &self.flows {
            for t in 0..self.periods {
                put("arc", &f.arc, t, "flow", f.flow[t])?;
            }
        }
        for d in &self.demand {
            for t in 0..self.periods {
                put("demand", &d.unit, t, "unmet", d.unmet[t])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Fixed-precision rendering shared by every CSV writer; clamps `-0`.
pub fn format_value(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}
