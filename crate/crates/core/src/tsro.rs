//! Two-stage robust scheduling. The deterministic model is split into a
//! first-stage block over commitment binaries and second-stage blocks over
//! the continuous recourse, the worst case over the uncertainty set is found
//! through the dual of the recourse problem, and column-and-constraint
//! generation alternates that search with a scenario-expanded master.
//!
//! Block notation: `A x ⋚ b` holds first-stage rows, `G y ⋚ h` recourse-only
//! rows, `Q y + P x ⋚ r` mixed rows and `W y = s + z` the gasholder balances
//! that carry the uncertain supply `z`.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{solve_lp, LpError, LpOptions, LpOutcome, LpProblem, LpStatus, Relation, SimplexSolver, UNBOUNDED};
use crate::milp::{solve_milp, MilpError, MilpProblem, MilpStatus, DEFAULT_NODE_LIMIT, DEFAULT_REL_GAP};
use crate::network::{format_value, EnergyNetwork, HorizonData, RowKind, VarKind, VariableMap};
use crate::uncertainty::{realize, sample, ScenarioIndicators, SupplyPath, UncertaintyError, UncertaintySet};

/// Relative tolerance of the strong-duality audit.
pub const AUDIT_TOL: f64 = 1e-5;
/// Safety factor applied to the per-row bound on the balance duals.
pub const BIG_M_SAFETY: f64 = 10.0;
/// Times the big-M constants are grown by 10 after a failed audit.
pub const BIG_M_RETRIES: usize = 3;
pub const DEFAULT_CCG_TOL: f64 = 1e-4;
pub const DEFAULT_CCG_ITERATIONS: usize = 50;

const LP_TOL: f64 = 1e-7;
const SOUNDNESS_TRIALS: usize = 3;
const SOUNDNESS_TOL: f64 = 1e-6;
/// Elastic slack above this counts as a violated gasholder limit.
pub const SLACK_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TsroError {
    #[error("no gasholder balance rows to carry the uncertain supply")]
    NoUncertainRows,
    #[error("row {row} ({kind:?}) mixes uncertain supply with first-stage variables")]
    MixedUncertainRow { row: usize, kind: RowKind },
    #[error("supply arc {arc} period {period} does not enter any gasholder balance")]
    UncoveredSupply { arc: String, period: usize },
    #[error("block assembly disagrees with the deterministic model on trial {trial}: {staged} vs {deterministic}")]
    Soundness {
        trial: usize,
        staged: String,
        deterministic: String,
    },
    #[error("uncertainty set does not match the staged problem: {0}")]
    SetMismatch(String),
    #[error("first-stage vector has {got} entries, expected {expected}")]
    FirstStageLength { got: usize, expected: usize },
    #[error("first-stage decision violates row {row} by {violation:.3e}")]
    FirstStageInfeasible { row: usize, violation: f64 },
    #[error("recourse problem is {status:?} at this decision and supply")]
    Recourse { status: LpStatus },
    #[error("worst-case dual is unbounded: some supply path leaves the recourse infeasible (scenario {scenario})")]
    SubproblemUnbounded { scenario: String },
    #[error("worst-case subproblem is infeasible")]
    SubproblemInfeasible,
    #[error("strong-duality audit failed: dual {dual:.9} vs primal {primal:.9} after {retries} big-M increases")]
    DualityAudit { dual: f64, primal: f64, retries: usize },
    #[error("master problem needs at least one scenario")]
    NoScenarios,
    #[error("master problem is infeasible: first-stage constraints cannot be met")]
    MasterInfeasible,
    #[error("deterministic model is infeasible")]
    DeterministicInfeasible,
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Milp(#[from] MilpError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    A,
    G,
    Q,
    W,
}

/// One staged row. Indices in `x_terms` and `y_terms` refer to positions in
/// the first- and second-stage vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedRow {
    pub x_terms: Vec<(usize, f64)>,
    pub y_terms: Vec<(usize, f64)>,
    pub relation: Relation,
    /// Constant right-hand side; on W rows the uncertain supply is excluded.
    pub rhs: f64,
    /// Deterministic row this came from; `None` for rows made from variable bounds.
    pub origin: Option<usize>,
}

impl StagedRow {
    fn x_activity(&self, x: &[f64]) -> f64 {
        self.x_terms.iter().map(|&(i, a)| a * x[i]).sum()
    }
}

#[derive(Clone, Debug)]
pub struct StagedProblem {
    /// Deterministic indices of the first-stage variables.
    pub x_vars: Vec<usize>,
    /// Deterministic indices of the second-stage variables.
    pub y_vars: Vec<usize>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub x_bounds: Vec<(f64, f64)>,
    pub y_bounds: Vec<(f64, f64)>,
    /// Second-stage columns without a sign restriction in the dual.
    pub y_free: Vec<bool>,
    pub a: Vec<StagedRow>,
    pub g: Vec<StagedRow>,
    pub q: Vec<StagedRow>,
    pub w: Vec<StagedRow>,
    /// Per W row, the (set arc, period) cells of supply entering it.
    pub w_supply: Vec<Vec<(usize, usize)>>,
    /// Per W row, a bound on the magnitude of any optimal balance dual.
    pub w_dual_bound: Vec<f64>,
    /// W row fed by each (set arc, period) cell.
    pub cell_row: Vec<Vec<usize>>,
    /// Block and position of every deterministic row.
    pub row_block: Vec<(Block, usize)>,
    /// Supply arc ids in uncertainty-set order.
    pub set_arcs: Vec<String>,
    pub periods: usize,
    /// Second-stage positions of the elastic gasholder slacks.
    pub slack_cols: Vec<usize>,
    pub map: VariableMap,
    pub deterministic: MilpProblem,
}

/// Splits the compiled deterministic model into first- and second-stage
/// blocks and checks the split by re-solving three random (x, z) pairs both
/// ways.
pub fn stage(
    problem: &MilpProblem,
    map: &VariableMap,
    net: &EnergyNetwork,
    horizon: &HorizonData,
    set: &UncertaintySet,
) -> Result<StagedProblem, TsroError> {
    set.check_network(net, horizon.periods)?;
    let lp = &problem.base;
    let n = lp.n_vars;
    // position of every deterministic variable in x or y
    let mut pos = vec![(false, 0usize); n];
    let (mut x_vars, mut y_vars) = (Vec::new(), Vec::new());
    for (j, slot) in pos.iter_mut().enumerate() {
        if map.kind(j).is_first_stage() {
            *slot = (true, x_vars.len());
            x_vars.push(j);
        } else {
            *slot = (false, y_vars.len());
            y_vars.push(j);
        }
    }
    let set_arcs = set.arc_ids();
    let set_pos: BTreeMap<&str, usize> = set_arcs.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let mut staged = StagedProblem {
        c: x_vars.iter().map(|&j| lp.objective[j]).collect(),
        d: y_vars.iter().map(|&j| lp.objective[j]).collect(),
        x_bounds: x_vars.iter().map(|&j| lp.bounds[j]).collect(),
        y_bounds: y_vars.iter().map(|&j| lp.bounds[j]).collect(),
        y_free: vec![false; y_vars.len()],
        x_vars,
        y_vars,
        a: Vec::new(),
        g: Vec::new(),
        q: Vec::new(),
        w: Vec::new(),
        w_supply: Vec::new(),
        w_dual_bound: Vec::new(),
        cell_row: vec![vec![usize::MAX; horizon.periods]; set_arcs.len()],
        row_block: Vec::with_capacity(lp.constraints.len()),
        set_arcs: set_arcs.clone(),
        periods: horizon.periods,
        slack_cols: Vec::new(),
        map: map.clone(),
        deterministic: problem.clone(),
    };

    for (i, row) in lp.constraints.iter().enumerate() {
        let mut x_terms = Vec::new();
        let mut y_terms = Vec::new();
        for (j, &a) in row.coeffs.iter().enumerate() {
            if a != 0.0 {
                let (is_x, p) = pos[j];
                if is_x {
                    x_terms.push((p, a));
                } else {
                    y_terms.push((p, a));
                }
            }
        }
        let kind = map.rows[i];
        let mut srow = StagedRow {
            x_terms,
            y_terms,
            relation: row.relation,
            rhs: row.rhs,
            origin: Some(i),
        };
        let block = if let RowKind::MassBalance { unit, t } = kind {
            if !srow.x_terms.is_empty() {
                return Err(TsroError::MixedUncertainRow { row: i, kind });
            }
            let mut cells = Vec::new();
            for a in net.inbound(unit).into_iter().filter(|&a| net.is_supply_arc(a)) {
                let id = net.arcs[a].id.as_str();
                let s = set_pos[id];
                cells.push((s, t));
                srow.rhs -= horizon.nominal_supply[id][t];
                staged.cell_row[s][t] = staged.w.len();
            }
            staged.w_supply.push(cells);
            staged
                .w_dual_bound
                .push(balance_dual_bound(&staged, map, unit, t, &pos));
            Block::W
        } else if srow.y_terms.is_empty() {
            Block::A
        } else if srow.x_terms.is_empty() {
            Block::G
        } else {
            Block::Q
        };
        let list = match block {
            Block::A => &mut staged.a,
            Block::G => &mut staged.g,
            Block::Q => &mut staged.q,
            Block::W => &mut staged.w,
        };
        staged.row_block.push((block, list.len()));
        list.push(srow);
    }
    if staged.w.is_empty() {
        return Err(TsroError::NoUncertainRows);
    }
    for (s, periods) in staged.cell_row.iter().enumerate() {
        if let Some(t) = periods.iter().position(|&r| r == usize::MAX) {
            return Err(TsroError::UncoveredSupply {
                arc: set_arcs[s].clone(),
                period: t + 1,
            });
        }
    }

    // second-stage bounds become explicit rows so the dual sees them
    for p in 0..staged.y_vars.len() {
        let (lo, hi) = staged.y_bounds[p];
        if lo <= -UNBOUNDED || lo != 0.0 {
            staged.y_free[p] = true;
        }
        if lo > -UNBOUNDED && lo != 0.0 {
            staged.g.push(bound_row(p, Relation::Ge, lo));
        }
        if hi < UNBOUNDED {
            staged.g.push(bound_row(p, Relation::Le, hi));
        }
        if matches!(map.kind(staged.y_vars[p]), VarKind::LevelSlack { .. }) {
            staged.slack_cols.push(p);
        }
    }
    info!(
        "staged: {} first-stage and {} second-stage variables; rows A {} G {} Q {} W {}",
        staged.x_vars.len(),
        staged.y_vars.len(),
        staged.a.len(),
        staged.g.len(),
        staged.q.len(),
        staged.w.len()
    );
    staged.check_soundness(net, set)?;
    Ok(staged)
}

fn bound_row(p: usize, relation: Relation, rhs: f64) -> StagedRow {
    StagedRow {
        x_terms: Vec::new(),
        y_terms: vec![(p, 1.0)],
        relation,
        rhs,
        origin: None,
    }
}

/// One extra unit of gas at (k, t) raises every later level by one, which
/// costs at most one unit of deviation and one of slack per later period
/// plus one of slack for the ramp at t. The same holds for one unit less, so
/// any optimal balance dual lies within this bound.
fn balance_dual_bound(staged: &StagedProblem, map: &VariableMap, unit: usize, t: usize, pos: &[(bool, usize)]) -> f64 {
    let cost = |kind: VarKind| map.get(kind).map_or(0.0, |j| staged.d[pos[j].1].abs());
    let mut bound = cost(VarKind::LevelSlack { unit, t });
    for tp in t..map.periods {
        bound += cost(VarKind::Deviation { unit, t: tp }) + cost(VarKind::LevelSlack { unit, t: tp });
    }
    bound
}

/// Optimal recourse at a fixed first stage and supply path.
#[derive(Clone, Debug, PartialEq)]
pub struct Recourse {
    pub cost: f64,
    pub y: Vec<f64>,
    /// Sum of elastic gasholder slacks.
    pub slack: f64,
}

impl StagedProblem {
    pub fn n_x(&self) -> usize {
        self.x_vars.len()
    }

    pub fn n_y(&self) -> usize {
        self.y_vars.len()
    }

    pub fn first_stage_cost(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// First-stage part of a deterministic assignment.
    pub fn split_x(&self, full: &[f64]) -> Vec<f64> {
        self.x_vars.iter().map(|&j| full[j]).collect()
    }

    /// Deterministic-order vector from stage values.
    pub fn assemble(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.x_vars.len() + self.y_vars.len()];
        for (&j, &v) in self.x_vars.iter().zip(x) {
            out[j] = v;
        }
        for (&j, &v) in self.y_vars.iter().zip(y) {
            out[j] = v;
        }
        out
    }

    /// Checks `x` against its bounds, integrality and the A block.
    pub fn check_first_stage(&self, x: &[f64]) -> Result<(), TsroError> {
        if x.len() != self.n_x() {
            return Err(TsroError::FirstStageLength {
                got: x.len(),
                expected: self.n_x(),
            });
        }
        for (i, row) in self.a.iter().enumerate() {
            let act = row.x_activity(x);
            let viol = match row.relation {
                Relation::Le => act - row.rhs,
                Relation::Ge => row.rhs - act,
                Relation::Eq => (act - row.rhs).abs(),
            };
            if viol > 1e-6 {
                return Err(TsroError::FirstStageInfeasible {
                    row: row.origin.unwrap_or(i),
                    violation: viol,
                });
            }
        }
        Ok(())
    }

    fn check_set(&self, set: &UncertaintySet) -> Result<(), TsroError> {
        if set.periods != self.periods || set.arc_ids() != self.set_arcs {
            return Err(TsroError::SetMismatch(format!(
                "set covers {:?} over {} periods, staged problem {:?} over {}",
                set.arc_ids(),
                set.periods,
                self.set_arcs,
                self.periods
            )));
        }
        Ok(())
    }

    fn supply_into(&self, w_row: usize, z: &SupplyPath) -> Result<f64, TsroError> {
        let mut total = 0.0;
        for &(s, t) in &self.w_supply[w_row] {
            let arc = &self.set_arcs[s];
            let series = z
                .get(arc)
                .ok_or_else(|| TsroError::SetMismatch(format!("supply path lacks arc {arc}")))?;
            if series.len() != self.periods {
                return Err(TsroError::SetMismatch(format!(
                    "supply path for {arc} has {} periods, expected {}",
                    series.len(),
                    self.periods
                )));
            }
            total += series[t];
        }
        Ok(total)
    }

    /// Recourse LP over y at fixed `x` and supply `z`. Variable bounds stay
    /// native bounds here rather than rows.
    pub fn recourse_lp(&self, x: &[f64], z: &SupplyPath) -> Result<LpProblem, TsroError> {
        let mut lp = LpProblem::new(self.n_y());
        lp.objective.clone_from(&self.d);
        lp.bounds.clone_from(&self.y_bounds);
        for row in self.g.iter().filter(|r| r.origin.is_some()) {
            lp.add_sparse_constraint(&row.y_terms, row.relation, row.rhs);
        }
        for row in &self.q {
            lp.add_sparse_constraint(&row.y_terms, row.relation, row.rhs - row.x_activity(x));
        }
        for (i, row) in self.w.iter().enumerate() {
            lp.add_sparse_constraint(&row.y_terms, row.relation, row.rhs + self.supply_into(i, z)?);
        }
        Ok(lp)
    }

    /// Solves the recourse at fixed `x` and `z`.
    pub fn second_stage(&self, x: &[f64], z: &SupplyPath) -> Result<Recourse, TsroError> {
        let lp = self.recourse_lp(x, z)?;
        let out = solve_lp(&lp, LP_TOL)?;
        if out.status != LpStatus::Optimal {
            return Err(TsroError::Recourse { status: out.status });
        }
        let slack = self.slack_cols.iter().map(|&p| out.primal[p]).sum();
        Ok(Recourse {
            cost: out.objective_value,
            y: out.primal,
            slack,
        })
    }

    /// Deterministic LP with the first stage pinned and supply `z`.
    fn pinned_deterministic(&self, x: &[f64], z: &SupplyPath) -> Result<LpOutcome, TsroError> {
        let mut lp = self.deterministic.base.clone();
        for (&j, &v) in self.x_vars.iter().zip(x) {
            lp.bounds[j] = (v, v);
        }
        for (i, &(block, p)) in self.row_block.iter().enumerate() {
            if block == Block::W {
                lp.constraints[i].rhs = self.w[p].rhs + self.supply_into(p, z)?;
            }
        }
        Ok(solve_lp(&lp, LP_TOL)?)
    }

    /// Random commitment pattern with start-stop flags set to match it.
    fn random_first_stage(&self, net: &EnergyNetwork, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = vec![0.0; self.n_x()];
        let mut on = BTreeMap::new();
        for (p, &j) in self.x_vars.iter().enumerate() {
            if let VarKind::On { unit, t } = self.map.kind(j) {
                let v = f64::from(u8::from(rng.gen_bool(0.5)));
                x[p] = v;
                on.insert((unit, t), v);
            }
        }
        for (p, &j) in self.x_vars.iter().enumerate() {
            if let VarKind::StartStop { unit, t } = self.map.kind(j) {
                let prev = if t == 0 {
                    f64::from(u8::from(net.conversion(unit).initially_on))
                } else {
                    on[&(unit, t - 1)]
                };
                x[p] = (on[&(unit, t)] - prev).abs();
            }
        }
        x
    }

    fn check_soundness(&self, net: &EnergyNetwork, set: &UncertaintySet) -> Result<(), TsroError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let paths = sample(set, 0, SOUNDNESS_TRIALS);
        for (trial, z) in paths.iter().enumerate() {
            let x = self.random_first_stage(net, &mut rng);
            self.check_first_stage(&x)?;
            let det = self.pinned_deterministic(&x, z)?;
            let lp = self.recourse_lp(&x, z)?;
            let rec = solve_lp(&lp, LP_TOL)?;
            let agree = match (det.status, rec.status) {
                (LpStatus::Optimal, LpStatus::Optimal) => {
                    let staged = self.first_stage_cost(&x) + rec.objective_value;
                    (staged - det.objective_value).abs() <= SOUNDNESS_TOL * (1.0 + det.objective_value.abs())
                }
                (a, b) => a == b,
            };
            if !agree {
                return Err(TsroError::Soundness {
                    trial,
                    staged: format!("{:?} {}", rec.status, self.first_stage_cost(&x) + rec.objective_value),
                    deterministic: format!("{:?} {}", det.status, det.objective_value),
                });
            }
            debug!("soundness trial {trial}: {:?} {}", det.status, det.objective_value);
        }
        Ok(())
    }

    /// Solves the deterministic model and returns its optimal first stage
    /// together with the objective.
    pub fn deterministic_first_stage(&self) -> Result<(Vec<f64>, f64), TsroError> {
        let out = solve_milp(&self.deterministic, DEFAULT_REL_GAP, DEFAULT_NODE_LIMIT)?;
        if out.status != MilpStatus::Optimal {
            return Err(TsroError::DeterministicInfeasible);
        }
        Ok((self.split_x(&out.assignment), out.objective_value))
    }
}

/// Worst-case search at a fixed first stage, written as one maximization
/// over balance duals and binary deviation indicators. Stored as a
/// minimization of the negated objective.
#[derive(Clone, Debug)]
pub struct DualSubproblem {
    pub milp: MilpProblem,
    /// Big-M per W row.
    pub big_m: Vec<f64>,
    /// Multiplier applied to the base big-M bounds.
    pub scale: f64,
    pub x: Vec<f64>,
    n_mu: usize,
    n_cells: usize,
    periods: usize,
    /// Balance-dual column of each (arc, period) cell.
    cell_phi: Vec<usize>,
}

impl DualSubproblem {
    fn phi(&self, i: usize) -> usize {
        self.n_mu + i
    }

    fn phi_of_cell(&self, s: usize, t: usize) -> usize {
        self.cell_phi[s * self.periods + t]
    }

    fn cell(&self, s: usize, t: usize) -> usize {
        self.n_mu + self.big_m.len() + 4 * (s * self.periods + t)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }
}

/// Builds the dualized worst-case subproblem at first stage `x`.
pub fn build_subproblem(staged: &StagedProblem, x: &[f64], set: &UncertaintySet) -> Result<DualSubproblem, TsroError> {
    build_scaled(staged, x, set, 1.0)
}

pub fn build_scaled(
    staged: &StagedProblem,
    x: &[f64],
    set: &UncertaintySet,
    scale: f64,
) -> Result<DualSubproblem, TsroError> {
    staged.check_set(set)?;
    staged.check_first_stage(x)?;
    let n_mu = staged.g.len() + staged.q.len();
    let n_w = staged.w.len();
    let periods = staged.periods;
    let n_cells = set.arcs.len() * periods;
    let n = n_mu + n_w + 4 * n_cells;
    let big_m: Vec<f64> = staged
        .w_dual_bound
        .iter()
        .map(|&b| BIG_M_SAFETY * scale * b.max(1.0))
        .collect();
    let mut sub = DualSubproblem {
        milp: MilpProblem::new(LpProblem::new(n), Vec::new()),
        big_m,
        scale,
        x: x.to_vec(),
        n_mu,
        n_cells,
        periods,
        cell_phi: (0..n_cells)
            .map(|c| n_mu + staged.cell_row[c / periods][c % periods])
            .collect(),
    };
    let nominal = set.nominal();
    let mut lp = LpProblem::new(n);

    // row multipliers: sign follows the relation, value is the dual objective term
    let gq = staged.g.iter().chain(&staged.q);
    for (i, row) in gq.enumerate() {
        lp.bounds[i] = match row.relation {
            Relation::Ge => (0.0, UNBOUNDED),
            Relation::Le => (-UNBOUNDED, 0.0),
            Relation::Eq => (-UNBOUNDED, UNBOUNDED),
        };
        lp.objective[i] = -(row.rhs - row.x_activity(x));
    }
    for (i, row) in staged.w.iter().enumerate() {
        let j = sub.phi(i);
        lp.bounds[j] = (-UNBOUNDED, UNBOUNDED);
        let z0: f64 = staged.w_supply[i]
            .iter()
            .map(|&(s, t)| nominal[&staged.set_arcs[s]][t])
            .sum();
        lp.objective[j] = -(row.rhs + z0);
    }

    // one dual row per recourse column
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); staged.n_y()];
    let rows = staged.g.iter().chain(&staged.q).chain(&staged.w);
    for (i, row) in rows.enumerate() {
        for &(p, a) in &row.y_terms {
            cols[p].push((i, a));
        }
    }
    for (p, terms) in cols.iter().enumerate() {
        let rel = if staged.y_free[p] { Relation::Eq } else { Relation::Le };
        lp.add_sparse_constraint(terms, rel, staged.d[p]);
    }

    // pi = phi * xi linearized per cell; both pi are kept nonnegative since a
    // deviation that would lower the recourse cost is never worth choosing
    let mut binaries = Vec::with_capacity(2 * n_cells);
    for (s, arc) in set.arcs.iter().enumerate() {
        let mut budget_terms = Vec::with_capacity(2 * periods);
        for t in 0..periods {
            let w_row = staged.cell_row[s][t];
            let m = sub.big_m[w_row];
            let phi = sub.phi(w_row);
            let base = sub.cell(s, t);
            let (xu, xd, pu, pd) = (base, base + 1, base + 2, base + 3);
            lp.bounds[xu] = (0.0, 1.0);
            lp.bounds[xd] = (0.0, 1.0);
            lp.bounds[pu] = (0.0, m);
            lp.bounds[pd] = (0.0, m);
            binaries.push(xu);
            binaries.push(xd);
            lp.objective[pu] = -arc.up[t];
            lp.objective[pd] = -arc.down[t];
            lp.add_sparse_constraint(&[(pu, 1.0), (xu, -m)], Relation::Le, 0.0);
            lp.add_sparse_constraint(&[(pu, 1.0), (phi, -1.0), (xu, m)], Relation::Le, m);
            lp.add_sparse_constraint(&[(pd, 1.0), (xd, -m)], Relation::Le, 0.0);
            lp.add_sparse_constraint(&[(pd, 1.0), (phi, 1.0), (xd, m)], Relation::Le, m);
            lp.add_sparse_constraint(&[(xu, 1.0), (xd, 1.0)], Relation::Le, 1.0);
            budget_terms.push((xu, 1.0));
            budget_terms.push((xd, 1.0));
        }
        lp.add_sparse_constraint(&budget_terms, Relation::Le, arc.budget as f64);
    }
    sub.milp = MilpProblem::new(lp, binaries);
    Ok(sub)
}

/// Worst case found at one first-stage decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    /// Worst-case recourse cost.
    pub value: f64,
    pub indicators: ScenarioIndicators,
    pub supply: SupplyPath,
    /// Recourse cost re-solved at `supply`.
    pub primal: f64,
    /// Elastic slack used by that recourse.
    pub slack: f64,
    /// Big-M multiplier that passed the audit; `None` for the primal search.
    pub big_m_scale: Option<f64>,
    pub method: WorstCaseMethod,
}

struct RawWorst {
    value: f64,
    indicators: ScenarioIndicators,
}

fn solve_raw(sub: &DualSubproblem, set: &UncertaintySet) -> Result<RawWorst, TsroError> {
    let out = match solve_milp(&sub.milp, DEFAULT_REL_GAP, DEFAULT_NODE_LIMIT) {
        Ok(o) => o,
        Err(MilpError::Unbounded) => {
            return Err(TsroError::SubproblemUnbounded {
                scenario: "unbounded relaxation at the root".into(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    if out.status != MilpStatus::Optimal {
        return Err(TsroError::SubproblemInfeasible);
    }
    let v = &out.assignment;
    let mut ind = ScenarioIndicators::nominal(set);
    for s in 0..set.arcs.len() {
        for t in 0..sub.periods {
            let base = sub.cell(s, t);
            // drop deviations the dual does not profit from; they leave the value unchanged
            let phi = v[sub.phi_of_cell(s, t)];
            ind.up[s][t] = v[base] > 0.5 && phi > 0.0 && set.arcs[s].up[t] > 0.0;
            ind.down[s][t] = v[base + 1] > 0.5 && phi < 0.0 && set.arcs[s].down[t] > 0.0;
        }
    }
    Ok(RawWorst {
        value: -out.objective_value,
        indicators: ind,
    })
}

/// Solves the subproblem and audits the value against the recourse LP at
/// the realized worst supply. A failed audit grows every big-M tenfold and
/// retries.
pub fn solve_subproblem(
    staged: &StagedProblem,
    sub: &DualSubproblem,
    set: &UncertaintySet,
) -> Result<WorstCase, TsroError> {
    let mut current = sub.clone();
    let mut retries = 0;
    loop {
        let raw = solve_raw(&current, set)?;
        let supply = realize(set, &raw.indicators)?;
        let rec = staged.second_stage(&current.x, &supply)?;
        let tol = AUDIT_TOL * (1.0 + rec.cost.abs());
        if (rec.cost - raw.value).abs() <= tol {
            if rec.slack > SLACK_TOL {
                warn!("worst-case recourse uses {:.6} of elastic gasholder slack", rec.slack);
            }
            return Ok(WorstCase {
                value: raw.value,
                indicators: raw.indicators,
                supply,
                primal: rec.cost,
                slack: rec.slack,
                big_m_scale: Some(current.scale),
                method: WorstCaseMethod::Exact,
            });
        }
        if rec.cost < raw.value || retries == BIG_M_RETRIES {
            return Err(TsroError::DualityAudit {
                dual: raw.value,
                primal: rec.cost,
                retries,
            });
        }
        retries += 1;
        warn!(
            "duality audit gap {:.3e}; growing big-M to {}x",
            rec.cost - raw.value,
            current.scale * 10.0
        );
        current = build_scaled(staged, &current.x, set, current.scale * 10.0)?;
    }
}

/// How the worst case at a fixed first stage is found.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorstCaseMethod {
    /// Dual big-M MILP with the strong-duality audit. Exact, but its
    /// branch-and-bound grows quickly with the number of uncertain cells.
    Exact,
    /// Primal multi-start search ([`search_worst`]); attained, not certified.
    Search,
    /// `Exact` up to [`AUTO_EXACT_CELLS`] uncertain cells, `Search` beyond.
    #[default]
    Auto,
}

pub const AUTO_EXACT_CELLS: usize = 8;

impl WorstCaseMethod {
    pub fn resolve(self, set: &UncertaintySet) -> Self {
        match self {
            Self::Auto if set.arcs.len() * set.periods <= AUTO_EXACT_CELLS => Self::Exact,
            Self::Auto => Self::Search,
            m => m,
        }
    }
}

/// Worst case at `x` by the exact subproblem.
pub fn worst_case(staged: &StagedProblem, x: &[f64], set: &UncertaintySet) -> Result<WorstCase, TsroError> {
    let sub = build_subproblem(staged, x, set)?;
    solve_subproblem(staged, &sub, set)
}

/// Worst case at `x` by `method`. `seeds` only steer the primal search.
pub fn worst_case_with(
    staged: &StagedProblem,
    x: &[f64],
    set: &UncertaintySet,
    method: WorstCaseMethod,
    seeds: &[ScenarioIndicators],
) -> Result<WorstCase, TsroError> {
    match method.resolve(set) {
        WorstCaseMethod::Search => {
            let (value, indicators, evaluations) = search_worst(staged, x, set, seeds)?;
            debug!("worst-case search: {value:.6} after {evaluations} recourse solves");
            let supply = realize(set, &indicators)?;
            let rec = staged.second_stage(x, &supply)?;
            if rec.slack > SLACK_TOL {
                warn!("worst-case recourse uses {:.6} of elastic gasholder slack", rec.slack);
            }
            Ok(WorstCase {
                value,
                indicators,
                supply,
                primal: rec.cost,
                slack: rec.slack,
                big_m_scale: None,
                method: WorstCaseMethod::Search,
            })
        }
        _ => worst_case(staged, x, set),
    }
}

/// Recourse LP at a fixed first stage, kept warm across supply changes.
pub struct RecourseOracle<'a> {
    staged: &'a StagedProblem,
    x: Vec<f64>,
    solver: SimplexSolver,
    first_w: usize,
    phi: Vec<f64>,
    pub evaluations: usize,
}

impl<'a> RecourseOracle<'a> {
    pub fn new(staged: &'a StagedProblem, x: &[f64]) -> Result<Self, TsroError> {
        staged.check_first_stage(x)?;
        let z = staged
            .set_arcs
            .iter()
            .map(|a| (a.clone(), vec![0.0; staged.periods]))
            .collect();
        let lp = staged.recourse_lp(x, &z)?;
        let opts = LpOptions {
            feas_tol: LP_TOL,
            ..LpOptions::default()
        };
        let solver = SimplexSolver::new(&lp, opts)?;
        Ok(Self {
            staged,
            x: x.to_vec(),
            solver,
            first_w: lp.n_constraints() - staged.w.len(),
            phi: vec![0.0; staged.w.len()],
            evaluations: 0,
        })
    }

    /// Recourse cost at `z`. Falls back to a cold solve when the warm
    /// re-solve runs into numerical trouble.
    pub fn value(&mut self, z: &SupplyPath) -> Result<f64, TsroError> {
        self.evaluations += 1;
        for (i, row) in self.staged.w.iter().enumerate() {
            let rhs = row.rhs + self.staged.supply_into(i, z)?;
            self.solver.set_row_rhs(self.first_w + i, rhs);
        }
        let out = match self.solver.reoptimize() {
            Ok(o) => o,
            Err(e) => {
                debug!("warm recourse re-solve failed ({e}); solving cold");
                let lp = self.staged.recourse_lp(&self.x, z)?;
                self.solver = SimplexSolver::new(
                    &lp,
                    LpOptions {
                        feas_tol: LP_TOL,
                        ..LpOptions::default()
                    },
                )?;
                self.solver.solve()?
            }
        };
        if out.status != LpStatus::Optimal {
            return Err(TsroError::Recourse { status: out.status });
        }
        self.phi.copy_from_slice(&out.duals[self.first_w..]);
        Ok(out.objective_value)
    }

    /// Balance duals of the last evaluation: the cost change per unit of
    /// extra supply into each W row.
    pub fn balance_duals(&self) -> &[f64] {
        &self.phi
    }

    pub fn value_at(&mut self, set: &UncertaintySet, ind: &ScenarioIndicators) -> Result<f64, TsroError> {
        let z = realize(set, ind)?;
        self.value(&z)
    }
}

/// Single-cell changes for the local search.
#[derive(Clone, Copy, Debug)]
enum Move {
    Add { s: usize, t: usize, up: bool },
    Flip { s: usize, t: usize },
    Shift { s: usize, from: usize, to: usize, up: bool },
}

fn apply(ind: &mut ScenarioIndicators, mv: Move) {
    match mv {
        Move::Add { s, t, up } => {
            ind.up[s][t] = up;
            ind.down[s][t] = !up;
        }
        Move::Flip { s, t } => {
            ind.up[s][t] = !ind.up[s][t];
            ind.down[s][t] = !ind.down[s][t];
        }
        Move::Shift { s, from, to, up } => {
            ind.up[s][from] = false;
            ind.down[s][from] = false;
            ind.up[s][to] = up;
            ind.down[s][to] = !up;
        }
    }
}

fn deviates(set: &UncertaintySet, s: usize, t: usize, up: bool) -> bool {
    if up {
        set.arcs[s].up[t] > 0.0
    } else {
        set.arcs[s].down[t] > 0.0
    }
}

fn used(ind: &ScenarioIndicators, s: usize, t: usize) -> bool {
    ind.up[s][t] || ind.down[s][t]
}

/// Fills every arc's unused budget greedily. The recourse cost is convex in
/// the supply, so one of the two endpoints of a fresh cell never does worse
/// than leaving it idle and a full budget is always among the maximizers.
fn fill_budget(
    oracle: &mut RecourseOracle,
    set: &UncertaintySet,
    mut ind: ScenarioIndicators,
) -> Result<(f64, ScenarioIndicators), TsroError> {
    let mut value = oracle.value_at(set, &ind)?;
    loop {
        let mut best: Option<(f64, Move)> = None;
        for (s, arc) in set.arcs.iter().enumerate() {
            if ind.used(s) >= arc.budget.min(set.periods) {
                continue;
            }
            for t in 0..set.periods {
                if used(&ind, s, t) {
                    continue;
                }
                for up in [true, false] {
                    if !deviates(set, s, t, up) {
                        continue;
                    }
                    let mv = Move::Add { s, t, up };
                    let mut trial = ind.clone();
                    apply(&mut trial, mv);
                    let v = oracle.value_at(set, &trial)?;
                    if best.is_none_or(|(b, _)| v > b) {
                        best = Some((v, mv));
                    }
                }
            }
        }
        match best {
            Some((v, mv)) => {
                apply(&mut ind, mv);
                value = v;
            }
            None => return Ok((value, ind)),
        }
    }
}

/// Best-improvement search over direction flips and period shifts.
fn improve(
    oracle: &mut RecourseOracle,
    set: &UncertaintySet,
    mut value: f64,
    mut ind: ScenarioIndicators,
) -> Result<(f64, ScenarioIndicators), TsroError> {
    loop {
        let mut best: Option<(f64, Move)> = None;
        let mut consider = |oracle: &mut RecourseOracle, ind: &ScenarioIndicators, mv: Move| -> Result<(), TsroError> {
            let mut trial = ind.clone();
            apply(&mut trial, mv);
            let v = oracle.value_at(set, &trial)?;
            if v > value + SLACK_TOL * (1.0 + value.abs()) && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, mv));
            }
            Ok(())
        };
        for s in 0..set.arcs.len() {
            for from in 0..set.periods {
                if !used(&ind, s, from) {
                    continue;
                }
                if deviates(set, s, from, !ind.up[s][from]) {
                    consider(oracle, &ind, Move::Flip { s, t: from })?;
                }
                for to in 0..set.periods {
                    if used(&ind, s, to) {
                        continue;
                    }
                    for up in [true, false] {
                        if deviates(set, s, to, up) {
                            consider(oracle, &ind, Move::Shift { s, from, to, up })?;
                        }
                    }
                }
            }
        }
        match best {
            Some((v, mv)) => {
                apply(&mut ind, mv);
                value = v;
            }
            None => return Ok((value, ind)),
        }
    }
}

/// Vertex maximizing the first-order model of the recourse cost around the
/// last evaluated point: per arc, the cells with the largest gain under the
/// current balance duals.
fn best_response(oracle: &RecourseOracle, staged: &StagedProblem, set: &UncertaintySet) -> ScenarioIndicators {
    let phi = oracle.balance_duals();
    let mut ind = ScenarioIndicators::nominal(set);
    for (s, arc) in set.arcs.iter().enumerate() {
        let mut gains: Vec<(f64, usize, bool)> = (0..set.periods)
            .filter_map(|t| {
                let p = phi[staged.cell_row[s][t]];
                let up = p * arc.up[t];
                let down = -p * arc.down[t];
                if arc.up[t] <= 0.0 && arc.down[t] <= 0.0 {
                    None
                } else if (up >= down && arc.up[t] > 0.0) || arc.down[t] <= 0.0 {
                    Some((up, t, true))
                } else {
                    Some((down, t, false))
                }
            })
            .collect();
        gains.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, t, up) in gains.iter().take(arc.budget) {
            ind.up[s][t] = up;
            ind.down[s][t] = !up;
        }
    }
    ind
}

/// Successive linearization: move to the best response while it raises the
/// cost. Convexity makes each step at least as good as the model predicts.
fn ascend(
    oracle: &mut RecourseOracle,
    staged: &StagedProblem,
    set: &UncertaintySet,
    mut value: f64,
    mut ind: ScenarioIndicators,
) -> Result<(f64, ScenarioIndicators), TsroError> {
    // the oracle's duals must belong to `ind`
    oracle.value_at(set, &ind)?;
    loop {
        let next = best_response(oracle, staged, set);
        if next == ind {
            oracle.value_at(set, &ind)?;
            return Ok((value, ind));
        }
        let v = oracle.value_at(set, &next)?;
        if v <= value + SLACK_TOL * (1.0 + value.abs()) {
            oracle.value_at(set, &ind)?;
            return Ok((value, ind));
        }
        value = v;
        ind = next;
    }
}

/// Random full-budget vertex.
fn random_vertex(set: &UncertaintySet, rng: &mut ChaCha8Rng) -> ScenarioIndicators {
    let mut ind = ScenarioIndicators::nominal(set);
    for (s, arc) in set.arcs.iter().enumerate() {
        let mut periods: Vec<usize> = (0..set.periods).collect();
        for i in (1..periods.len()).rev() {
            periods.swap(i, rng.gen_range(0..=i));
        }
        let mut kept = 0;
        for t in periods {
            if kept == arc.budget {
                break;
            }
            let up = rng.gen_bool(0.5);
            let up = if deviates(set, s, t, up) { up } else { !up };
            if deviates(set, s, t, up) {
                ind.up[s][t] = up;
                ind.down[s][t] = !up;
                kept += 1;
            }
        }
    }
    ind
}

/// Starts tried by [`search_worst`] besides the caller's seeds.
pub const SEARCH_RANDOM_STARTS: usize = 8;

/// Primal worst-case search at a fixed first stage. Each start (nominal,
/// the seeds, all-up, all-down and a few random vertices) is filled to the
/// full budget and then alternates successive linearization with
/// best-improvement flips and shifts until neither helps. Every candidate
/// is valued by the recourse LP itself, so the result is an attained cost:
/// a lower bound on the true worst case rather than a certificate.
pub fn search_worst(
    staged: &StagedProblem,
    x: &[f64],
    set: &UncertaintySet,
    seeds: &[ScenarioIndicators],
) -> Result<(f64, ScenarioIndicators, usize), TsroError> {
    let mut oracle = RecourseOracle::new(staged, x)?;
    let mut starts = vec![ScenarioIndicators::nominal(set)];
    for seed in seeds {
        let mut ind = seed.clone();
        // drop cells beyond the budget, keeping the earliest ones
        for (s, arc) in set.arcs.iter().enumerate() {
            let mut kept = 0;
            for t in 0..set.periods {
                if used(&ind, s, t) {
                    if kept < arc.budget && deviates(set, s, t, ind.up[s][t]) {
                        kept += 1;
                    } else {
                        ind.up[s][t] = false;
                        ind.down[s][t] = false;
                    }
                }
            }
        }
        starts.push(ind);
    }
    for up in [true, false] {
        let mut ind = ScenarioIndicators::nominal(set);
        for (s, arc) in set.arcs.iter().enumerate() {
            for t in (0..set.periods).filter(|&t| deviates(set, s, t, up)).take(arc.budget) {
                ind.up[s][t] = up;
                ind.down[s][t] = !up;
            }
        }
        starts.push(ind);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..SEARCH_RANDOM_STARTS {
        starts.push(random_vertex(set, &mut rng));
    }
    let mut seen = Vec::new();
    let mut best: Option<(f64, ScenarioIndicators)> = None;
    for start in starts {
        if seen.contains(&start) {
            continue;
        }
        seen.push(start.clone());
        let (mut v, mut ind) = fill_budget(&mut oracle, set, start)?;
        loop {
            let (v1, ind1) = ascend(&mut oracle, staged, set, v, ind)?;
            let (v2, ind2) = improve(&mut oracle, set, v1, ind1)?;
            let done = v2 <= v1 + SLACK_TOL * (1.0 + v1.abs());
            v = v2;
            ind = ind2;
            if done {
                break;
            }
        }
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, ind));
        }
    }
    let (v, ind) = best.expect("at least the nominal start");
    Ok((v, ind, oracle.evaluations))
}

/// Scenario-expanded master: first stage, epigraph variable and one recourse
/// copy per scenario.
#[derive(Clone, Debug)]
pub struct MasterProblem {
    pub milp: MilpProblem,
    pub scenarios: Vec<SupplyPath>,
    pub beta: usize,
    /// First column of each scenario's recourse block.
    pub y_offsets: Vec<usize>,
}

pub fn build_master(staged: &StagedProblem, scenarios: &[SupplyPath]) -> Result<MasterProblem, TsroError> {
    if scenarios.is_empty() {
        return Err(TsroError::NoScenarios);
    }
    let mut unique: Vec<SupplyPath> = Vec::with_capacity(scenarios.len());
    for z in scenarios {
        if unique.contains(z) {
            warn!("duplicate scenario dropped from the master");
        } else {
            unique.push(z.clone());
        }
    }
    let nx = staged.n_x();
    let ny = staged.n_y();
    let beta = nx;
    let n = nx + 1 + unique.len() * ny;
    let mut lp = LpProblem::new(n);
    lp.objective[..nx].copy_from_slice(&staged.c);
    lp.objective[beta] = 1.0;
    lp.bounds[..nx].copy_from_slice(&staged.x_bounds);
    lp.bounds[beta] = (-UNBOUNDED, UNBOUNDED);
    for row in &staged.a {
        lp.add_sparse_constraint(&row.x_terms, row.relation, row.rhs);
    }
    let mut y_offsets = Vec::with_capacity(unique.len());
    for z in &unique {
        let off = nx + 1 + y_offsets.len() * ny;
        y_offsets.push(off);
        lp.bounds[off..off + ny].copy_from_slice(&staged.y_bounds);
        let shift = |terms: &[(usize, f64)]| terms.iter().map(|&(p, a)| (off + p, a)).collect::<Vec<_>>();
        for row in staged.g.iter().filter(|r| r.origin.is_some()) {
            lp.add_sparse_constraint(&shift(&row.y_terms), row.relation, row.rhs);
        }
        for row in &staged.q {
            let mut terms = shift(&row.y_terms);
            terms.extend_from_slice(&row.x_terms);
            lp.add_sparse_constraint(&terms, row.relation, row.rhs);
        }
        for (i, row) in staged.w.iter().enumerate() {
            lp.add_sparse_constraint(&shift(&row.y_terms), row.relation, row.rhs + staged.supply_into(i, z)?);
        }
        // beta >= d^T y
        let mut terms: Vec<(usize, f64)> = staged
            .d
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(p, &c)| (off + p, -c))
            .collect();
        terms.push((beta, 1.0));
        lp.add_sparse_constraint(&terms, Relation::Ge, 0.0);
    }
    let mut binaries: Vec<usize> = staged
        .x_vars
        .iter()
        .enumerate()
        .filter(|(_, j)| staged.deterministic.binary_vars.contains(j))
        .map(|(p, _)| p)
        .collect();
    binaries.sort_unstable();
    Ok(MasterProblem {
        milp: MilpProblem::new(lp, binaries),
        scenarios: unique,
        beta,
        y_offsets,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MasterSolution {
    pub x: Vec<f64>,
    pub beta: f64,
    pub objective: f64,
    /// Proven lower bound on the master optimum.
    pub bound: f64,
    pub nodes: usize,
}

pub fn solve_master(master: &MasterProblem, nx: usize) -> Result<MasterSolution, TsroError> {
    let out = solve_milp(&master.milp, DEFAULT_REL_GAP, DEFAULT_NODE_LIMIT)?;
    if out.status != MilpStatus::Optimal {
        return Err(TsroError::MasterInfeasible);
    }
    Ok(MasterSolution {
        x: out.assignment[..nx].to_vec(),
        beta: out.assignment[master.beta],
        objective: out.objective_value,
        bound: out.bound.min(out.objective_value),
        nodes: out.node_count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcgOptions {
    /// Relative gap: stop once `UB - LB <= tolerance * (1 + |UB|)`.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub method: WorstCaseMethod,
}

impl Default for CcgOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_CCG_TOL,
            max_iterations: DEFAULT_CCG_ITERATIONS,
            method: WorstCaseMethod::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcgIteration {
    pub iteration: usize,
    pub lower_bound: f64,
    pub upper_bound: f64,
    /// Worst-case recourse cost at this iteration's decision.
    pub worst_value: f64,
    pub subproblem_seconds: f64,
    pub master_seconds: f64,
}

/// Worst scenario recorded at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub iteration: usize,
    pub value: f64,
    pub indicators: ScenarioIndicators,
    pub supply: SupplyPath,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcgState {
    pub iteration: usize,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub scenarios: Vec<SupplyPath>,
    /// Decision attaining the upper bound.
    pub incumbent: Vec<f64>,
    /// Worst case at the incumbent.
    pub incumbent_worst: Option<WorstCase>,
    pub trace: Vec<CcgIteration>,
    pub worst: Vec<ScenarioRecord>,
    pub options: CcgOptions,
    pub converged: bool,
    /// Deterministic optimum used to start the loop.
    pub deterministic_objective: f64,
    /// Worst-case method actually used. Bounds are certified only for `Exact`.
    pub method: WorstCaseMethod,
}

impl CcgState {
    pub fn gap(&self) -> f64 {
        self.upper_bound - self.lower_bound
    }

    fn closed(&self) -> bool {
        self.gap() <= self.options.tolerance * (1.0 + self.upper_bound.abs())
    }

    /// Trace CSV: `iteration,lower_bound,upper_bound,subproblem_seconds,master_seconds`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<(), TsroError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iteration",
            "lower_bound",
            "upper_bound",
            "subproblem_seconds",
            "master_seconds",
        ])?;
        for it in &self.trace {
            w.write_record([
                it.iteration.to_string(),
                format_value(it.lower_bound),
                format_value(it.upper_bound),
                format!("{:.6}", it.subproblem_seconds),
                format!("{:.6}", it.master_seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn worst_json(&self) -> String {
        serde_json::to_string_pretty(&self.worst).expect("scenario records serialize")
    }
}

/// Column-and-constraint generation starting from the deterministic optimum.
pub fn ccg_solve(staged: &StagedProblem, set: &UncertaintySet, options: CcgOptions) -> Result<CcgState, TsroError> {
    ccg_solve_seeded(staged, set, options, &[])
}

/// [`ccg_solve`] with starting points for the worst-case search. Seeds must
/// lie in `set`. Sweeps over nested sets pass the previous run's worst cases,
/// so the worst case found at a fixed decision never drops as the set grows.
/// Seeds stay out of the master: each scenario adds a full copy of the
/// recourse rows.
pub fn ccg_solve_seeded(
    staged: &StagedProblem,
    set: &UncertaintySet,
    options: CcgOptions,
    seeds: &[ScenarioIndicators],
) -> Result<CcgState, TsroError> {
    staged.check_set(set)?;
    for seed in seeds {
        for (s, arc) in set.arcs.iter().enumerate() {
            if seed.used(s) > arc.budget {
                return Err(TsroError::SetMismatch(format!(
                    "seed scenario uses {} periods of arc {} with budget {}",
                    seed.used(s),
                    arc.arc,
                    arc.budget
                )));
            }
        }
    }
    let (mut x, det_obj) = staged.deterministic_first_stage()?;
    let mut state = CcgState {
        iteration: 0,
        lower_bound: f64::NEG_INFINITY,
        upper_bound: f64::INFINITY,
        scenarios: Vec::new(),
        incumbent: x.clone(),
        incumbent_worst: None,
        trace: Vec::new(),
        worst: Vec::new(),
        options,
        converged: false,
        deterministic_objective: det_obj,
        method: options.method.resolve(set),
    };
    let mut pool: Vec<ScenarioIndicators> = seeds.to_vec();
    while state.iteration < options.max_iterations {
        state.iteration += 1;
        let i = state.iteration;
        let clock = Instant::now();
        let worst = worst_case_with(staged, &x, set, state.method, &pool)?;
        if !pool.contains(&worst.indicators) {
            pool.push(worst.indicators.clone());
        }
        let sub_time = clock.elapsed().as_secs_f64();
        let total = staged.first_stage_cost(&x) + worst.value;
        if total < state.upper_bound {
            state.upper_bound = total;
            state.incumbent.clone_from(&x);
            state.incumbent_worst = Some(worst.clone());
        }
        state.worst.push(ScenarioRecord {
            iteration: i,
            value: worst.value,
            indicators: worst.indicators.clone(),
            supply: worst.supply.clone(),
        });
        if !state.scenarios.contains(&worst.supply) {
            state.scenarios.push(worst.supply);
        }

        let clock = Instant::now();
        let master = build_master(staged, &state.scenarios)?;
        let sol = solve_master(&master, staged.n_x())?;
        let master_time = clock.elapsed().as_secs_f64();
        state.lower_bound = state.lower_bound.max(sol.bound);
        x = sol.x;
        info!(
            "ccg iteration {i}: LB {:.6} UB {:.6} ({} scenarios, {} master nodes)",
            state.lower_bound,
            state.upper_bound,
            state.scenarios.len(),
            sol.nodes
        );
        state.trace.push(CcgIteration {
            iteration: i,
            lower_bound: state.lower_bound,
            upper_bound: state.upper_bound,
            worst_value: worst.value,
            subproblem_seconds: sub_time,
            master_seconds: master_time,
        });
        if state.closed() {
            state.converged = true;
            break;
        }
    }
    if !state.converged {
        warn!(
            "ccg stopped after {} iterations with gap {:.6}",
            state.iteration,
            state.gap()
        );
    }
    Ok(state)
}

/// Recourse cost of a fixed first stage over a set of supply paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub first_stage_cost: f64,
    /// Second-stage cost per trajectory.
    pub costs: Vec<f64>,
    /// Elastic slack per trajectory.
    pub slacks: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    /// Trajectories whose recourse needed elastic slack.
    pub slack_violations: usize,
}

pub fn evaluate_policy(
    staged: &StagedProblem,
    x: &[f64],
    trajectories: &[SupplyPath],
) -> Result<PolicyReport, TsroError> {
    staged.check_first_stage(x)?;
    let mut costs = Vec::with_capacity(trajectories.len());
    let mut slacks = Vec::with_capacity(trajectories.len());
    for z in trajectories {
        let rec = staged.second_stage(x, z)?;
        costs.push(rec.cost);
        slacks.push(rec.slack);
    }
    let n = costs.len();
    let mean = if n == 0 {
        0.0
    } else {
        costs.iter().sum::<f64>() / n as f64
    };
    let max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PolicyReport {
        first_stage_cost: staged.first_stage_cost(x),
        slack_violations: slacks.iter().filter(|&&s| s > SLACK_TOL).count(),
        costs,
        slacks,
        mean,
        max,
    })
}
