//! Branch-and-bound for linear programs with binary variables.
//!
//! Node selection dives depth-first until the first incumbent, then switches
//! to best-bound. Branching picks the most fractional binary (lowest index on
//! ties). Relaxations are re-solved with the dual simplex from the parent's
//! basis.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

use log::debug;
use thiserror::Error;

use crate::lp::{solve_lp, Basis, LpError, LpOptions, LpProblem, LpStatus, SimplexSolver};

pub const DEFAULT_REL_GAP: f64 = 1e-6;
pub const DEFAULT_NODE_LIMIT: usize = 200_000;
/// Distance from {0, 1} under which a relaxation value counts as integral.
pub const INTEGRALITY_TOL: f64 = 1e-6;
/// Largest binary count accepted by [`enumerate_oracle`].
pub const ORACLE_MAX_BINARIES: usize = 20;

#[derive(Debug, Error)]
pub enum MilpError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("LP relaxation is unbounded")]
    Unbounded,
    #[error("node limit {limit} reached without an incumbent")]
    NoIncumbent { limit: usize },
    #[error("node limit {limit} reached; best incumbent {:.6} (gap {:.2e})", .incumbent.objective_value, .incumbent.gap)]
    NodeLimit { limit: usize, incumbent: Box<MilpOutcome> },
    #[error("enumeration refused: {count} binaries exceeds {max}")]
    TooManyBinaries { count: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilpProblem {
    pub base: LpProblem,
    pub binary_vars: Vec<usize>,
}

impl MilpProblem {
    pub fn new(base: LpProblem, binary_vars: Vec<usize>) -> Self {
        Self { base, binary_vars }
    }

    pub fn validate(&self) -> Result<(), MilpError> {
        self.base.validate()?;
        let mut seen = vec![false; self.base.n_vars];
        for &j in &self.binary_vars {
            if j >= self.base.n_vars {
                return Err(MilpError::Invalid(format!("binary index {j} out of range")));
            }
            if seen[j] {
                return Err(MilpError::Invalid(format!("binary index {j} listed twice")));
            }
            seen[j] = true;
            let (l, u) = self.base.bounds[j];
            if l < 0.0 || u > 1.0 {
                return Err(MilpError::Invalid(format!(
                    "binary variable {j} has bounds [{l}, {u}] outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MilpStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilpOutcome {
    pub status: MilpStatus,
    /// Variable values; binaries are exactly 0.0 or 1.0.
    pub assignment: Vec<f64>,
    pub objective_value: f64,
    /// Best proven lower bound.
    pub bound: f64,
    pub node_count: usize,
    /// `(objective - bound) / max(1, |objective|)`.
    pub gap: f64,
}

impl MilpOutcome {
    fn infeasible(node_count: usize) -> Self {
        Self {
            status: MilpStatus::Infeasible,
            assignment: Vec::new(),
            objective_value: f64::INFINITY,
            bound: f64::INFINITY,
            node_count,
            gap: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MilpOptions {
    pub rel_gap: f64,
    pub node_limit: usize,
    pub lp: LpOptions,
    /// Keep a per-node log in the returned report.
    pub record_log: bool,
}

impl Default for MilpOptions {
    fn default() -> Self {
        Self {
            rel_gap: DEFAULT_REL_GAP,
            node_limit: DEFAULT_NODE_LIMIT,
            lp: LpOptions::default(),
            record_log: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeDecision {
    Branched {
        var: usize,
    },
    /// Integral relaxation; `improved` when it replaced the incumbent.
    Integral {
        objective: f64,
        improved: bool,
    },
    PrunedByBound,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeLogEntry {
    pub id: usize,
    pub depth: usize,
    /// Relaxation objective (parent bound when pruned before solving).
    pub bound: f64,
    pub fixings: Vec<(usize, bool)>,
    pub decision: NodeDecision,
}

#[derive(Clone, Debug)]
pub struct MilpReport {
    pub outcome: MilpOutcome,
    pub log: Vec<NodeLogEntry>,
}

/// Solves `problem` to within `rel_gap` of the binary optimum.
pub fn solve_milp(problem: &MilpProblem, rel_gap: f64, node_limit: usize) -> Result<MilpOutcome, MilpError> {
    let opts = MilpOptions {
        rel_gap,
        node_limit,
        ..MilpOptions::default()
    };
    solve_milp_with(problem, &opts).map(|r| r.outcome)
}

struct Node {
    id: usize,
    depth: usize,
    bound: f64,
    fixings: Vec<(usize, bool)>,
    warm: Option<(usize, Rc<Basis>)>,
}

struct HeapNode(Node);

impl PartialEq for HeapNode {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapNode {}
impl PartialOrd for HeapNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapNode {
    // max-heap: smallest bound first, then oldest node
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .bound
            .total_cmp(&self.0.bound)
            .then_with(|| other.0.id.cmp(&self.0.id))
    }
}

enum OpenList {
    Dive(Vec<Node>),
    Best(BinaryHeap<HeapNode>),
}

impl OpenList {
    fn push(&mut self, node: Node) {
        match self {
            OpenList::Dive(v) => v.push(node),
            OpenList::Best(h) => h.push(HeapNode(node)),
        }
    }

    fn pop(&mut self) -> Option<Node> {
        match self {
            OpenList::Dive(v) => v.pop(),
            OpenList::Best(h) => h.pop().map(|n| n.0),
        }
    }

    fn switch_to_best_bound(&mut self) {
        if let OpenList::Dive(v) = self {
            *self = OpenList::Best(v.drain(..).map(HeapNode).collect());
        }
    }

    fn min_bound(&self) -> f64 {
        match self {
            OpenList::Dive(v) => v.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min),
            OpenList::Best(h) => h.peek().map_or(f64::INFINITY, |n| n.0.bound),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            OpenList::Dive(v) => v.is_empty(),
            OpenList::Best(h) => h.is_empty(),
        }
    }
}

pub fn solve_milp_with(problem: &MilpProblem, opts: &MilpOptions) -> Result<MilpReport, MilpError> {
    problem.validate()?;
    let base = &problem.base;
    let mut solver = SimplexSolver::new(base, opts.lp)?;
    let original: Vec<(f64, f64)> = problem.binary_vars.iter().map(|&j| base.bounds[j]).collect();
    let mut log = Vec::new();
    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    let mut open = OpenList::Dive(vec![Node {
        id: 0,
        depth: 0,
        bound: f64::NEG_INFINITY,
        fixings: Vec::new(),
        warm: None,
    }]);
    let mut next_id = 1;
    let mut nodes = 0usize;
    // id of the node whose optimal basis the solver currently holds
    let mut loaded: Option<usize> = None;
    let mut first = true;
    // nodes discarded within the gap tolerance still bound the optimum
    let mut pruned_bound = f64::INFINITY;

    let record = |log: &mut Vec<NodeLogEntry>, entry: NodeLogEntry| {
        debug!(
            "node {} depth {} bound {:.6} {:?}",
            entry.id, entry.depth, entry.bound, entry.decision
        );
        if opts.record_log {
            log.push(entry);
        }
    };

    while let Some(node) = open.pop() {
        let cutoff = incumbent.as_ref().map(|(v, _)| v - opts.rel_gap * v.abs().max(1.0));
        if let Some(c) = cutoff {
            if node.bound >= c {
                pruned_bound = pruned_bound.min(node.bound);
                record(
                    &mut log,
                    NodeLogEntry {
                        id: node.id,
                        depth: node.depth,
                        bound: node.bound,
                        fixings: node.fixings.clone(),
                        decision: NodeDecision::PrunedByBound,
                    },
                );
                continue;
            }
        }
        if nodes >= opts.node_limit {
            open.push(node);
            return match incumbent {
                Some((obj, x)) => {
                    let bound = open.min_bound().min(obj).min(pruned_bound);
                    Err(MilpError::NodeLimit {
                        limit: opts.node_limit,
                        incumbent: Box::new(MilpOutcome {
                            status: MilpStatus::Optimal,
                            assignment: x,
                            objective_value: obj,
                            bound,
                            node_count: nodes,
                            gap: (obj - bound) / obj.abs().max(1.0),
                        }),
                    })
                }
                None => Err(MilpError::NoIncumbent { limit: opts.node_limit }),
            };
        }
        nodes += 1;

        for (t, &j) in problem.binary_vars.iter().enumerate() {
            let (l, u) = original[t];
            solver.set_var_bounds(j, l, u);
        }
        for &(j, one) in &node.fixings {
            let v = if one { 1.0 } else { 0.0 };
            solver.set_var_bounds(j, v, v);
        }
        let relax = if first {
            first = false;
            solver.solve()?
        } else {
            if let Some((from, basis)) = &node.warm {
                if loaded != Some(*from) {
                    solver.load_basis(basis)?;
                }
            }
            solver.reoptimize()?
        };
        loaded = Some(node.id);

        match relax.status {
            LpStatus::Unbounded => return Err(MilpError::Unbounded),
            LpStatus::Infeasible => {
                record(
                    &mut log,
                    NodeLogEntry {
                        id: node.id,
                        depth: node.depth,
                        bound: node.bound,
                        fixings: node.fixings,
                        decision: NodeDecision::Infeasible,
                    },
                );
                continue;
            }
            LpStatus::Optimal => {}
        }
        let bound = relax.objective_value.max(node.bound);
        if let Some(c) = cutoff {
            if bound >= c {
                pruned_bound = pruned_bound.min(bound);
                record(
                    &mut log,
                    NodeLogEntry {
                        id: node.id,
                        depth: node.depth,
                        bound,
                        fixings: node.fixings,
                        decision: NodeDecision::PrunedByBound,
                    },
                );
                continue;
            }
        }

        let branch_var = problem
            .binary_vars
            .iter()
            .map(|&j| (j, relax.primal[j]))
            .filter(|&(_, v)| v > INTEGRALITY_TOL && v < 1.0 - INTEGRALITY_TOL)
            .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()).then(a.0.cmp(&b.0)));

        match branch_var {
            None => {
                let polished = polish(&mut solver, problem, &relax.primal)?;
                loaded = None;
                let (objective, improved) = match polished {
                    Some((obj, x)) => {
                        let better = incumbent.as_ref().is_none_or(|(v, _)| obj < *v);
                        if better {
                            incumbent = Some((obj, x));
                            open.switch_to_best_bound();
                        }
                        (obj, better)
                    }
                    None => (bound, false),
                };
                record(
                    &mut log,
                    NodeLogEntry {
                        id: node.id,
                        depth: node.depth,
                        bound,
                        fixings: node.fixings,
                        decision: NodeDecision::Integral { objective, improved },
                    },
                );
            }
            Some((var, value)) => {
                let basis = Rc::new(solver.basis());
                record(
                    &mut log,
                    NodeLogEntry {
                        id: node.id,
                        depth: node.depth,
                        bound,
                        fixings: node.fixings.clone(),
                        decision: NodeDecision::Branched { var },
                    },
                );
                // the child nearer to the relaxation value is explored first
                let up_first = value >= 0.5;
                for one in [!up_first, up_first] {
                    let mut fixings = node.fixings.clone();
                    fixings.push((var, one));
                    open.push(Node {
                        id: next_id,
                        depth: node.depth + 1,
                        bound,
                        fixings,
                        warm: Some((node.id, Rc::clone(&basis))),
                    });
                    next_id += 1;
                }
            }
        }
    }

    let outcome = match incumbent {
        Some((obj, x)) => {
            let bound = obj.min(pruned_bound);
            MilpOutcome {
                status: MilpStatus::Optimal,
                assignment: x,
                objective_value: obj,
                bound,
                node_count: nodes,
                gap: (obj - bound) / obj.abs().max(1.0),
            }
        }
        None => MilpOutcome::infeasible(nodes),
    };
    debug_assert!(open.is_empty());
    Ok(MilpReport { outcome, log })
}

/// Fixes binaries at their rounded values and re-solves the continuous part.
fn polish(
    solver: &mut SimplexSolver,
    problem: &MilpProblem,
    relax: &[f64],
) -> Result<Option<(f64, Vec<f64>)>, MilpError> {
    for &j in &problem.binary_vars {
        let v = relax[j].round();
        solver.set_var_bounds(j, v, v);
    }
    let out = solver.reoptimize()?;
    if out.status != LpStatus::Optimal {
        return Ok(None);
    }
    let mut x = out.primal;
    for &j in &problem.binary_vars {
        x[j] = x[j].round();
    }
    Ok(Some((problem.base.objective_value(&x), x)))
}

/// Exhaustive reference solver: one LP per binary assignment. Test use only.
pub fn enumerate_oracle(problem: &MilpProblem) -> Result<MilpOutcome, MilpError> {
    problem.validate()?;
    let k = problem.binary_vars.len();
    if k > ORACLE_MAX_BINARIES {
        return Err(MilpError::TooManyBinaries {
            count: k,
            max: ORACLE_MAX_BINARIES,
        });
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut count = 0;
    for mask in 0u64..(1u64 << k) {
        let mut lp = problem.base.clone();
        let mut skip = false;
        for (t, &j) in problem.binary_vars.iter().enumerate() {
            let v = if mask & (1 << t) != 0 { 1.0 } else { 0.0 };
            let (l, u) = lp.bounds[j];
            if v < l || v > u {
                skip = true;
                break;
            }
            lp.bounds[j] = (v, v);
        }
        if skip {
            continue;
        }
        count += 1;
        let out = solve_lp(&lp, crate::lp::DEFAULT_FEAS_TOL)?;
        match out.status {
            LpStatus::Unbounded => return Err(MilpError::Unbounded),
            LpStatus::Infeasible => {}
            LpStatus::Optimal => {
                if best.as_ref().is_none_or(|(v, _)| out.objective_value < *v) {
                    best = Some((out.objective_value, out.primal));
                }
            }
        }
    }
    Ok(match best {
        Some((obj, x)) => MilpOutcome {
            status: MilpStatus::Optimal,
            assignment: x,
            objective_value: obj,
            bound: obj,
            node_count: count,
            gap: 0.0,
        },
        None => MilpOutcome::infeasible(count),
    })
}
