//! Dense LP kernel: bounded-variable revised simplex with primal and dual
//! iterations, dual values, and warm starts for branch-and-bound.
//!
//! Problems are stated as
//!
//! ```text
//! minimize    c^T x
//! subject to  a_i^T x  {<=, >=, =}  b_i     i = 1..m
//!             l_j <= x_j <= u_j             j = 1..n
//! ```
//!
//! where bounds may be infinite ([`UNBOUNDED`]). Internally every row gets a
//! logical variable `r_i = a_i^T x` whose bounds encode the relation, so all
//! three relations share one pivoting code path.

use std::fmt::Write as _;

use log::{debug, trace};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Marker for an infinite variable bound. Never replaced by a big finite value.
pub const UNBOUNDED: f64 = f64::INFINITY;

/// Default magnitude below which a pivot element is rejected.
pub const DEFAULT_PIVOT_TOL: f64 = 1e-7;
/// Default tolerance for reporting primal feasibility and optimality.
pub const DEFAULT_FEAS_TOL: f64 = 1e-6;

const INNER_PRIMAL_TOL: f64 = 1e-9;
const INNER_DUAL_TOL: f64 = 1e-9;
const DEGENERATE_STEP: f64 = 1e-12;
/// Pivots since the last refactorization below which a finished solve skips it.
const LIGHT_UPDATE_PIVOTS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("constraint {row} has {got} coefficients, expected {expected}")]
    RowLength { row: usize, got: usize, expected: usize },
    #[error("objective has {got} coefficients, expected {expected}")]
    ObjectiveLength { got: usize, expected: usize },
    #[error("bounds vector has {got} entries, expected {expected}")]
    BoundsLength { got: usize, expected: usize },
    #[error("variable {var} has lower bound {lower} above upper bound {upper}")]
    BoundOrder { var: usize, lower: f64, upper: f64 },
    #[error("non-finite data in {0}")]
    NonFinite(String),
    #[error("simplex exceeded {0} iterations (cycling guard)")]
    IterationLimit(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
}

impl Relation {
    fn symbol(self) -> &'static str {
        match self {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(a, v)| a * v).sum()
    }

    /// Amount by which `x` violates this row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let act = self.activity(x);
        match self.relation {
            Relation::Le => (act - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - act).max(0.0),
            Relation::Eq => (act - self.rhs).abs(),
        }
    }
}

/// A linear program in minimization form with dense rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    /// Per-variable `(lower, upper)`; use [`UNBOUNDED`] (with sign) for no bound.
    pub bounds: Vec<(f64, f64)>,
}

impl LpProblem {
    /// Empty problem with zero objective and `x >= 0` bounds.
    pub fn new(n_vars: usize) -> Self {
        Self {
            n_vars,
            objective: vec![0.0; n_vars],
            constraints: Vec::new(),
            bounds: vec![(0.0, UNBOUNDED); n_vars],
        }
    }

    pub fn add_constraint(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    /// Adds a row given as `(variable, coefficient)` pairs; repeated indices accumulate.
    pub fn add_sparse_constraint(&mut self, terms: &[(usize, f64)], relation: Relation, rhs: f64) {
        let mut coeffs = vec![0.0; self.n_vars];
        for &(j, v) in terms {
            coeffs[j] += v;
        }
        self.add_constraint(coeffs, relation, rhs);
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn validate(&self) -> Result<(), LpError> {
        if self.objective.len() != self.n_vars {
            return Err(LpError::ObjectiveLength {
                got: self.objective.len(),
                expected: self.n_vars,
            });
        }
        if self.bounds.len() != self.n_vars {
            return Err(LpError::BoundsLength {
                got: self.bounds.len(),
                expected: self.n_vars,
            });
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::NonFinite("objective".into()));
        }
        for (row, c) in self.constraints.iter().enumerate() {
            if c.coeffs.len() != self.n_vars {
                return Err(LpError::RowLength {
                    row,
                    got: c.coeffs.len(),
                    expected: self.n_vars,
                });
            }
            if !c.rhs.is_finite() || c.coeffs.iter().any(|a| !a.is_finite()) {
                return Err(LpError::NonFinite(format!("constraint {row}")));
            }
        }
        for (var, &(lower, upper)) in self.bounds.iter().enumerate() {
            if lower.is_nan() || upper.is_nan() || lower > upper || lower == UNBOUNDED || upper == -UNBOUNDED {
                return Err(LpError::BoundOrder { var, lower, upper });
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Infinity-norm of constraint and bound violations at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let rows = self.constraints.iter().map(|c| c.violation(x)).fold(0.0, f64::max);
        let bounds = self
            .bounds
            .iter()
            .zip(x)
            .map(|(&(l, u), &v)| (l - v).max(v - u).max(0.0))
            .fold(0.0, f64::max);
        rows.max(bounds)
    }

    /// Plain-text fixed-point dump, one constraint per line, for diffing.
    pub fn dump_text(&self) -> String {
        fn num(v: f64) -> String {
            if v == UNBOUNDED {
                "+inf".to_string()
            } else if v == -UNBOUNDED {
                "-inf".to_string()
            } else {
                format!("{v:.6}")
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "vars {} rows {}", self.n_vars, self.constraints.len());
        let obj: Vec<String> = self.objective.iter().map(|&v| num(v)).collect();
        let _ = writeln!(out, "min {}", obj.join(" "));
        for (i, c) in self.constraints.iter().enumerate() {
            let row: Vec<String> = c.coeffs.iter().map(|&v| num(v)).collect();
            let _ = writeln!(out, "r{i} {} {} {}", row.join(" "), c.relation.symbol(), num(c.rhs));
        }
        for (j, &(l, u)) in self.bounds.iter().enumerate() {
            let _ = writeln!(out, "x{j} [{}, {}]", num(l), num(u));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    /// One multiplier per constraint: `>=` rows nonnegative, `<=` rows
    /// nonpositive, `=` rows free.
    pub duals: Vec<f64>,
    /// `c - A^T y` per structural variable.
    pub reduced_costs: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    /// Unbounded: a primal ray. Infeasible: Farkas row multipliers from phase one.
    pub certificate: Option<Vec<f64>>,
}

impl LpOutcome {
    /// Dual objective `b^T y + sum_j d_j * bound_j`, computed from multipliers only.
    pub fn dual_objective(&self, problem: &LpProblem) -> f64 {
        let rows: f64 = problem
            .constraints
            .iter()
            .zip(&self.duals)
            .map(|(c, y)| c.rhs * y)
            .sum();
        let bounds: f64 = problem
            .bounds
            .iter()
            .zip(&self.reduced_costs)
            .map(|(&(l, u), &d)| {
                if d > 0.0 {
                    d * l
                } else if d < 0.0 {
                    d * u
                } else {
                    0.0
                }
            })
            .sum();
        rows + bounds
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LpOptions {
    pub pivot_tol: f64,
    pub feas_tol: f64,
    /// 0 selects an automatic limit proportional to problem size.
    pub max_iterations: usize,
    /// Consecutive degenerate pivots tolerated before switching to Bland's rule.
    pub degenerate_limit: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self {
            pivot_tol: DEFAULT_PIVOT_TOL,
            feas_tol: DEFAULT_FEAS_TOL,
            max_iterations: 0,
            degenerate_limit: 50,
        }
    }
}

/// Solves `problem` from scratch. `tol` is the feasibility reporting tolerance.
pub fn solve_lp(problem: &LpProblem, tol: f64) -> Result<LpOutcome, LpError> {
    let opts = LpOptions {
        feas_tol: tol,
        ..LpOptions::default()
    };
    SimplexSolver::new(problem, opts)?.solve()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum VarState {
    Basic,
    Lower,
    Upper,
    /// Nonbasic free variable resting at zero.
    Zero,
}

/// Snapshot of a simplex basis, used to warm-start related problems.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Basis {
    basic: Vec<usize>,
    states: Vec<VarState>,
}

enum Pricing {
    Entering { col: usize, dir: f64 },
    Optimal,
}

enum PrimalEnd {
    Optimal,
    Infeasible,
    Unbounded(Vec<f64>),
}

/// Simplex engine holding a factorized basis; supports bound changes and
/// dual-simplex reoptimization.
pub struct SimplexSolver {
    m: usize,
    n: usize,
    opts: LpOptions,
    cols: Vec<Vec<(usize, f64)>>,
    cost: Vec<f64>,
    lo: Vec<f64>,
    up: Vec<f64>,
    x: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<VarState>,
    binv: Vec<f64>,
    pivots_since_refactor: usize,
    refactor_every: usize,
    cost_scale: f64,
    iterations: usize,
    farkas: Option<Vec<f64>>,
    // duals for `cb_cur` under the current inverse, kept across pivots
    y: Vec<f64>,
    cb_cur: Vec<f64>,
    y_valid: bool,
}

impl SimplexSolver {
    pub fn new(problem: &LpProblem, opts: LpOptions) -> Result<Self, LpError> {
        problem.validate()?;
        let m = problem.constraints.len();
        let n = problem.n_vars;
        let mut cols = vec![Vec::new(); n];
        for (i, c) in problem.constraints.iter().enumerate() {
            for (j, &a) in c.coeffs.iter().enumerate() {
                if a != 0.0 {
                    cols[j].push((i, a));
                }
            }
        }
        let mut cost = problem.objective.clone();
        cost.resize(n + m, 0.0);
        let mut lo: Vec<f64> = problem.bounds.iter().map(|b| b.0).collect();
        let mut up: Vec<f64> = problem.bounds.iter().map(|b| b.1).collect();
        for c in &problem.constraints {
            let (l, u) = match c.relation {
                Relation::Le => (-UNBOUNDED, c.rhs),
                Relation::Ge => (c.rhs, UNBOUNDED),
                Relation::Eq => (c.rhs, c.rhs),
            };
            lo.push(l);
            up.push(u);
        }
        let cost_scale = problem.objective.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
        let mut solver = Self {
            m,
            n,
            opts,
            cols,
            cost,
            lo,
            up,
            x: vec![0.0; n + m],
            basis: (n..n + m).collect(),
            state: vec![VarState::Lower; n + m],
            binv: vec![0.0; m * m],
            pivots_since_refactor: 0,
            refactor_every: 100.max(m),
            cost_scale,
            iterations: 0,
            farkas: None,
            y: vec![0.0; m],
            cb_cur: vec![0.0; m],
            y_valid: false,
        };
        for j in 0..n {
            solver.state[j] = solver.resting_state(j);
            solver.x[j] = solver.resting_value(j);
        }
        for i in 0..m {
            solver.state[n + i] = VarState::Basic;
            // logical columns are -e_i, so B = -I
            solver.binv[i * m + i] = -1.0;
        }
        solver.recompute_basics();
        Ok(solver)
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.m
    }

    pub fn var_bounds(&self, j: usize) -> (f64, f64) {
        (self.lo[j], self.up[j])
    }

    /// Changes a structural variable's bounds; call [`Self::reoptimize`] afterwards.
    pub fn set_var_bounds(&mut self, j: usize, lower: f64, upper: f64) {
        assert!(j < self.n, "structural index out of range");
        self.lo[j] = lower;
        self.up[j] = upper;
        if self.state[j] != VarState::Basic {
            self.state[j] = match self.state[j] {
                VarState::Upper if upper.is_finite() => VarState::Upper,
                _ => self.resting_state(j),
            };
            self.x[j] = self.nonbasic_value(j);
        }
    }

    /// Moves a constraint's right-hand side, keeping its relation.
    pub fn set_row_rhs(&mut self, i: usize, rhs: f64) {
        assert!(i < self.m, "row index out of range");
        let j = self.n + i;
        let (lo, up) = (self.lo[j], self.up[j]);
        if lo == up {
            self.lo[j] = rhs;
            self.up[j] = rhs;
        } else if lo == -UNBOUNDED {
            self.up[j] = rhs;
        } else {
            self.lo[j] = rhs;
        }
        if self.state[j] != VarState::Basic {
            self.x[j] = self.nonbasic_value(j);
        }
    }

    pub fn basis(&self) -> Basis {
        Basis {
            basic: self.basis.clone(),
            states: self.state.clone(),
        }
    }

    /// Installs a basis from a related problem with the same dimensions.
    pub fn load_basis(&mut self, basis: &Basis) -> Result<(), LpError> {
        if basis.basic.len() != self.m || basis.states.len() != self.n + self.m {
            return Err(LpError::Numerical("basis dimension mismatch".into()));
        }
        let saved = (self.basis.clone(), self.state.clone());
        self.basis = basis.basic.clone();
        self.state = basis.states.clone();
        for j in 0..self.n + self.m {
            if self.state[j] != VarState::Basic {
                if (self.state[j] == VarState::Upper && !self.up[j].is_finite())
                    || (self.state[j] == VarState::Lower && !self.lo[j].is_finite())
                {
                    self.state[j] = self.resting_state(j);
                }
                self.x[j] = self.nonbasic_value(j);
            }
        }
        if self.refactor().is_err() {
            self.basis = saved.0;
            self.state = saved.1;
            self.refactor()?;
        }
        self.recompute_basics();
        Ok(())
    }

    /// Primal simplex (phase one then two) from the current basis.
    pub fn solve(&mut self) -> Result<LpOutcome, LpError> {
        self.iterations = 0;
        self.run_primal_to_end()
    }

    /// Dual simplex from the current basis, falling back to primal simplex when
    /// the basis is not dual feasible.
    pub fn reoptimize(&mut self) -> Result<LpOutcome, LpError> {
        self.iterations = 0;
        self.recompute_basics();
        if !self.make_dual_feasible() {
            return self.run_primal_to_end();
        }
        match self.dual_loop()? {
            Some(false) => {
                // dual ray found: primal infeasible; let phase one confirm it
                // and produce the Farkas multipliers.
                self.run_primal_to_end()
            }
            Some(true) => self.run_primal_to_end(),
            None => self.run_primal_to_end(),
        }
    }

    fn run_primal_to_end(&mut self) -> Result<LpOutcome, LpError> {
        for attempt in 0..4 {
            let end = self.primal_loop()?;
            // a lightly updated inverse is trusted on the first pass; the
            // status checks below send anything doubtful round again
            if attempt > 0 || self.pivots_since_refactor >= LIGHT_UPDATE_PIVOTS {
                self.refactor()?;
            }
            self.recompute_basics();
            match end {
                PrimalEnd::Optimal => {
                    if self.max_basic_infeasibility() <= self.opts.feas_tol.min(1e-7) {
                        return Ok(self.outcome(LpStatus::Optimal, None));
                    }
                }
                PrimalEnd::Infeasible => {
                    if self.max_basic_infeasibility() > self.opts.feas_tol {
                        let cert = self.farkas.take();
                        return Ok(self.outcome(LpStatus::Infeasible, cert));
                    }
                }
                PrimalEnd::Unbounded(ray) => {
                    return Ok(self.outcome(LpStatus::Unbounded, Some(ray)));
                }
            }
        }
        Err(LpError::Numerical(
            "simplex failed to settle after refactorization".into(),
        ))
    }

    fn iteration_cap(&self) -> usize {
        if self.opts.max_iterations > 0 {
            self.opts.max_iterations
        } else {
            50 * (self.m + self.n) + 5_000
        }
    }

    fn resting_state(&self, j: usize) -> VarState {
        if self.lo[j].is_finite() {
            VarState::Lower
        } else if self.up[j].is_finite() {
            VarState::Upper
        } else {
            VarState::Zero
        }
    }

    fn resting_value(&self, j: usize) -> f64 {
        self.nonbasic_value_for(j, self.resting_state(j))
    }

    fn nonbasic_value(&self, j: usize) -> f64 {
        self.nonbasic_value_for(j, self.state[j])
    }

    fn nonbasic_value_for(&self, j: usize, s: VarState) -> f64 {
        match s {
            VarState::Lower => self.lo[j],
            VarState::Upper => self.up[j],
            VarState::Zero | VarState::Basic => 0.0,
        }
    }

    fn column(&self, j: usize) -> ColIter<'_> {
        if j < self.n {
            ColIter::Struct(self.cols[j].iter())
        } else {
            ColIter::Logical(Some(j - self.n))
        }
    }

    fn primal_tol(&self, bound: f64) -> f64 {
        INNER_PRIMAL_TOL * (1.0 + bound.abs())
    }

    fn infeasibility_of(&self, j: usize) -> f64 {
        let v = self.x[j];
        if v < self.lo[j] - self.primal_tol(self.lo[j]) {
            self.lo[j] - v
        } else if v > self.up[j] + self.primal_tol(self.up[j]) {
            v - self.up[j]
        } else {
            0.0
        }
    }

    fn max_basic_infeasibility(&self) -> f64 {
        self.basis.iter().map(|&j| self.infeasibility_of(j)).fold(0.0, f64::max)
    }

    /// alpha = B^{-1} a_j
    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut alpha = vec![0.0; m];
        for (i, a) in self.column(j) {
            for (k, out) in alpha.iter_mut().enumerate() {
                let b = self.binv[k * m + i];
                if b != 0.0 {
                    *out += b * a;
                }
            }
        }
        alpha
    }

    /// y^T = c_B^T B^{-1}
    fn btran(&self, cb: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (k, &c) in cb.iter().enumerate() {
            if c != 0.0 {
                let row = &self.binv[k * m..(k + 1) * m];
                for (yi, &b) in y.iter_mut().zip(row) {
                    *yi += c * b;
                }
            }
        }
        y
    }

    fn dot_col(&self, y: &[f64], j: usize) -> f64 {
        self.column(j).map(|(i, a)| y[i] * a).sum()
    }

    fn recompute_basics(&mut self) {
        let m = self.m;
        let mut rhs = vec![0.0; m];
        for j in 0..self.n + m {
            if self.state[j] != VarState::Basic {
                let v = self.x[j];
                if v != 0.0 {
                    for (i, a) in self.column(j) {
                        rhs[i] -= a * v;
                    }
                }
            }
        }
        for k in 0..m {
            let row = &self.binv[k * m..(k + 1) * m];
            let v: f64 = row.iter().zip(&rhs).map(|(b, r)| b * r).sum();
            self.x[self.basis[k]] = v;
        }
    }

    /// Reinverts the basis. A singular basis is repaired first by swapping
    /// its dependent columns for row logicals.
    fn refactor(&mut self) -> Result<(), LpError> {
        if self.invert().is_ok() {
            return Ok(());
        }
        let swapped = self.repair_basis();
        debug!("singular basis: swapped {swapped} columns for logicals");
        self.invert()?;
        self.recompute_basics();
        Ok(())
    }

    /// Gaussian elimination over the basis columns; each column without a
    /// usable pivot leaves the basis in favour of the logical of a row no
    /// column claimed. Returns the number of swaps.
    fn repair_basis(&mut self) -> usize {
        let m = self.m;
        let mut a = vec![0.0; m * m];
        for (k, &j) in self.basis.iter().enumerate() {
            for (i, v) in self.column(j) {
                a[i * m + k] = v;
            }
        }
        let mut row_used = vec![false; m];
        let mut deficient = Vec::new();
        for k in 0..m {
            let pick = (0..m).filter(|&r| !row_used[r]).map(|r| (r, a[r * m + k].abs())).fold(
                None,
                |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                },
            );
            match pick {
                Some((r, v)) if v > 1e-9 => {
                    row_used[r] = true;
                    let p = a[r * m + k];
                    for r2 in 0..m {
                        if row_used[r2] {
                            continue;
                        }
                        let f = a[r2 * m + k] / p;
                        if f != 0.0 {
                            for c in k..m {
                                a[r2 * m + c] -= f * a[r * m + c];
                            }
                        }
                    }
                }
                _ => deficient.push(k),
            }
        }
        let free: Vec<usize> = (0..m)
            .filter(|&r| !row_used[r] && self.state[self.n + r] != VarState::Basic)
            .collect();
        let mut free_rows = free.into_iter();
        let mut swapped = 0;
        for k in deficient {
            let Some(r) = free_rows.next() else { break };
            let old = self.basis[k];
            self.basis[k] = self.n + r;
            self.state[self.n + r] = VarState::Basic;
            self.state[old] = self.resting_state(old);
            self.x[old] = self.nonbasic_value(old);
            swapped += 1;
        }
        swapped
    }

    /// Gauss-Jordan inversion of the basis matrix with partial pivoting.
    fn invert(&mut self) -> Result<(), LpError> {
        let m = self.m;
        let mut a = vec![0.0; m * m];
        for (k, &j) in self.basis.iter().enumerate() {
            for (i, v) in self.column(j) {
                a[i * m + k] = v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for col in 0..m {
            let (piv_row, piv_abs) = (col..m)
                .map(|r| (r, a[r * m + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if piv_abs < 1e-12 {
                return Err(LpError::Numerical("singular basis".into()));
            }
            if piv_row != col {
                for c in 0..m {
                    a.swap(piv_row * m + c, col * m + c);
                    inv.swap(piv_row * m + c, col * m + c);
                }
            }
            let p = a[col * m + col];
            let a_nz: Vec<usize> = (0..m).filter(|&c| a[col * m + c] != 0.0).collect();
            let i_nz: Vec<usize> = (0..m).filter(|&c| inv[col * m + c] != 0.0).collect();
            for &c in &a_nz {
                a[col * m + c] /= p;
            }
            for &c in &i_nz {
                inv[col * m + c] /= p;
            }
            for r in 0..m {
                if r == col {
                    continue;
                }
                let f = a[r * m + col];
                if f == 0.0 {
                    continue;
                }
                for &c in &a_nz {
                    a[r * m + c] -= f * a[col * m + c];
                }
                for &c in &i_nz {
                    inv[r * m + c] -= f * inv[col * m + c];
                }
            }
        }
        // rows of `inv` now index constraint rows; basis position k is column k of B,
        // so B^{-1} row k is row k of inv.
        self.binv = inv;
        self.pivots_since_refactor = 0;
        self.y_valid = false;
        Ok(())
    }

    /// Replaces basis position `r` by column `q`. `d_q` is the entering
    /// reduced cost under `cb_cur` and `cq` its cost in the same phase.
    #[allow(clippy::too_many_arguments)]
    fn pivot(
        &mut self,
        r: usize,
        q: usize,
        alpha: &[f64],
        leaving_state: VarState,
        leaving_value: f64,
        d_q: f64,
        cq: f64,
    ) -> Result<(), LpError> {
        let m = self.m;
        let p = alpha[r];
        let row_nz: Vec<usize> = (0..m).filter(|&c| self.binv[r * m + c] != 0.0).collect();
        for &c in &row_nz {
            self.binv[r * m + c] /= p;
        }
        if self.y_valid {
            for &c in &row_nz {
                self.y[c] += d_q * self.binv[r * m + c];
            }
            self.cb_cur[r] = cq;
        }
        for (i, &ai) in alpha.iter().enumerate() {
            if i == r || ai == 0.0 {
                continue;
            }
            for &c in &row_nz {
                let v = self.binv[r * m + c];
                self.binv[i * m + c] -= ai * v;
            }
        }
        let leaving = self.basis[r];
        self.basis[r] = q;
        self.state[q] = VarState::Basic;
        self.state[leaving] = leaving_state;
        self.x[leaving] = leaving_value;
        self.pivots_since_refactor += 1;
        if self.pivots_since_refactor >= self.refactor_every {
            self.refactor()?;
            self.recompute_basics();
        }
        Ok(())
    }

    /// Phase-one or phase-two basic costs depending on current feasibility.
    fn basic_costs(&self) -> (Vec<f64>, bool) {
        let mut phase_one = false;
        let mut cb = vec![0.0; self.m];
        for (k, &j) in self.basis.iter().enumerate() {
            let v = self.x[j];
            if v < self.lo[j] - self.primal_tol(self.lo[j]) {
                cb[k] = -1.0;
                phase_one = true;
            } else if v > self.up[j] + self.primal_tol(self.up[j]) {
                cb[k] = 1.0;
                phase_one = true;
            }
        }
        if !phase_one {
            for (k, &j) in self.basis.iter().enumerate() {
                cb[k] = self.cost[j];
            }
        }
        (cb, phase_one)
    }

    /// Brings `self.y` in line with basic costs `cb`, correcting only the
    /// positions that changed since the last sync.
    fn sync_duals(&mut self, cb: &[f64]) {
        let m = self.m;
        if self.y_valid {
            let changed: Vec<usize> = (0..m).filter(|&k| cb[k] != self.cb_cur[k]).collect();
            if changed.len() * 4 < m {
                for k in changed {
                    let delta = cb[k] - self.cb_cur[k];
                    let row = &self.binv[k * m..(k + 1) * m];
                    for (yi, &b) in self.y.iter_mut().zip(row) {
                        if b != 0.0 {
                            *yi += delta * b;
                        }
                    }
                    self.cb_cur[k] = cb[k];
                }
                return;
            }
        }
        self.y = self.btran(cb);
        self.cb_cur.copy_from_slice(cb);
        self.y_valid = true;
    }

    fn reduced_cost(&self, y: &[f64], j: usize, phase_one: bool) -> f64 {
        let c = if phase_one { 0.0 } else { self.cost[j] };
        c - self.dot_col(y, j)
    }

    fn price(&self, y: &[f64], phase_one: bool, bland: bool) -> Pricing {
        let tol = if phase_one {
            INNER_DUAL_TOL
        } else {
            INNER_DUAL_TOL * self.cost_scale
        };
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..self.n + self.m {
            let dir = match self.state[j] {
                VarState::Basic => continue,
                _ if self.lo[j] == self.up[j] => continue,
                VarState::Lower => {
                    let d = self.reduced_cost(y, j, phase_one);
                    if d < -tol {
                        (1.0, -d)
                    } else {
                        continue;
                    }
                }
                VarState::Upper => {
                    let d = self.reduced_cost(y, j, phase_one);
                    if d > tol {
                        (-1.0, d)
                    } else {
                        continue;
                    }
                }
                VarState::Zero => {
                    let d = self.reduced_cost(y, j, phase_one);
                    if d < -tol {
                        (1.0, -d)
                    } else if d > tol {
                        (-1.0, d)
                    } else {
                        continue;
                    }
                }
            };
            if bland {
                return Pricing::Entering { col: j, dir: dir.0 };
            }
            if best.is_none_or(|b| dir.1 > b.2) {
                best = Some((j, dir.0, dir.1));
            }
        }
        match best {
            Some((col, dir, _)) => Pricing::Entering { col, dir },
            None => Pricing::Optimal,
        }
    }

    fn primal_loop(&mut self) -> Result<PrimalEnd, LpError> {
        let cap = self.iteration_cap();
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= cap {
                return Err(LpError::IterationLimit(cap));
            }
            let (cb, phase_one) = self.basic_costs();
            self.sync_duals(&cb);
            let bland = degenerate_run > self.opts.degenerate_limit;
            let (q, dir) = match self.price(&self.y, phase_one, bland) {
                Pricing::Optimal => {
                    if phase_one {
                        self.farkas = Some(self.btran(&cb));
                        return Ok(PrimalEnd::Infeasible);
                    }
                    return Ok(PrimalEnd::Optimal);
                }
                Pricing::Entering { col, dir } => (col, dir),
            };
            let d_q = self.reduced_cost(&self.y, q, phase_one);
            let c_q = if phase_one { 0.0 } else { self.cost[q] };
            self.iterations += 1;
            let alpha = self.ftran(q);
            // basic k moves at rate -dir * alpha_k per unit step of the entering variable
            let mut best: Option<(usize, f64, f64)> = None;
            for (k, &a) in alpha.iter().enumerate() {
                if a.abs() <= self.opts.pivot_tol {
                    continue;
                }
                let j = self.basis[k];
                let rate = -dir * a;
                let v = self.x[j];
                let (lo, up) = (self.lo[j], self.up[j]);
                let (lt, ut) = (self.primal_tol(lo), self.primal_tol(up));
                let target = if rate < 0.0 {
                    if v > up + ut {
                        up
                    } else if v >= lo - lt && lo.is_finite() {
                        lo
                    } else {
                        continue;
                    }
                } else if v < lo - lt {
                    lo
                } else if v <= up + ut && up.is_finite() {
                    up
                } else {
                    continue;
                };
                let step = ((target - v) / rate).max(0.0);
                let better = match best {
                    None => true,
                    Some((bk, _, bs)) => {
                        step < bs - 1e-12
                            || (step <= bs + 1e-12
                                && if bland {
                                    j < self.basis[bk]
                                } else {
                                    a.abs() > alpha[bk].abs()
                                })
                    }
                };
                if better {
                    best = Some((k, target, step));
                }
            }
            let flip = self.up[q] - self.lo[q];
            let (theta, leave) = match best {
                Some((k, t, s)) if s <= flip => (s, Some((k, t))),
                _ if flip.is_finite() => (flip, None),
                _ => {
                    if phase_one {
                        return Err(LpError::Numerical("unbounded phase-one step".into()));
                    }
                    let mut ray = vec![0.0; self.n];
                    if q < self.n {
                        ray[q] = dir;
                    }
                    for (k, &a) in alpha.iter().enumerate() {
                        let j = self.basis[k];
                        if j < self.n {
                            ray[j] = -dir * a;
                        }
                    }
                    return Ok(PrimalEnd::Unbounded(ray));
                }
            };
            if theta <= DEGENERATE_STEP {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.x[q] += dir * theta;
            for (k, &a) in alpha.iter().enumerate() {
                if a != 0.0 {
                    let j = self.basis[k];
                    self.x[j] -= dir * a * theta;
                }
            }
            match leave {
                Some((k, target)) => {
                    let j = self.basis[k];
                    let st = if target == self.lo[j] {
                        VarState::Lower
                    } else {
                        VarState::Upper
                    };
                    self.pivot(k, q, &alpha, st, target, d_q, c_q)?;
                }
                None => {
                    // bound flip
                    self.state[q] = if dir > 0.0 { VarState::Upper } else { VarState::Lower };
                    self.x[q] = self.nonbasic_value(q);
                }
            }
            trace!("primal iter {} enter {} theta {:.3e}", self.iterations, q, theta);
        }
    }

    /// Flips boxed nonbasics with wrong-signed reduced costs; false if some
    /// unboxed nonbasic remains dual infeasible.
    fn make_dual_feasible(&mut self) -> bool {
        let cb: Vec<f64> = self.basis.iter().map(|&j| self.cost[j]).collect();
        let y = self.btran(&cb);
        let tol = 1e-7 * self.cost_scale;
        let mut changed = false;
        for j in 0..self.n + self.m {
            if self.state[j] == VarState::Basic || self.lo[j] == self.up[j] {
                continue;
            }
            let d = self.reduced_cost(&y, j, false);
            let ok = match self.state[j] {
                VarState::Lower => d >= -tol,
                VarState::Upper => d <= tol,
                VarState::Zero => d.abs() <= tol,
                VarState::Basic => true,
            };
            if ok {
                continue;
            }
            if self.lo[j].is_finite() && self.up[j].is_finite() {
                self.state[j] = if d < 0.0 { VarState::Upper } else { VarState::Lower };
                self.x[j] = self.nonbasic_value(j);
                changed = true;
            } else {
                return false;
            }
        }
        if changed {
            self.recompute_basics();
        }
        true
    }

    /// Returns Some(true) at optimality, Some(false) when primal infeasibility
    /// is detected, None when the dual iterations stalled.
    fn dual_loop(&mut self) -> Result<Option<bool>, LpError> {
        let cap = self.iteration_cap();
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= cap {
                return Ok(None);
            }
            let bland = degenerate_run > self.opts.degenerate_limit;
            // leaving row: largest bound violation (Bland: lowest column index)
            let mut leave: Option<(usize, f64)> = None;
            for (k, &j) in self.basis.iter().enumerate() {
                let inf = self.infeasibility_of(j);
                if inf <= 0.0 {
                    continue;
                }
                let better = match leave {
                    None => true,
                    Some((lk, linf)) => {
                        if bland {
                            j < self.basis[lk]
                        } else {
                            inf > linf
                        }
                    }
                };
                if better {
                    leave = Some((k, inf));
                }
            }
            let Some((r, _)) = leave else {
                return Ok(Some(true));
            };
            self.iterations += 1;
            let jr = self.basis[r];
            let below = self.x[jr] < self.lo[jr];
            let target = if below { self.lo[jr] } else { self.up[jr] };
            let cb: Vec<f64> = self.basis.iter().map(|&j| self.cost[j]).collect();
            self.sync_duals(&cb);
            let y = &self.y;
            let rho: Vec<f64> = self.binv[r * self.m..(r + 1) * self.m].to_vec();
            let mut enter: Option<(usize, f64, f64)> = None;
            for j in 0..self.n + self.m {
                if self.state[j] == VarState::Basic || self.lo[j] == self.up[j] {
                    continue;
                }
                let arj = self.dot_col(&rho, j);
                if arj.abs() <= self.opts.pivot_tol {
                    continue;
                }
                // x_r changes by -arj * dx_j; need it to increase when below
                let want_dx_sign = if below { -arj.signum() } else { arj.signum() };
                let eligible = match self.state[j] {
                    VarState::Lower => want_dx_sign > 0.0,
                    VarState::Upper => want_dx_sign < 0.0,
                    VarState::Zero => true,
                    VarState::Basic => false,
                };
                if !eligible {
                    continue;
                }
                let d = self.reduced_cost(y, j, false);
                let ratio = d.abs() / arj.abs();
                let ratio = if (want_dx_sign > 0.0 && d < 0.0) || (want_dx_sign < 0.0 && d > 0.0) {
                    0.0
                } else {
                    ratio
                };
                let better = match enter {
                    None => true,
                    Some((ej, er, ea)) => {
                        if ratio < er - 1e-12 {
                            true
                        } else if ratio <= er + 1e-12 {
                            if bland {
                                j < ej
                            } else {
                                arj.abs() > ea.abs()
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    enter = Some((j, ratio, arj));
                }
            }
            let Some((q, ratio, arq)) = enter else {
                return Ok(Some(false));
            };
            if ratio <= DEGENERATE_STEP {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            let d_q = self.reduced_cost(&self.y, q, false);
            let alpha = self.ftran(q);
            if (alpha[r] - arq).abs() > 1e-6 * (1.0 + arq.abs()) {
                self.refactor()?;
                self.recompute_basics();
                continue;
            }
            let dx = (self.x[jr] - target) / alpha[r];
            self.x[q] += dx;
            for (k, &a) in alpha.iter().enumerate() {
                if a != 0.0 {
                    let j = self.basis[k];
                    self.x[j] -= a * dx;
                }
            }
            let st = if below { VarState::Lower } else { VarState::Upper };
            self.pivot(r, q, &alpha, st, target, d_q, self.cost[q])?;
            trace!("dual iter {} leave {} enter {}", self.iterations, jr, q);
        }
    }

    fn outcome(&self, status: LpStatus, certificate: Option<Vec<f64>>) -> LpOutcome {
        let primal: Vec<f64> = self.x[..self.n].to_vec();
        let cb: Vec<f64> = self.basis.iter().map(|&j| self.cost[j]).collect();
        let y = self.btran(&cb);
        let reduced_costs: Vec<f64> = (0..self.n).map(|j| self.reduced_cost(&y, j, false)).collect();
        let objective_value = primal.iter().zip(&self.cost[..self.n]).map(|(v, c)| v * c).sum();
        match status {
            LpStatus::Optimal => LpOutcome {
                status,
                primal,
                duals: y,
                reduced_costs,
                objective_value,
                iterations: self.iterations,
                certificate,
            },
            LpStatus::Infeasible => LpOutcome {
                status,
                primal,
                duals: vec![0.0; self.m],
                reduced_costs: vec![0.0; self.n],
                objective_value: UNBOUNDED,
                iterations: self.iterations,
                certificate,
            },
            LpStatus::Unbounded => LpOutcome {
                status,
                primal,
                duals: vec![0.0; self.m],
                reduced_costs: vec![0.0; self.n],
                objective_value: -UNBOUNDED,
                iterations: self.iterations,
                certificate,
            },
        }
    }
}

enum ColIter<'a> {
    Struct(std::slice::Iter<'a, (usize, f64)>),
    Logical(Option<usize>),
}

impl Iterator for ColIter<'_> {
    type Item = (usize, f64);

    fn next(&mut self) -> Option<(usize, f64)> {
        match self {
            ColIter::Struct(it) => it.next().copied(),
            ColIter::Logical(row) => row.take().map(|i| (i, -1.0)),
        }
    }
}
