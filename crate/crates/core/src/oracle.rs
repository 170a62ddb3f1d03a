//! Brute-force reference solvers for test suites. Deliberately independent of
//! the simplex code: own elimination routine, no shared helpers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::lp::{LpProblem, Relation};
use crate::milp::MilpProblem;

/// Solves the square system `a x = b` by Gaussian elimination with partial
/// pivoting. Returns `None` when the system is (numerically) singular.
#[allow(clippy::needless_range_loop)]
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Minimum objective over all basic feasible solutions of a problem with
/// finite bounds on every variable. `None` when no vertex is feasible.
///
/// A vertex is fixed by choosing which rows are tight and, for every
/// remaining variable, which of its bounds is tight.
pub fn vertex_enumeration(problem: &LpProblem, tol: f64) -> Option<(f64, Vec<f64>)> {
    let n = problem.n_vars;
    let m = problem.constraints.len();
    assert!(
        problem.bounds.iter().all(|b| b.0.is_finite() && b.1.is_finite()),
        "vertex enumeration needs finite bounds"
    );
    let mut best: Option<(f64, Vec<f64>)> = None;
    for rows_mask in 0u32..(1 << m) {
        let tight_rows: Vec<usize> = (0..m).filter(|i| rows_mask & (1 << i) != 0).collect();
        let k = tight_rows.len();
        if k > n {
            continue;
        }
        for_each_subset(n, n - k, |fixed_vars| {
            let free: Vec<usize> = (0..n).filter(|j| !fixed_vars.contains(j)).collect();
            for side_mask in 0u32..(1 << fixed_vars.len()) {
                let mut x = vec![0.0; n];
                for (t, &j) in fixed_vars.iter().enumerate() {
                    x[j] = if side_mask & (1 << t) != 0 {
                        problem.bounds[j].1
                    } else {
                        problem.bounds[j].0
                    };
                }
                if k > 0 {
                    let a: Vec<Vec<f64>> = tight_rows
                        .iter()
                        .map(|&i| free.iter().map(|&j| problem.constraints[i].coeffs[j]).collect())
                        .collect();
                    let b: Vec<f64> = tight_rows
                        .iter()
                        .map(|&i| {
                            let c = &problem.constraints[i];
                            c.rhs - fixed_vars.iter().map(|&j| c.coeffs[j] * x[j]).sum::<f64>()
                        })
                        .collect();
                    let Some(sol) = solve_dense(a, b) else { continue };
                    for (t, &j) in free.iter().enumerate() {
                        x[j] = sol[t];
                    }
                }
                if problem.max_violation(&x) <= tol {
                    let obj = problem.objective_value(&x);
                    if best.as_ref().is_none_or(|b| obj < b.0) {
                        best = Some((obj, x));
                    }
                }
            }
        });
    }
    best
}

fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for j in start..n {
            if n - j < k - cur.len() {
                break;
            }
            cur.push(j);
            rec(j + 1, n, k, cur, f);
            cur.pop();
        }
    }
    let mut cur = Vec::with_capacity(k);
    rec(0, n, k, &mut cur, &mut f);
}

/// Random feasible LP with finite bounds; rows are placed around an interior point.
pub fn random_lp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LpProblem {
    let mut p = LpProblem::new(n);
    p.objective = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    p.bounds = (0..n)
        .map(|_| {
            let l: f64 = rng.gen_range(-3.0..1.0);
            (l, l + rng.gen_range(0.5..6.0))
        })
        .collect();
    let x0: Vec<f64> = p.bounds.iter().map(|&(l, u)| rng.gen_range(l..u)).collect();
    add_random_rows(rng, &mut p, &x0, m);
    p
}

/// Random MILP with `n_bin` binaries followed by `n_cont` bounded continuous
/// variables. Rows are built around a point with integral binaries, so the
/// instance is feasible unless `loose` is false and the rows conflict.
pub fn random_milp(rng: &mut ChaCha8Rng, n_bin: usize, n_cont: usize, m: usize) -> MilpProblem {
    let n = n_bin + n_cont;
    let mut p = LpProblem::new(n);
    p.objective = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
    for j in 0..n {
        p.bounds[j] = if j < n_bin {
            (0.0, 1.0)
        } else {
            let l: f64 = rng.gen_range(-2.0..1.0);
            (l, l + rng.gen_range(1.0..5.0))
        };
    }
    let x0: Vec<f64> = (0..n)
        .map(|j| {
            if j < n_bin {
                f64::from(u8::from(rng.gen_bool(0.5)))
            } else {
                rng.gen_range(p.bounds[j].0..p.bounds[j].1)
            }
        })
        .collect();
    add_random_rows(rng, &mut p, &x0, m);
    MilpProblem {
        base: p,
        binary_vars: (0..n_bin).collect(),
    }
}

fn add_random_rows(rng: &mut ChaCha8Rng, p: &mut LpProblem, x0: &[f64], m: usize) {
    for _ in 0..m {
        let coeffs: Vec<f64> = (0..p.n_vars)
            .map(|_| {
                if rng.gen_bool(0.25) {
                    0.0
                } else {
                    rng.gen_range(-4.0..4.0)
                }
            })
            .collect();
        let act: f64 = coeffs.iter().zip(x0).map(|(a, v)| a * v).sum();
        let (rel, rhs) = match rng.gen_range(0..6) {
            0 => (Relation::Eq, act),
            1 | 2 => (Relation::Le, act + rng.gen_range(0.0..3.0)),
            _ => (Relation::Ge, act - rng.gen_range(0.0..3.0)),
        };
        p.add_constraint(coeffs, rel, rhs);
    }
}
