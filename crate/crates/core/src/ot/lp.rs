//! Exact transport by a dense two-phase simplex (Bland's rule).
//!
//! Only meant for desk-scale verification instances; it shares nothing with
//! the Sinkhorn path.

use crate::error::{NcuError, Result};
use crate::numcore::Matrix;

const PIVOT_EPS: f64 = 1e-12;
const FEASIBILITY_EPS: f64 = 1e-9;
/// Largest row count accepted by [`exact_ot_oracle`].
pub const ORACLE_MAX_ROWS: usize = 6;

struct Tableau {
    /// `rows × (vars + 1)`; the last column is the right-hand side.
    cells: Vec<Vec<f64>>,
    basis: Vec<usize>,
    vars: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.cells[r][self.vars]
    }

    fn pivot(&mut self, r: usize, col: usize) {
        let p = self.cells[r][col];
        self.cells[r].iter_mut().for_each(|x| *x /= p);
        let pivot_row = self.cells[r].clone();
        for (k, row) in self.cells.iter_mut().enumerate() {
            if k == r {
                continue;
            }
            let factor = row[col];
            if factor != 0.0 {
                for (x, y) in row.iter_mut().zip(&pivot_row) {
                    *x -= factor * y;
                }
            }
        }
        self.basis[r] = col;
    }

    /// Minimizes `cost · x` over columns where `allowed` is true.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool]) -> Result<()> {
        loop {
            // Bland: lowest-index column with a negative reduced cost enters.
            let entering = (0..self.vars).filter(|&j| allowed[j]).find(|&j| {
                let reduced = cost[j]
                    - self.basis.iter().enumerate().map(|(r, &b)| cost[b] * self.cells[r][j]).sum::<f64>();
                reduced < -PIVOT_EPS
            });
            let Some(col) = entering else { return Ok(()) };
            let leaving = (0..self.cells.len())
                .filter(|&r| self.cells[r][col] > PIVOT_EPS)
                .min_by(|&a, &b| {
                    let ra = self.rhs(a) / self.cells[a][col];
                    let rb = self.rhs(b) / self.cells[b][col];
                    ra.total_cmp(&rb).then(self.basis[a].cmp(&self.basis[b]))
                });
            match leaving {
                Some(r) => self.pivot(r, col),
                // Transport polytopes are bounded; this only triggers on misuse.
                None => return Err(NcuError::InvalidConfig("linear program is unbounded".into())),
            }
        }
    }
}

/// Solves `min cᵀx` s.t. `Ax = b`, `x ≥ 0`; returns `(x, objective)`.
pub fn solve_lp(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64)> {
    let rows = a.len();
    let n = c.len();
    assert_eq!(b.len(), rows);
    assert!(a.iter().all(|r| r.len() == n));

    // Phase 1: one artificial per constraint, with every right-hand side made non-negative.
    let vars = n + rows;
    let mut cells = Vec::with_capacity(rows);
    for (r, (row, &rhs)) in a.iter().zip(b).enumerate() {
        let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
        let mut cell: Vec<f64> = row.iter().map(|x| sign * x).collect();
        cell.extend((0..rows).map(|k| if k == r { 1.0 } else { 0.0 }));
        cell.push(sign * rhs);
        cells.push(cell);
    }
    let mut tab = Tableau { cells, basis: (n..vars).collect(), vars };
    let phase1_cost: Vec<f64> = (0..vars).map(|j| if j >= n { 1.0 } else { 0.0 }).collect();
    tab.optimize(&phase1_cost, &vec![true; vars])?;
    let infeasibility: f64 = (0..rows).filter(|&r| tab.basis[r] >= n).map(|r| tab.rhs(r)).sum();
    if infeasibility > FEASIBILITY_EPS {
        return Err(NcuError::Infeasible);
    }

    // Drive zero-level artificials out of the basis; rows where that is impossible are redundant.
    let mut r = 0;
    while r < tab.cells.len() {
        if tab.basis[r] >= n {
            if let Some(col) = (0..n).find(|&j| tab.cells[r][j].abs() > FEASIBILITY_EPS) {
                tab.pivot(r, col);
            } else {
                tab.cells.remove(r);
                tab.basis.remove(r);
                continue;
            }
        }
        r += 1;
    }

    let mut phase2_cost = c.to_vec();
    phase2_cost.extend(std::iter::repeat_n(0.0, rows));
    let allowed: Vec<bool> = (0..vars).map(|j| j < n).collect();
    tab.optimize(&phase2_cost, &allowed)?;

    let mut x = vec![0.0; n];
    for (r, &bvar) in tab.basis.iter().enumerate() {
        if bvar < n {
            x[bvar] = tab.rhs(r).max(0.0);
        }
    }
    let objective = x.iter().zip(c).map(|(a, b)| a * b).sum();
    Ok((x, objective))
}

/// Exact minimizer of `⟨Γ, C⟩` over nonnegative plans with marginals `mu`, `nu`
/// that vanish wherever `mask` is 0.
pub fn exact_ot_oracle(cost: &Matrix, mask: &Matrix, mu: &[f64], nu: &[f64]) -> Result<(Matrix, f64)> {
    let (n, m) = cost.shape();
    if mask.shape() != (n, m) || mu.len() != n || nu.len() != m {
        return Err(NcuError::DimensionMismatch {
            op: "exact_ot_oracle",
            detail: format!("cost {:?}, mask {:?}, mu {}, nu {}", cost.shape(), mask.shape(), mu.len(), nu.len()),
        });
    }
    if n > ORACLE_MAX_ROWS {
        return Err(NcuError::InvalidConfig(format!(
            "exact oracle is limited to {ORACLE_MAX_ROWS} rows, got {n}"
        )));
    }
    let cells: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).filter(|&(i, j)| mask[(i, j)] != 0.0).collect();
    let mut a = vec![vec![0.0; cells.len()]; n + m];
    for (k, &(i, j)) in cells.iter().enumerate() {
        a[i][k] = 1.0;
        a[n + j][k] = 1.0;
    }
    let b: Vec<f64> = mu.iter().chain(nu).copied().collect();
    let c: Vec<f64> = cells.iter().map(|&(i, j)| cost[(i, j)]).collect();
    let (x, objective) = solve_lp(&a, &b, &c)?;
    let mut plan = Matrix::zeros(n, m);
    for (&(i, j), &v) in cells.iter().zip(&x) {
        plan[(i, j)] = v;
    }
    Ok((plan, objective))
}
