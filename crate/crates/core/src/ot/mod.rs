//! Entropic optimal transport with the appended hardest-negative column.
//!
//! For a batch of `N` pairs the cost has `N + 1` columns: the `N` texts plus each
//! image's own negative text. A 0/1 mask forbids the forget-set diagonals and
//! the retain-set negative cells; the Sinkhorn solver zeroes those cells in the
//! Gibbs kernel so they can never carry mass.

mod lp;
mod sinkhorn;

pub use lp::{exact_ot_oracle, solve_lp};
pub use sinkhorn::{masked_sinkhorn, SinkhornConfig, LOG_DOMAIN_BELOW};

use serde::{Deserialize, Serialize};

use crate::confidence::BatchPartition;
use crate::error::{NcuError, Result};
use crate::numcore::{dot, Matrix};

/// Slack allowed on cosine-distance costs outside `[0, 2]`.
pub const COST_RANGE_TOL: f64 = 1e-9;
/// Slack allowed on the total mass of a marginal.
pub const MARGINAL_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    pub cost: Matrix,
    /// Entries are exactly 0.0 or 1.0.
    pub mask: Matrix,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub epsilon: f64,
}

impl TransportProblem {
    pub fn new(cost: Matrix, mask: Matrix, mu: Vec<f64>, nu: Vec<f64>, epsilon: f64) -> Result<Self> {
        let (n, m) = cost.shape();
        if mask.shape() != (n, m) || mu.len() != n || nu.len() != m {
            return Err(NcuError::DimensionMismatch {
                op: "TransportProblem::new",
                detail: format!(
                    "cost {:?}, mask {:?}, mu {}, nu {}",
                    cost.shape(),
                    mask.shape(),
                    mu.len(),
                    nu.len()
                ),
            });
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(NcuError::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
        }
        if let Some(c) = cost.as_slice().iter().find(|&&c| !(-COST_RANGE_TOL..=2.0 + COST_RANGE_TOL).contains(&c)) {
            return Err(NcuError::InvalidConfig(format!("cost entry {c} outside [0, 2]")));
        }
        if mask.as_slice().iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(NcuError::InvalidConfig("mask entries must be 0 or 1".into()));
        }
        for (name, marg) in [("mu", &mu), ("nu", &nu)] {
            let total: f64 = marg.iter().sum();
            if marg.iter().any(|&x| !(x > 0.0)) || (total - 1.0).abs() > MARGINAL_SUM_TOL {
                return Err(NcuError::InvalidDistribution(format!("{name} must be positive and sum to 1")));
            }
        }
        if let Some(i) = (0..n).find(|&i| mask.row(i).iter().all(|&x| x == 0.0)) {
            return Err(NcuError::InfeasibleMask(format!("row {i} is fully masked")));
        }
        if let Some(j) = mask.col_sums().iter().position(|&s| s == 0.0) {
            return Err(NcuError::InfeasibleMask(format!("column {j} is fully masked")));
        }
        Ok(Self { cost, mask, mu, nu, epsilon })
    }

    /// Uniform marginals `1/N` over rows and `1/M` over columns.
    pub fn uniform(cost: Matrix, mask: Matrix, epsilon: f64) -> Result<Self> {
        let (n, m) = cost.shape();
        Self::new(cost, mask, vec![1.0 / n as f64; n], vec![1.0 / m as f64; m], epsilon)
    }

    pub fn rows(&self) -> usize {
        self.cost.rows()
    }

    pub fn cols(&self) -> usize {
        self.cost.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    #[serde(skip, default = "empty_plan")]
    pub plan: Matrix,
    pub iterations: usize,
    /// L∞ violation over both marginals.
    pub marginal_residual: f64,
    pub converged: bool,
}

fn empty_plan() -> Matrix {
    Matrix::zeros(1, 1)
}

/// `⟨Γ, C⟩`.
pub fn transport_cost(plan: &Matrix, cost: &Matrix) -> f64 {
    dot(plan.as_slice(), cost.as_slice())
}

/// `H(Γ) = −Σ Γ log Γ` with `0 log 0 = 0`.
pub fn entropy(plan: &Matrix) -> f64 {
    -crate::numcore::kernels::neg_entropy(plan.as_slice())
}

/// L∞ violation of the row and column marginals.
pub fn marginal_residual(plan: &Matrix, mu: &[f64], nu: &[f64]) -> f64 {
    let rows = plan.row_sums().iter().zip(mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let cols = plan.col_sums().iter().zip(nu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    rows.max(cols)
}

/// `C̄_ij = 1 − ⟨v_i, t_j⟩` for `j < N`, and `C̄_{i,N} = 1 − ⟨v_i, t_i^neg⟩`.
pub fn extend_cost(v: &Matrix, t: &Matrix, t_neg: &Matrix) -> Result<Matrix> {
    if v.shape() != t.shape() || t.shape() != t_neg.shape() {
        return Err(NcuError::DimensionMismatch {
            op: "extend_cost",
            detail: format!("V {:?}, T {:?}, T_neg {:?}", v.shape(), t.shape(), t_neg.shape()),
        });
    }
    let n = v.rows();
    let sim = v.matmul_nt(t);
    Ok(Matrix::from_fn(n, n + 1, |i, j| {
        let s = if j < n { sim[(i, j)] } else { dot(v.row(i), t_neg.row(i)) };
        (1.0 - s).clamp(0.0, 2.0)
    }))
}

/// Forget rows lose their own text; retain rows lose the negative column.
pub fn build_mask(partition: &BatchPartition, n: usize) -> Result<Matrix> {
    if partition.len() != n || partition.fg_indices.len() + partition.rt_indices.len() != n {
        return Err(NcuError::DimensionMismatch {
            op: "build_mask",
            detail: format!("partition covers {} items, expected {n}", partition.len()),
        });
    }
    if partition.fg_indices.is_empty() {
        return Err(NcuError::EmptyForgetSet);
    }
    let mut mask = Matrix::filled(n, n + 1, 1.0);
    for &i in &partition.fg_indices {
        mask[(i, i)] = 0.0;
    }
    for &i in &partition.rt_indices {
        mask[(i, n)] = 0.0;
    }
    Ok(mask)
}

/// Hard targets: retain rows point at their own text, forget rows at their negative.
pub fn identity_targets(partition: &BatchPartition, n: usize) -> Matrix {
    let mut id = Matrix::zeros(n, n + 1);
    for &i in &partition.rt_indices {
        id[(i, i)] = 1.0;
    }
    for &i in &partition.fg_indices {
        id[(i, n)] = 1.0;
    }
    id
}

/// `T = γ · N·Γ̂* + (1 − γ) · I`, with `Γ̂*` rows rescaled to unit mass.
pub fn blend_alignment(plan: &TransportPlan, partition: &BatchPartition, gamma: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(NcuError::InvalidConfig(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let (n, m) = plan.plan.shape();
    if m != n + 1 || partition.len() != n {
        return Err(NcuError::DimensionMismatch {
            op: "blend_alignment",
            detail: format!("plan {:?} with a partition of {}", plan.plan.shape(), partition.len()),
        });
    }
    let id = identity_targets(partition, n);
    let scale = gamma * n as f64;
    Ok(plan.plan.zip_map(&id, |p, e| scale * p + (1.0 - gamma) * e))
}
