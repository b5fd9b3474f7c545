//! In-batch clean confidence and the forget/retain split.

use serde::{Deserialize, Serialize};

use crate::error::{NcuError, Result};
use crate::numcore::{col_softmax, row_softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPartition {
    pub omega: Vec<f64>,
    /// Forget set, sorted ascending.
    pub fg_indices: Vec<usize>,
    /// Retain set, sorted ascending.
    pub rt_indices: Vec<usize>,
    pub p_percent: f64,
}

impl BatchPartition {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Per-item forget flags.
    pub fn forget_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for &i in &self.fg_indices {
            mask[i] = true;
        }
        mask
    }

    /// A partition with an explicit forget set (no confidence scores attached).
    pub fn from_forget_set(n: usize, fg: &[usize]) -> Self {
        let mut fg_indices = fg.to_vec();
        fg_indices.sort_unstable();
        fg_indices.dedup();
        let rt_indices = (0..n).filter(|i| fg_indices.binary_search(i).is_err()).collect();
        let p_percent = 100.0 * fg_indices.len() as f64 / n.max(1) as f64;
        Self { omega: vec![0.0; n], fg_indices, rt_indices, p_percent }
    }
}

/// Forget-set size for a batch of `n` at `p_percent`: `max(1, ⌊P·N/100⌋)`.
pub fn forget_count(n: usize, p_percent: f64) -> usize {
    ((p_percent * n as f64 / 100.0).floor() as usize).max(1)
}

/// `ω_i = ½ [softmax_j(⟨v_i, t_j⟩/τ)_i + softmax_j(⟨t_i, v_j⟩/τ)_i]`.
pub fn clean_confidence(v: &Matrix, t: &Matrix, tau: f64) -> Result<Vec<f64>> {
    if v.shape() != t.shape() {
        return Err(NcuError::DimensionMismatch {
            op: "clean_confidence",
            detail: format!("V is {:?}, T is {:?}", v.shape(), t.shape()),
        });
    }
    confidence_from_logits(&v.matmul_nt(t), tau)
}

/// Same as [`clean_confidence`], starting from the similarity matrix `S = V·Tᵀ`.
pub fn confidence_from_logits(sim: &Matrix, tau: f64) -> Result<Vec<f64>> {
    let v2t = row_softmax(sim, tau)?;
    // Row i of S·ᵀ is text i against every image, i.e. column i of S.
    let t2v = col_softmax(sim, tau)?;
    Ok((0..sim.rows()).map(|i| 0.5 * (v2t[(i, i)] + t2v[(i, i)])).collect())
}

/// Puts the lowest `P%` of `omega` (ties by ascending index) into the forget set.
pub fn partition_batch(omega: &[f64], p_percent: f64) -> Result<BatchPartition> {
    let n = omega.len();
    if n < 2 {
        return Err(NcuError::BatchTooSmall(n));
    }
    if !(p_percent > 0.0 && p_percent < 100.0) {
        return Err(NcuError::InvalidConfig(format!("P must lie in (0, 100), got {p_percent}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| omega[a].total_cmp(&omega[b]).then(a.cmp(&b)));
    let k = forget_count(n, p_percent);
    let mut fg_indices = order[..k].to_vec();
    let mut rt_indices = order[k..].to_vec();
    fg_indices.sort_unstable();
    rt_indices.sort_unstable();
    Ok(BatchPartition { omega: omega.to_vec(), fg_indices, rt_indices, p_percent })
}
