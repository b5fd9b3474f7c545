//! Losses that teach the negative head its hardest-negative semantics.
//!
//! All three are evaluated on the retain subset of a batch. The graph-building
//! variants (`*_var`) are what training differentiates; the plain functions
//! evaluate the same graphs on constants.

use serde::{Deserialize, Serialize};

use crate::error::{NcuError, Result};
use crate::numcore::{Graph, Matrix, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HnLossConfig {
    /// Lower margin on `⟨t_i, t_i^neg⟩`.
    pub alpha: f64,
    /// Upper margin on `⟨t_i, t_i^neg⟩`.
    pub beta: f64,
    /// Weight on the separation and relation terms.
    pub lambda: f64,
}

impl Default for HnLossConfig {
    fn default() -> Self {
        Self { alpha: -0.5, beta: -0.1, lambda: 1.0 }
    }
}

impl HnLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha < self.beta && self.beta < 0.0) {
            return Err(NcuError::InvalidMargins { alpha: self.alpha, beta: self.beta });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(NcuError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `(1/Ñ) Σ [α − s_i]₊ + [s_i − β]₊` with `s_i = ⟨t_i, t_i^neg⟩`.
pub fn sep_loss_var(g: &mut Graph, t: Var, t_neg: Var, cfg: &HnLossConfig) -> Var {
    let n = g.shape(t).0 as f64;
    let s = g.row_dot(t, t_neg);
    let below = g.scale(s, -1.0);
    let below = g.add_const(below, cfg.alpha);
    let below = g.relu(below);
    let above = g.add_const(s, -cfg.beta);
    let above = g.relu(above);
    let both = g.add(below, above);
    let total = g.sum(both);
    g.scale(total, 1.0 / n)
}

/// `(1/Ñ) Σ_ij (⟨t_i, t_j^neg⟩ − ⟨t_j, t_i^neg⟩)²`.
pub fn rel_loss_var(g: &mut Graph, t: Var, t_neg: Var) -> Var {
    let n = g.shape(t).0 as f64;
    let cross = g.matmul_nt(t, t_neg);
    let mirrored = g.transpose(cross);
    let residual = g.sub(cross, mirrored);
    let sq = g.square(residual);
    let total = g.sum(sq);
    g.scale(total, 1.0 / n)
}

/// `+1` on the diagonal, `−1` elsewhere.
fn matching_signs(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { -1.0 })
}

/// `(1/Ñ) Σ_ij −log σ(m_ij z_ij) − log σ(−m_ij z̄_ij)`, with `z = T·Vᵀ/τ` and `z̄ = T_neg·Vᵀ/τ`.
pub fn itm_loss_var(g: &mut Graph, t: Var, t_neg: Var, v: Var, tau: Var) -> Var {
    let n = g.shape(t).0;
    let signs = g.constant(matching_signs(n));
    let z = g.matmul_nt(t, v);
    let z = g.div_by_scalar(z, tau);
    let z_neg = g.matmul_nt(t_neg, v);
    let z_neg = g.div_by_scalar(z_neg, tau);
    // −log σ(x) = softplus(−x)
    let pos = g.mul(z, signs);
    let pos = g.scale(pos, -1.0);
    let pos = g.softplus(pos);
    let neg = g.mul(z_neg, signs);
    let neg = g.softplus(neg);
    let both = g.add(pos, neg);
    let total = g.sum(both);
    g.scale(total, 1.0 / n as f64)
}

/// `λ·(sep + rel) + itm`.
pub fn hn_total_var(g: &mut Graph, t: Var, t_neg: Var, v: Var, tau: Var, cfg: &HnLossConfig) -> Var {
    let sep = sep_loss_var(g, t, t_neg, cfg);
    let rel = rel_loss_var(g, t, t_neg);
    let itm = itm_loss_var(g, t, t_neg, v, tau);
    let structural = g.add(sep, rel);
    let structural = g.scale(structural, cfg.lambda);
    g.add(structural, itm)
}

/// Maximal-distance alternative to `sep + rel`: `(1/Ñ) Σ (4 − ‖t_i − t_i^neg‖²)/2 = (1/Ñ) Σ (1 + s_i)`,
/// minimized at `t^neg = −t`.
pub fn l2_opposite_loss_var(g: &mut Graph, t: Var, t_neg: Var) -> Var {
    let n = g.shape(t).0 as f64;
    let s = g.row_dot(t, t_neg);
    let shifted = g.add_const(s, 1.0);
    let total = g.sum(shifted);
    g.scale(total, 1.0 / n)
}

/// Like [`hn_total_var`] but with `sep + rel` replaced by [`l2_opposite_loss_var`].
pub fn hn_total_l2_var(g: &mut Graph, t: Var, t_neg: Var, v: Var, tau: Var, cfg: &HnLossConfig) -> Var {
    let opp = l2_opposite_loss_var(g, t, t_neg);
    let itm = itm_loss_var(g, t, t_neg, v, tau);
    let opp = g.scale(opp, cfg.lambda);
    g.add(opp, itm)
}

pub(crate) fn check_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NcuError::DimensionMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(NcuError::NonPositiveTemperature(tau))
    }
}

fn eval(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g);
    g.scalar_value(out)
}

pub fn sep_loss(t_rt: &Matrix, t_neg_rt: &Matrix, cfg: &HnLossConfig) -> Result<f64> {
    check_same_shape("sep_loss", t_rt, t_neg_rt)?;
    cfg.validate()?;
    Ok(eval(|g| {
        let (t, n) = (g.constant(t_rt.clone()), g.constant(t_neg_rt.clone()));
        sep_loss_var(g, t, n, cfg)
    }))
}

pub fn rel_loss(t_rt: &Matrix, t_neg_rt: &Matrix) -> Result<f64> {
    check_same_shape("rel_loss", t_rt, t_neg_rt)?;
    Ok(eval(|g| {
        let (t, n) = (g.constant(t_rt.clone()), g.constant(t_neg_rt.clone()));
        rel_loss_var(g, t, n)
    }))
}

pub fn itm_loss(t_rt: &Matrix, t_neg_rt: &Matrix, v_rt: &Matrix, tau: f64) -> Result<f64> {
    check_same_shape("itm_loss", t_rt, t_neg_rt)?;
    check_same_shape("itm_loss", t_rt, v_rt)?;
    check_tau(tau)?;
    Ok(eval(|g| {
        let (t, n, v) = (g.constant(t_rt.clone()), g.constant(t_neg_rt.clone()), g.constant(v_rt.clone()));
        let tau = g.constant(Matrix::filled(1, 1, tau));
        itm_loss_var(g, t, n, v, tau)
    }))
}

pub fn hn_total(t_rt: &Matrix, t_neg_rt: &Matrix, v_rt: &Matrix, tau: f64, cfg: &HnLossConfig) -> Result<f64> {
    let sep = sep_loss(t_rt, t_neg_rt, cfg)?;
    let rel = rel_loss(t_rt, t_neg_rt)?;
    let itm = itm_loss(t_rt, t_neg_rt, v_rt, tau)?;
    Ok(cfg.lambda * (sep + rel) + itm)
}
