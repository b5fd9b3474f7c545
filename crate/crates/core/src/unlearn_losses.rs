//! Contrastive pre-training loss, OT-guided re-alignment and the baseline objectives.

use crate::confidence::BatchPartition;
use crate::error::{NcuError, Result};
use crate::hn_losses::{check_same_shape, check_tau, sep_loss_var, HnLossConfig};
use crate::numcore::kernels::DISTRIBUTION_TOL;
use crate::numcore::{Graph, Matrix, Var};

/// Blended soft alignment for one batch; `t` is `N × (N+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTargets {
    pub t: Matrix,
    pub partition: BatchPartition,
}

impl AlignmentTargets {
    pub fn new(t: Matrix, partition: BatchPartition) -> Result<Self> {
        let n = partition.len();
        if t.shape() != (n, n + 1) {
            return Err(NcuError::DimensionMismatch {
                op: "AlignmentTargets",
                detail: format!("targets {:?} for a batch of {n}", t.shape()),
            });
        }
        check_row_stochastic(&t)?;
        Ok(Self { t, partition })
    }

    /// Column-normalized targets; a column with no mass stays all zero.
    pub fn t2v(&self) -> Matrix {
        column_normalize(&self.t)
    }
}

fn check_row_stochastic(t: &Matrix) -> Result<()> {
    for i in 0..t.rows() {
        let row = t.row(i);
        if row.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(NcuError::InvalidDistribution(format!("target row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(NcuError::InvalidDistribution(format!("target row {i} sums to {s}")));
        }
    }
    Ok(())
}

fn column_normalize(t: &Matrix) -> Matrix {
    let sums = t.col_sums();
    Matrix::from_fn(t.rows(), t.cols(), |i, j| if sums[j] > 0.0 { t[(i, j)] / sums[j] } else { 0.0 })
}

/// `Σ x log x` with `0 log 0 = 0`.
fn neg_entropy_sum(m: &Matrix) -> f64 {
    m.as_slice().iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum()
}

/// `−Σ_ij Y_ij · log_probs_ij`.
fn cross_entropy_var(g: &mut Graph, log_probs: Var, targets: Matrix) -> Var {
    let y = g.constant(targets);
    let weighted = g.mul(log_probs, y);
    let total = g.sum(weighted);
    g.scale(total, -1.0)
}

/// Symmetric cross-entropy of `S/τ` against `targets` in both directions, each averaged over `N`.
fn symmetric_ce_var(g: &mut Graph, v: Var, t: Var, tau: Var, targets: Matrix) -> Var {
    let n = g.shape(v).0 as f64;
    let sim = g.matmul_nt(v, t);
    let logits = g.div_by_scalar(sim, tau);
    let v2t = g.row_log_softmax(logits);
    let t2v = g.col_log_softmax(logits);
    let a = cross_entropy_var(g, v2t, targets.clone());
    let b = cross_entropy_var(g, t2v, targets);
    let both = g.add(a, b);
    g.scale(both, 1.0 / n)
}

/// Symmetric InfoNCE with matched pairs on the diagonal.
pub fn infonce_loss_var(g: &mut Graph, v: Var, t: Var, tau: Var) -> Var {
    let n = g.shape(v).0;
    symmetric_ce_var(g, v, t, tau, Matrix::identity(n))
}

/// Label-smoothed variant: targets `(1−s)·I + s/N`.
pub fn smoothed_infonce_loss_var(g: &mut Graph, v: Var, t: Var, tau: Var, smoothing: f64) -> Var {
    let n = g.shape(v).0;
    let off = smoothing / n as f64;
    let targets = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 - smoothing + off } else { off });
    symmetric_ce_var(g, v, t, tau, targets)
}

/// `[V·Tᵀ | ⟨v_i, t_i^neg⟩]`, raw logits.
pub fn build_p_var(g: &mut Graph, v: Var, t: Var, t_neg: Var) -> Var {
    let sim = g.matmul_nt(v, t);
    let own_neg = g.row_dot(v, t_neg);
    g.hcat(sim, own_neg)
}

/// Row KL averaged over `N` plus column KL against the column-normalized
/// targets averaged over `N+1`. Written as a constant plus cross-entropy so
/// the target side never needs a log of zero.
pub fn otr_loss_var(g: &mut Graph, p_logits: Var, targets: &Matrix, tau: Var) -> Var {
    let (n, m) = targets.shape();
    let t2v = column_normalize(targets);
    let constant = neg_entropy_sum(targets) / n as f64 + neg_entropy_sum(&t2v) / m as f64;

    let logits = g.div_by_scalar(p_logits, tau);
    let row_lp = g.row_log_softmax(logits);
    let col_lp = g.col_log_softmax(logits);
    let row_ce = cross_entropy_var(g, row_lp, targets.clone());
    let row_ce = g.scale(row_ce, 1.0 / n as f64);
    let col_ce = cross_entropy_var(g, col_lp, t2v);
    let col_ce = g.scale(col_ce, 1.0 / m as f64);
    let ce = g.add(row_ce, col_ce);
    g.add_const(ce, constant)
}

/// `otr + sep`, with `sep` over the retain rows.
pub fn ul_total_var(
    g: &mut Graph,
    p_logits: Var,
    targets: &Matrix,
    t_rt: Var,
    t_neg_rt: Var,
    cfg: &HnLossConfig,
    tau: Var,
) -> Var {
    let otr = otr_loss_var(g, p_logits, targets, tau);
    let sep = sep_loss_var(g, t_rt, t_neg_rt, cfg);
    g.add(otr, sep)
}

/// `−InfoNCE(FG) + smoothed InfoNCE(RT)`.
pub fn gradient_ascent_var(
    g: &mut Graph,
    (v_fg, t_fg): (Var, Var),
    (v_rt, t_rt): (Var, Var),
    tau: Var,
    smoothing: f64,
) -> Var {
    let forget = infonce_loss_var(g, v_fg, t_fg, tau);
    let retain = smoothed_infonce_loss_var(g, v_rt, t_rt, tau, smoothing);
    g.sub(retain, forget)
}

fn eval(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g);
    g.scalar_value(out)
}

fn check_pair(op: &'static str, v: &Matrix, t: &Matrix, tau: f64) -> Result<()> {
    check_same_shape(op, v, t)?;
    check_tau(tau)
}

fn check_smoothing(smoothing: f64) -> Result<()> {
    if (0.0..1.0).contains(&smoothing) {
        Ok(())
    } else {
        Err(NcuError::InvalidConfig(format!("label smoothing must lie in [0, 1), got {smoothing}")))
    }
}

pub fn infonce_loss(v: &Matrix, t: &Matrix, tau: f64) -> Result<f64> {
    check_pair("infonce_loss", v, t, tau)?;
    Ok(eval(|g| {
        let (v, t) = (g.constant(v.clone()), g.constant(t.clone()));
        let tau = g.constant(Matrix::filled(1, 1, tau));
        infonce_loss_var(g, v, t, tau)
    }))
}

pub fn smoothed_infonce_loss(v: &Matrix, t: &Matrix, tau: f64, smoothing: f64) -> Result<f64> {
    check_pair("smoothed_infonce_loss", v, t, tau)?;
    check_smoothing(smoothing)?;
    Ok(eval(|g| {
        let (v, t) = (g.constant(v.clone()), g.constant(t.clone()));
        let tau = g.constant(Matrix::filled(1, 1, tau));
        smoothed_infonce_loss_var(g, v, t, tau, smoothing)
    }))
}

pub fn build_p(v: &Matrix, t: &Matrix, t_neg: &Matrix) -> Result<Matrix> {
    check_same_shape("build_p", v, t)?;
    check_same_shape("build_p", v, t_neg)?;
    let mut g = Graph::new();
    let (v, t, n) = (g.constant(v.clone()), g.constant(t.clone()), g.constant(t_neg.clone()));
    let p = build_p_var(&mut g, v, t, n);
    Ok(g.value(p).clone())
}

pub fn otr_loss(p_logits: &Matrix, targets: &AlignmentTargets, tau: f64) -> Result<f64> {
    check_same_shape("otr_loss", p_logits, &targets.t)?;
    check_tau(tau)?;
    Ok(eval(|g| {
        let p = g.constant(p_logits.clone());
        let tau = g.constant(Matrix::filled(1, 1, tau));
        otr_loss_var(g, p, &targets.t, tau)
    })
    .max(0.0))
}

pub fn ul_total(
    p_logits: &Matrix,
    targets: &AlignmentTargets,
    t_rt: &Matrix,
    t_neg_rt: &Matrix,
    cfg: &HnLossConfig,
    tau: f64,
) -> Result<f64> {
    Ok(otr_loss(p_logits, targets, tau)? + crate::hn_losses::sep_loss(t_rt, t_neg_rt, cfg)?)
}

pub fn gradient_ascent_objective(
    (v_fg, t_fg): (&Matrix, &Matrix),
    (v_rt, t_rt): (&Matrix, &Matrix),
    tau: f64,
    smoothing: f64,
) -> Result<f64> {
    if v_fg.rows() == 0 || t_fg.rows() == 0 {
        return Err(NcuError::EmptySubset("forget"));
    }
    if v_rt.rows() == 0 || t_rt.rows() == 0 {
        return Err(NcuError::EmptySubset("retain"));
    }
    Ok(smoothed_infonce_loss(v_rt, t_rt, tau, smoothing)? - infonce_loss(v_fg, t_fg, tau)?)
}
