//! Row/column-wise kernels and probability-simplex utilities.

use crate::error::{NcuError, Result};
use crate::numcore::Matrix;

/// Rows whose Euclidean norm is at or below this are rejected by [`l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Tolerance on the total mass of a probability vector.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= MIN_ROW_NORM {
            return Err(NcuError::ZeroRow { row: i, norm });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(NcuError::NonPositiveTemperature(temperature))
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax of `m / temperature`.
pub fn row_log_softmax(m: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    let mut out = m.scale(1.0 / temperature);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

pub fn col_log_softmax(m: &Matrix, temperature: f64) -> Result<Matrix> {
    Ok(row_log_softmax(&m.transpose(), temperature)?.transpose())
}

/// Row-wise softmax of `m / temperature`; the row max is subtracted before exponentiating.
pub fn row_softmax(m: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    let mut out = m.scale(1.0 / temperature);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

pub fn col_softmax(m: &Matrix, temperature: f64) -> Result<Matrix> {
    Ok(row_softmax(&m.transpose(), temperature)?.transpose())
}

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    for (k, &x) in v.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(NcuError::InvalidDistribution(format!("{name}[{k}] = {x}")));
        }
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(NcuError::InvalidDistribution(format!("{name} sums to {total}")));
    }
    Ok(())
}

/// `KL(p ‖ q)` in nats, with `0 · log 0 = 0`.
///
/// `q` may vanish only where `p` does; otherwise the divergence is infinite and
/// the input is rejected.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(NcuError::DimensionMismatch {
            op: "kl_divergence",
            detail: format!("p has {} entries, q has {}", p.len(), q.len()),
        });
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    if let Some(k) = p.iter().zip(q).position(|(&pk, &qk)| pk > 0.0 && qk == 0.0) {
        return Err(NcuError::InvalidDistribution(format!("q[{k}] = 0 where p[{k}] > 0")));
    }
    Ok(kl_unchecked(p, q).max(0.0))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pk, _)| pk > 0.0).map(|(&pk, &qk)| pk * (pk / qk).ln()).sum()
}

/// `Σ p log p` with `0 · log 0 = 0` (negative entropy).
pub fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum()
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
