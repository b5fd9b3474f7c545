use serde::{Deserialize, Serialize};

use super::{marginal_residual, TransportPlan, TransportProblem};
use crate::error::Result;
use crate::numcore::kernels::log_sum_exp;
use crate::numcore::Matrix;

/// Below this `ε` the iterations run on log-potentials.
pub const LOG_DOMAIN_BELOW: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub max_iters: usize,
    /// L∞ tolerance on the marginals.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { max_iters: 1000, tol: 1e-9 }
    }
}

/// Sinkhorn–Knopp on the masked Gibbs kernel `K = M ⊙ exp(−C/ε)`.
///
/// The returned plan is `diag(u)·K·diag(w)`; masked cells are exactly zero.
/// When the iteration budget runs out the last iterate is returned with
/// `converged = false`.
pub fn masked_sinkhorn(problem: &TransportProblem, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (plan, iterations) = if problem.epsilon < LOG_DOMAIN_BELOW {
        log_domain(problem, cfg)
    } else {
        scaling_domain(problem, cfg)
    };
    let marginal_residual = marginal_residual(&plan, &problem.mu, &problem.nu);
    Ok(TransportPlan { plan, iterations, marginal_residual, converged: marginal_residual <= cfg.tol })
}

fn scaling_domain(p: &TransportProblem, cfg: &SinkhornConfig) -> (Matrix, usize) {
    let (n, m) = p.cost.shape();
    let kernel = p.cost.zip_map(&p.mask, |c, keep| if keep == 0.0 { 0.0 } else { (-c / p.epsilon).exp() });
    let mut u = vec![1.0; n];
    let mut w = vec![1.0; m];
    let mut kw = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        for (i, out) in kw.iter_mut().enumerate() {
            *out = kernel.row(i).iter().zip(&w).map(|(k, x)| k * x).sum();
        }
        // Columns are exact after each w-update, so the row residual is the whole story.
        let residual = (0..n).map(|i| (u[i] * kw[i] - p.mu[i]).abs()).fold(0.0, f64::max);
        if iterations > 0 && residual <= cfg.tol {
            break;
        }
        for i in 0..n {
            u[i] = p.mu[i] / kw[i];
        }
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            for (acc, k) in ktu.iter_mut().zip(kernel.row(i)) {
                *acc += k * u[i];
            }
        }
        for j in 0..m {
            w[j] = p.nu[j] / ktu[j];
        }
        iterations += 1;
    }
    let plan = Matrix::from_fn(n, m, |i, j| u[i] * kernel[(i, j)] * w[j]);
    (plan, iterations)
}

fn log_domain(p: &TransportProblem, cfg: &SinkhornConfig) -> (Matrix, usize) {
    let (n, m) = p.cost.shape();
    let eps = p.epsilon;
    // Scaled log-kernel; masked cells are −∞ and drop out of every log-sum-exp.
    let log_k = p.cost.zip_map(&p.mask, |c, keep| if keep == 0.0 { f64::NEG_INFINITY } else { -c / eps });
    let log_mu: Vec<f64> = p.mu.iter().map(|x| x.ln()).collect();
    let log_nu: Vec<f64> = p.nu.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut scratch_row = vec![0.0; m];
    let mut scratch_col = vec![0.0; n];
    let mut iterations = 0;

    let row_mass = |f: &[f64], g: &[f64], i: usize, scratch: &mut [f64]| -> f64 {
        for j in 0..m {
            scratch[j] = log_k[(i, j)] + g[j];
        }
        (f[i] + log_sum_exp(scratch)).exp()
    };

    while iterations < cfg.max_iters {
        if iterations > 0 {
            let residual =
                (0..n).map(|i| (row_mass(&f, &g, i, &mut scratch_row) - p.mu[i]).abs()).fold(0.0, f64::max);
            if residual <= cfg.tol {
                break;
            }
        }
        for i in 0..n {
            for j in 0..m {
                scratch_row[j] = log_k[(i, j)] + g[j];
            }
            f[i] = log_mu[i] - log_sum_exp(&scratch_row);
        }
        for j in 0..m {
            for i in 0..n {
                scratch_col[i] = log_k[(i, j)] + f[i];
            }
            g[j] = log_nu[j] - log_sum_exp(&scratch_col);
        }
        iterations += 1;
    }
    let plan = Matrix::from_fn(n, m, |i, j| {
        let lk = log_k[(i, j)];
        if lk == f64::NEG_INFINITY {
            0.0
        } else {
            (f[i] + lk + g[j]).exp()
        }
    });
    (plan, iterations)
}
