use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderParams, ParamGroup, ParamId};
use crate::numcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam without weight decay over a fixed set of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    /// `(id, first moment, second moment)` in canonical parameter order.
    pub slots: Vec<(ParamId, Matrix, Matrix)>,
}

impl Adam {
    pub fn new(hyper: AdamHyper, params: &EncoderParams, groups: &[ParamGroup]) -> Self {
        let slots = ParamId::ALL
            .into_iter()
            .filter(|id| groups.contains(&id.group()))
            .map(|id| {
                let (r, c) = params.tensor(id).shape();
                (id, Matrix::zeros(r, c), Matrix::zeros(r, c))
            })
            .collect();
        Self { hyper, step: 0, slots }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().map(|s| s.0)
    }

    /// One update; `grad(id)` returns the gradient for each tracked tensor.
    pub fn update(&mut self, params: &mut EncoderParams, mut grad: impl FnMut(ParamId) -> Matrix) {
        self.step += 1;
        let AdamHyper { lr, beta1, beta2, eps } = self.hyper;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, m, v) in &mut self.slots {
            let g = grad(*id);
            let w = params.tensor_mut(*id).as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for k in 0..w.len() {
                let gk = g.as_slice()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}
