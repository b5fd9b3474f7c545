//! Toy two-tower encoders, the trainable temperature, and the negative-semantics head.
//!
//! Both towers are `in → hidden → embed` MLPs with a tanh hidden layer and
//! L2-normalized outputs. The negative head maps a text embedding `t` to
//! `normalize([t ; p_1 ; … ; p_m] · W + b)` where the `p_k` are shared learnable
//! context vectors.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NcuError, Result};
use crate::numcore::{l2_normalize_rows, Graph, Matrix, Var};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;

/// Unit-norm tolerance for embedding rows.
pub const UNIT_NORM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub image_in: usize,
    pub text_in: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Number of shared context vectors in the negative head.
    pub neg_context: usize,
}

impl ModelDims {
    pub fn new(image_in: usize, text_in: usize) -> Self {
        Self { image_in, text_in, hidden: 64, embed: 32, neg_context: 4 }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.image_in, self.text_in, self.hidden, self.embed, self.neg_context];
        if all.contains(&0) {
            return Err(NcuError::InvalidDims(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Which block of parameters a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    ImageTower,
    TextTower,
    Temperature,
    NegHead,
}

/// Canonical identifier of every trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    ImageW1,
    ImageB1,
    ImageW2,
    ImageB2,
    TextW1,
    TextB1,
    TextW2,
    TextB2,
    LogTau,
    NegContext,
    NegMixW,
    NegMixB,
}

impl ParamId {
    pub const ALL: [ParamId; 12] = [
        ParamId::ImageW1,
        ParamId::ImageB1,
        ParamId::ImageW2,
        ParamId::ImageB2,
        ParamId::TextW1,
        ParamId::TextB1,
        ParamId::TextW2,
        ParamId::TextB2,
        ParamId::LogTau,
        ParamId::NegContext,
        ParamId::NegMixW,
        ParamId::NegMixB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::ImageW1 => "image.w1",
            ParamId::ImageB1 => "image.b1",
            ParamId::ImageW2 => "image.w2",
            ParamId::ImageB2 => "image.b2",
            ParamId::TextW1 => "text.w1",
            ParamId::TextB1 => "text.b1",
            ParamId::TextW2 => "text.w2",
            ParamId::TextB2 => "text.b2",
            ParamId::LogTau => "log_tau",
            ParamId::NegContext => "neg.context",
            ParamId::NegMixW => "neg.mix_w",
            ParamId::NegMixB => "neg.mix_b",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.name() == name)
    }

    pub fn group(self) -> ParamGroup {
        match self {
            ParamId::ImageW1 | ParamId::ImageB1 | ParamId::ImageW2 | ParamId::ImageB2 => {
                ParamGroup::ImageTower
            }
            ParamId::TextW1 | ParamId::TextB1 | ParamId::TextW2 | ParamId::TextB2 => {
                ParamGroup::TextTower
            }
            ParamId::LogTau => ParamGroup::Temperature,
            ParamId::NegContext | ParamId::NegMixW | ParamId::NegMixB => ParamGroup::NegHead,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `in × hidden`
    pub w1: Matrix,
    pub b1: Matrix,
    /// `hidden × embed`
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegHead {
    /// `m × embed`, one shared context vector per row.
    pub context: Matrix,
    /// `(m + 1)·embed × embed`
    pub mix_w: Matrix,
    pub mix_b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: ModelDims,
    pub image: Mlp,
    pub text: Mlp,
    /// 1×1; `τ = clamp(exp(log_tau), 0.01, 1)`.
    pub log_tau: Matrix,
    pub neg_head: NegHead,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn init_mlp(rng: &mut ChaCha8Rng, input: usize, hidden: usize, embed: usize) -> Mlp {
    Mlp {
        w1: uniform_matrix(rng, input, hidden, input),
        b1: uniform_matrix(rng, 1, hidden, input),
        w2: uniform_matrix(rng, hidden, embed, hidden),
        b2: uniform_matrix(rng, 1, embed, hidden),
    }
}

/// Deterministic initialization: every weight and bias is `U(−1/√fan_in, 1/√fan_in)`, `τ = 0.07`.
pub fn init_params(seed: u64, dims: ModelDims) -> Result<EncoderParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = init_mlp(&mut rng, dims.image_in, dims.hidden, dims.embed);
    let text = init_mlp(&mut rng, dims.text_in, dims.hidden, dims.embed);
    let mix_in = (dims.neg_context + 1) * dims.embed;
    let neg_head = NegHead {
        context: uniform_matrix(&mut rng, dims.neg_context, dims.embed, dims.embed),
        mix_w: uniform_matrix(&mut rng, mix_in, dims.embed, mix_in),
        mix_b: uniform_matrix(&mut rng, 1, dims.embed, mix_in),
    };
    Ok(EncoderParams { dims, image, text, log_tau: Matrix::filled(1, 1, TAU_INIT.ln()), neg_head })
}

impl EncoderParams {
    pub fn tau(&self) -> f64 {
        self.log_tau[(0, 0)].exp().clamp(TAU_MIN, TAU_MAX)
    }

    pub fn tensor(&self, id: ParamId) -> &Matrix {
        match id {
            ParamId::ImageW1 => &self.image.w1,
            ParamId::ImageB1 => &self.image.b1,
            ParamId::ImageW2 => &self.image.w2,
            ParamId::ImageB2 => &self.image.b2,
            ParamId::TextW1 => &self.text.w1,
            ParamId::TextB1 => &self.text.b1,
            ParamId::TextW2 => &self.text.w2,
            ParamId::TextB2 => &self.text.b2,
            ParamId::LogTau => &self.log_tau,
            ParamId::NegContext => &self.neg_head.context,
            ParamId::NegMixW => &self.neg_head.mix_w,
            ParamId::NegMixB => &self.neg_head.mix_b,
        }
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Matrix {
        match id {
            ParamId::ImageW1 => &mut self.image.w1,
            ParamId::ImageB1 => &mut self.image.b1,
            ParamId::ImageW2 => &mut self.image.w2,
            ParamId::ImageB2 => &mut self.image.b2,
            ParamId::TextW1 => &mut self.text.w1,
            ParamId::TextB1 => &mut self.text.b1,
            ParamId::TextW2 => &mut self.text.w2,
            ParamId::TextB2 => &mut self.text.b2,
            ParamId::LogTau => &mut self.log_tau,
            ParamId::NegContext => &mut self.neg_head.context,
            ParamId::NegMixW => &mut self.neg_head.mix_w,
            ParamId::NegMixB => &mut self.neg_head.mix_b,
        }
    }

    /// Total scalar count over the given groups, in canonical order.
    pub fn flat_len(&self, groups: &[ParamGroup]) -> usize {
        ParamId::ALL
            .iter()
            .filter(|id| groups.contains(&id.group()))
            .map(|&id| self.tensor(id).as_slice().len())
            .sum()
    }

    /// Concatenates the tensors of `groups` in canonical order.
    pub fn flatten(&self, groups: &[ParamGroup]) -> Vec<f64> {
        ParamId::ALL
            .iter()
            .filter(|id| groups.contains(&id.group()))
            .flat_map(|&id| self.tensor(id).as_slice().iter().copied())
            .collect()
    }

    /// Inverse of [`EncoderParams::flatten`].
    pub fn set_flat(&mut self, groups: &[ParamGroup], flat: &[f64]) {
        let mut offset = 0;
        for id in ParamId::ALL.iter().filter(|id| groups.contains(&id.group())) {
            let dst = self.tensor_mut(*id).as_mut_slice();
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length");
    }

    /// Records every tensor on `g`; tensors outside `trainable` become constants.
    pub fn bind(&self, g: &mut Graph, trainable: &[ParamGroup]) -> BoundParams {
        let vars = ParamId::ALL.map(|id| {
            let m = self.tensor(id).clone();
            if trainable.contains(&id.group()) {
                g.param(m)
            } else {
                g.constant(m)
            }
        });
        BoundParams { vars, dims: self.dims }
    }
}

/// Graph handles for one [`EncoderParams`] instance.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: [Var; 12],
    pub dims: ModelDims,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn tau(&self, g: &mut Graph) -> Var {
        g.clamped_exp(self.var(ParamId::LogTau), TAU_MIN, TAU_MAX)
    }

    fn tower(&self, g: &mut Graph, x: Var, ids: [ParamId; 4]) -> Var {
        let pre = g.matmul(x, self.var(ids[0]));
        let pre = g.add_row_bias(pre, self.var(ids[1]));
        let hidden = g.tanh(pre);
        let out = g.matmul(hidden, self.var(ids[2]));
        let out = g.add_row_bias(out, self.var(ids[3]));
        g.normalize_rows(out)
    }

    pub fn encode_image(&self, g: &mut Graph, x: Var) -> Var {
        use ParamId::*;
        self.tower(g, x, [ImageW1, ImageB1, ImageW2, ImageB2])
    }

    pub fn encode_text(&self, g: &mut Graph, y: Var) -> Var {
        use ParamId::*;
        self.tower(g, y, [TextW1, TextB1, TextW2, TextB2])
    }

    pub fn neg_text(&self, g: &mut Graph, t: Var) -> Var {
        let n = g.shape(t).0;
        let flat_len = self.dims.neg_context * self.dims.embed;
        let ctx = g.reshape(self.var(ParamId::NegContext), 1, flat_len);
        let ctx = g.broadcast_rows(ctx, n);
        let joined = g.hcat(t, ctx);
        let mixed = g.matmul(joined, self.var(ParamId::NegMixW));
        let mixed = g.add_row_bias(mixed, self.var(ParamId::NegMixB));
        g.normalize_rows(mixed)
    }
}

fn check_cols(op: &'static str, m: &Matrix, expected: usize) -> Result<()> {
    if m.cols() != expected {
        return Err(NcuError::DimensionMismatch {
            op,
            detail: format!("expected {expected} columns, got {}", m.cols()),
        });
    }
    Ok(())
}

fn add_bias(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
}

fn raw_tower(mlp: &Mlp, x: &Matrix) -> Result<Matrix> {
    let mut hidden = x.matmul(&mlp.w1);
    add_bias(&mut hidden, &mlp.b1);
    let hidden = hidden.map(f64::tanh);
    let mut out = hidden.matmul(&mlp.w2);
    add_bias(&mut out, &mlp.b2);
    l2_normalize_rows(&out)
}

pub fn encode_image(params: &EncoderParams, x: &Matrix) -> Result<Matrix> {
    check_cols("encode_image", x, params.dims.image_in)?;
    raw_tower(&params.image, x)
}

pub fn encode_text(params: &EncoderParams, y: &Matrix) -> Result<Matrix> {
    check_cols("encode_text", y, params.dims.text_in)?;
    raw_tower(&params.text, y)
}

pub fn neg_text(params: &EncoderParams, t: &Matrix) -> Result<Matrix> {
    check_cols("neg_text", t, params.dims.embed)?;
    let head = &params.neg_head;
    let flat = head.context.clone().reshape(1, head.context.as_slice().len());
    let joined = t.hcat(&Matrix::from_fn(t.rows(), flat.cols(), |_, j| flat[(0, j)]));
    let mut mixed = joined.matmul(&head.mix_w);
    add_bias(&mut mixed, &head.mix_b);
    l2_normalize_rows(&mixed)
}

/// `S_ij = ⟨v_i, t_j⟩`.
pub fn similarity_matrix(v: &Matrix, t: &Matrix) -> Result<Matrix> {
    if v.cols() != t.cols() {
        return Err(NcuError::DimensionMismatch {
            op: "similarity_matrix",
            detail: format!("embedding dims {} vs {}", v.cols(), t.cols()),
        });
    }
    Ok(v.matmul_nt(t))
}

pub(crate) fn check_unit_rows(op: &'static str, m: &Matrix) -> Result<()> {
    for i in 0..m.rows() {
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(NcuError::DimensionMismatch {
                op,
                detail: format!("row {i} has norm {norm}, expected unit norm"),
            });
        }
    }
    Ok(())
}

/// Image, text, and optional negative-text embeddings of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub v: Matrix,
    pub t: Matrix,
    pub t_neg: Option<Matrix>,
}

impl EmbeddingBatch {
    pub fn new(v: Matrix, t: Matrix, t_neg: Option<Matrix>) -> Result<Self> {
        let shapes_match = v.shape() == t.shape() && t_neg.as_ref().is_none_or(|n| n.shape() == t.shape());
        if !shapes_match {
            return Err(NcuError::DimensionMismatch {
                op: "EmbeddingBatch::new",
                detail: "V, T and T_neg must share N and d".into(),
            });
        }
        check_unit_rows("EmbeddingBatch::new", &v)?;
        check_unit_rows("EmbeddingBatch::new", &t)?;
        if let Some(n) = &t_neg {
            check_unit_rows("EmbeddingBatch::new", n)?;
        }
        Ok(Self { v, t, t_neg })
    }

    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.v.rows() == 0
    }
}
