//! A small reverse-mode evaluation graph over [`Matrix`] values.
//!
//! Every op computes its value eagerly when it is recorded; [`Graph::backward`]
//! then walks the nodes in reverse insertion order, which is a valid
//! topological order because inputs are always recorded before their users.

use crate::numcore::kernels::{log_sum_exp, sigmoid, softplus};
use crate::numcore::Matrix;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    DivByScalar(Var, Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    NormalizeRows(Var),
    RowLogSoftmax(Var),
    ColLogSoftmax(Var),
    RowDot(Var, Var),
    HCat(Var, Var),
    BroadcastRows(Var),
    Reshape(Var),
    Transpose(Var),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    ClampedExp(Var, f64, f64),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of `shape` if the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMulNT(a, b), rg)
    }

    /// `a + 1·bias` where `bias` is a single row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.shape(), (1, va.cols()), "bias must be 1 x cols");
        let mut value = va.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(vb.row(0)) {
                *x += b;
            }
        }
        let rg = self.needs(&[a, bias]);
        self.push(value, Op::AddRowBias(a, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.needs(&[a]);
        self.push(value, Op::AddConst(a), rg)
    }

    /// `a / s` for a 1×1 node `s`.
    pub fn div_by_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = self.value(a).scale(1.0 / sv);
        let rg = self.needs(&[a, s]);
        self.push(value, Op::DivByScalar(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.needs(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.needs(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// Row-wise L2 normalization. Panics on a zero row; callers validate inputs first.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let value = crate::numcore::l2_normalize_rows(self.value(a))
            .expect("normalize_rows on a zero row");
        let rg = self.needs(&[a]);
        self.push(value, Op::NormalizeRows(a), rg)
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.needs(&[a]);
        self.push(value, Op::RowLogSoftmax(a), rg)
    }

    pub fn col_log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut t = va.transpose();
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = t.transpose();
        let rg = self.needs(&[a]);
        self.push(value, Op::ColLogSoftmax(a), rg)
    }

    /// Per-row inner products, as an `n × 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_dot shape");
        let value = Matrix::from_fn(va.rows(), 1, |i, _| crate::numcore::dot(va.row(i), vb.row(i)));
        let rg = self.needs(&[a, b]);
        self.push(value, Op::RowDot(a, b), rg)
    }

    pub fn hcat(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hcat(self.value(b));
        let rg = self.needs(&[a, b]);
        self.push(value, Op::HCat(a, b), rg)
    }

    /// Repeats a `1 × k` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "broadcast_rows expects a single row");
        let value = Matrix::from_fn(n, va.cols(), |_, j| va[(0, j)]);
        let rg = self.needs(&[a]);
        self.push(value, Op::BroadcastRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        let rg = self.needs(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        let rg = self.needs(&[a]);
        self.push(value, Op::SelectRows(a, idx.to_vec()), rg)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// `clamp(exp(x), lo, hi)`; no gradient flows while the clamp is active.
    pub fn clamped_exp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.exp().clamp(lo, hi));
        let rg = self.needs(&[a]);
        self.push(value, Op::ClampedExp(a, lo, hi), rg)
    }

    /// Reverse pass from the 1×1 node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, g.matmul_nt(val(*b)));
                }
                if rg(*b) {
                    acc(*b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if rg(*a) {
                    acc(*a, g.matmul(val(*b)));
                }
                if rg(*b) {
                    acc(*b, g.matmul_tn(val(*a)));
                }
            }
            Op::AddRowBias(a, bias) => {
                if rg(*bias) {
                    let sums = g.col_sums();
                    let cols = sums.len();
                    acc(*bias, Matrix::from_vec(1, cols, sums).expect("finite bias grad"));
                }
                acc(*a, g.clone());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if rg(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::DivByScalar(a, s) => {
                let sv = val(*s)[(0, 0)];
                if rg(*s) {
                    let inner: f64 = g.as_slice().iter().zip(val(*a).as_slice()).map(|(x, y)| x * y).sum();
                    acc(*s, Matrix::filled(1, 1, -inner / (sv * sv)));
                }
                acc(*a, g.scale(1.0 / sv));
            }
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |x, y| x * sigmoid(y))),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::NormalizeRows(a) => {
                let (input, out) = (val(*a), &node.value);
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let norm = input.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let proj = crate::numcore::dot(out.row(i), g.row(i));
                    for ((dv, &y), &gy) in d.row_mut(i).iter_mut().zip(out.row(i)).zip(g.row(i)) {
                        *dv = (gy - y * proj) / norm;
                    }
                }
                acc(*a, d);
            }
            Op::RowLogSoftmax(a) => {
                let out = &node.value;
                let mut d = g.clone();
                for i in 0..out.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for (dv, &y) in d.row_mut(i).iter_mut().zip(out.row(i)) {
                        *dv -= y.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::ColLogSoftmax(a) => {
                let out = &node.value;
                let totals = g.col_sums();
                let d = Matrix::from_fn(out.rows(), out.cols(), |i, j| {
                    g[(i, j)] - out[(i, j)].exp() * totals[j]
                });
                acc(*a, d);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if rg(*a) {
                    acc(*a, Matrix::from_fn(vb.rows(), vb.cols(), |i, j| g[(i, 0)] * vb[(i, j)]));
                }
                if rg(*b) {
                    acc(*b, Matrix::from_fn(va.rows(), va.cols(), |i, j| g[(i, 0)] * va[(i, j)]));
                }
            }
            Op::HCat(a, b) => {
                let split = val(*a).cols();
                if rg(*a) {
                    acc(*a, Matrix::from_fn(g.rows(), split, |i, j| g[(i, j)]));
                }
                if rg(*b) {
                    let cols = val(*b).cols();
                    acc(*b, Matrix::from_fn(g.rows(), cols, |i, j| g[(i, split + j)]));
                }
            }
            Op::BroadcastRows(a) => {
                let sums = g.col_sums();
                let cols = sums.len();
                acc(*a, Matrix::from_vec(1, cols, sums).expect("finite broadcast grad"));
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, g.clone().reshape(r, c));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SelectRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (dv, &gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::ClampedExp(a, lo, hi) => {
                let d = g.zip_map(val(*a), |x, y| {
                    let e = y.exp();
                    if e > *lo && e < *hi {
                        x * e
                    } else {
                        0.0
                    }
                });
                acc(*a, d);
            }
        }
    }
}
