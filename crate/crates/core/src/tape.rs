//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node returns the gradient of that node with
//! respect to every node that (transitively) depends on a trainable leaf.
//! Binary element-wise ops broadcast dimensions of size 1.

use crate::tensor::{sigmoid, softplus, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Sqrt(Var),
    Transpose(Var),
    SumRows(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
        x.max(y)
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    let mut out = Mat::zeros(r, c);
    for i in 0..r {
        let ia = if a.rows() == 1 { 0 } else { i };
        let ib = if b.rows() == 1 { 0 } else { i };
        for j in 0..c {
            let ja = if a.cols() == 1 { 0 } else { j };
            let jb = if b.cols() == 1 { 0 } else { j };
            out[(i, j)] = f(a[(ia, ja)], b[(ib, jb)]);
        }
    }
    out
}

/// Sum `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g;
    }
    let mut out = Mat::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        let oi = if shape.0 == 1 { 0 } else { i };
        for j in 0..g.cols() {
            let oj = if shape.1 == 1 { 0 } else { j };
            out[(oi, oj)] += g[(i, j)];
        }
    }
    out
}

fn layer_norm_rows(x: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let (r, c) = x.shape();
    let mut out = Mat::zeros(r, c);
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in out.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Mat::scalar(v))
    }

    /// Copy of `v`'s value cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push_op(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push_op(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push_op(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x / y);
        self.push_op(value, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scaled(c);
        self.push_op(value, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push_op(value, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push_op(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push_op(value, Op::Log(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push_op(value, Op::Softplus(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push_op(value, Op::Relu(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push_op(value, Op::Sqrt(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push_op(value, Op::Transpose(a), &[a])
    }

    /// Column sums as a `1 × cols` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        self.push_op(out, Op::SumRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        self.push_op(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push_op(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push_op(out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Per-row standardisation `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (value, _) = layer_norm_rows(self.value(a), eps);
        self.push_op(value, Op::LayerNormRows(a, eps), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Mat::hstack(&mats);
        self.push_op(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Mat::vstack(&mats);
        self.push_op(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(idx.len(), m.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(m.row(i));
        }
        self.push_op(out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// The single entry `(i, j)` as a `1 × 1` node.
    pub fn pick(&mut self, a: Var, i: usize, j: usize) -> Var {
        let value = Mat::scalar(self.value(a)[(i, j)]);
        self.push_op(value, Op::Pick(a, i, j), &[a])
    }

    /// Reverse sweep from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let acc = |grads: &mut Vec<Option<Mat>>, v: Var, contrib: Mat| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    if rg(*a) {
                        acc(&mut grads, *a, g.matmul(self.value(*b)));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, g.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, reduce_to(g.clone(), self.value(*a).shape()));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, reduce_to(g, self.value(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, reduce_to(g.clone(), self.value(*a).shape()));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, reduce_to(g.scaled(-1.0), self.value(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if rg(*a) {
                        let d = broadcast_zip(&g, vb, |x, y| x * y);
                        acc(&mut grads, *a, reduce_to(d, va.shape()));
                    }
                    if rg(*b) {
                        let d = broadcast_zip(&g, va, |x, y| x * y);
                        acc(&mut grads, *b, reduce_to(d, vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if rg(*a) {
                        let d = broadcast_zip(&g, vb, |x, y| x / y);
                        acc(&mut grads, *a, reduce_to(d, va.shape()));
                    }
                    if rg(*b) {
                        // d(a/b)/db = −out / b
                        let q = broadcast_zip(&node.value, vb, |o, y| -o / y);
                        let d = broadcast_zip(&g, &q, |x, y| x * y);
                        acc(&mut grads, *b, reduce_to(d, vb.shape()));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scaled(*c)),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => acc(&mut grads, *a, g.zip_map(self.value(*a), |x, y| x / y)),
                Op::Softplus(a) => acc(&mut grads, *a, g.zip_map(self.value(*a), |x, y| x * sigmoid(y))),
                Op::Relu(a) => {
                    acc(&mut grads, *a, g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }))
                }
                Op::Sqrt(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| 0.5 * x / y)),
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::SumRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).copy_from_slice(g.data());
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Mat::filled(r, c, g.item()));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let s: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..y.cols() {
                            d[(i, j)] = y[(i, j)] * (g[(i, j)] - s);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let s: f64 = g.row(i).iter().sum();
                        for j in 0..y.cols() {
                            d[(i, j)] = g[(i, j)] - y[(i, j)].exp() * s;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNormRows(a, eps) => {
                    let (xhat, inv_std) = layer_norm_rows(self.value(*a), *eps);
                    let c = xhat.cols() as f64;
                    let mut d = Mat::zeros(xhat.rows(), xhat.cols());
                    for i in 0..xhat.rows() {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mg = gr.iter().sum::<f64>() / c;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c;
                        for j in 0..xhat.cols() {
                            d[(i, j)] = inv_std[i] * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        if rg(p) {
                            let mut d = Mat::zeros(r, c);
                            for i in 0..r {
                                d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                            }
                            acc(&mut grads, p, d);
                        }
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        if rg(p) {
                            let d = Mat::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                            acc(&mut grads, p, d);
                        }
                        off += r;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    for (o, &i) in idx.iter().enumerate() {
                        for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                            *dv += gv;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Pick(a, i, j) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    d[(*i, *j)] = g.item();
                    acc(&mut grads, *a, d);
                }
            }
        }
        Gradients { grads }
    }
}
