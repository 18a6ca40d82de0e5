//! Tape-based reverse-mode differentiation over matrix values.
//!
//! A [`Graph`] records every primitive as it is evaluated. The reverse pass
//! walks the tape in exact reverse order and accumulates cotangents
//! additively, so gradients for a parameter used in several places add up in
//! a fixed order. Replaying the tape from its leaves reproduces every stored
//! value bitwise.

use super::matrix::{self, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Owns all parameters of a model. Gradients are zeroed between steps and
/// filled by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Constant leaf.
    Input,
    /// Differentiable leaf bound to a store parameter.
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    LayerNorm(NodeId),
    MaskedSoftmax(NodeId, Matrix),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElem(..) => "mul_elem",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Abs(_) => "abs",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::LayerNorm(_) => "layer_norm",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Recorded forward computation. One graph per training step; build, read
/// values, run [`Graph::backward`] once, drop.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Op-name histogram, for structural comparisons of two wirings.
    pub fn op_histogram(&self) -> std::collections::BTreeMap<&'static str, usize> {
        let mut h = std::collections::BTreeMap::new();
        for n in &self.nodes {
            *h.entry(n.op.name()).or_insert(0) += 1;
        }
        h
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = store.value(id).clone();
        self.push(Op::Param(id), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matrix::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matrix::add(self.value(a), self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matrix::sub(self.value(a), self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matrix::mul_elem(self.value(a), self.value(b));
        self.push(Op::MulElem(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = matrix::scale(self.value(a), c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = matrix::add_bias(self.value(a), self.value(bias));
        self.push(Op::AddBias(a, bias), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = matrix::relu(self.value(a));
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = matrix::sigmoid(self.value(a));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = matrix::softplus(self.value(a));
        self.push(Op::Softplus(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = matrix::abs(self.value(a));
        self.push(Op::Abs(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = matrix::transpose(self.value(a));
        self.push(Op::Transpose(a), v)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let src = self.value(a);
        assert_eq!(
            src.len(),
            rows * cols,
            "reshape: {}x{} cannot become {rows}x{cols}",
            src.rows(),
            src.cols()
        );
        let v = Matrix::from_vec(rows, cols, src.data().to_vec());
        self.push(Op::Reshape(a), v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = matrix::concat_rows(&values);
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = matrix::slice_rows(self.value(a), start, len);
        self.push(Op::SliceRows(a, start, len), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = matrix::slice_cols(self.value(a), start, len);
        self.push(Op::SliceCols(a, start, len), v)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = matrix::gather_rows(self.value(a), idx);
        self.push(Op::GatherRows(a, idx.to_vec()), v)
    }

    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let v = matrix::layer_norm(self.value(a));
        self.push(Op::LayerNorm(a), v)
    }

    /// Renormalizing masked softmax; masked entries are exactly zero and
    /// all-masked rows come back all-zero.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Matrix) -> NodeId {
        let v = matrix::masked_softmax(self.value(a), &mask).probs;
        self.push(Op::MaskedSoftmax(a, mask), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0;
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push(Op::Sum(a), Matrix::from_vec(1, 1, vec![acc]))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let n = m.len().max(1) as f64;
        let mut acc = 0.0;
        for &v in m.data() {
            acc += v;
        }
        self.push(Op::Mean(a), Matrix::from_vec(1, 1, vec![acc / n]))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        assert_eq!(m.shape(), (1, 1), "node is {}x{}, not scalar", m.rows(), m.cols());
        m.data()[0]
    }

    /// Re-executes every recorded op from the stored leaf values and checks
    /// each node's value is reproduced bitwise.
    pub fn replay_bitwise(&self) -> bool {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input | Op::Param(_) => node.value.clone(),
                Op::MatMul(a, b) => matrix::matmul(&values[a.0], &values[b.0]),
                Op::Add(a, b) => matrix::add(&values[a.0], &values[b.0]),
                Op::Sub(a, b) => matrix::sub(&values[a.0], &values[b.0]),
                Op::MulElem(a, b) => matrix::mul_elem(&values[a.0], &values[b.0]),
                Op::Scale(a, c) => matrix::scale(&values[a.0], *c),
                Op::AddBias(a, b) => matrix::add_bias(&values[a.0], &values[b.0]),
                Op::Relu(a) => matrix::relu(&values[a.0]),
                Op::Sigmoid(a) => matrix::sigmoid(&values[a.0]),
                Op::Softplus(a) => matrix::softplus(&values[a.0]),
                Op::Abs(a) => matrix::abs(&values[a.0]),
                Op::Transpose(a) => matrix::transpose(&values[a.0]),
                Op::Reshape(a) => Matrix::from_vec(
                    node.value.rows(),
                    node.value.cols(),
                    values[a.0].data().to_vec(),
                ),
                Op::ConcatRows(parts) => {
                    let vs: Vec<&Matrix> = parts.iter().map(|p| &values[p.0]).collect();
                    matrix::concat_rows(&vs)
                }
                Op::SliceRows(a, s, l) => matrix::slice_rows(&values[a.0], *s, *l),
                Op::SliceCols(a, s, l) => matrix::slice_cols(&values[a.0], *s, *l),
                Op::GatherRows(a, idx) => matrix::gather_rows(&values[a.0], idx),
                Op::LayerNorm(a) => matrix::layer_norm(&values[a.0]),
                Op::MaskedSoftmax(a, mask) => matrix::masked_softmax(&values[a.0], mask).probs,
                Op::Sum(a) => {
                    let mut acc = 0.0;
                    for &v in values[a.0].data() {
                        acc += v;
                    }
                    Matrix::from_vec(1, 1, vec![acc])
                }
                Op::Mean(a) => {
                    let m = &values[a.0];
                    let n = m.len().max(1) as f64;
                    let mut acc = 0.0;
                    for &v in m.data() {
                        acc += v;
                    }
                    Matrix::from_vec(1, 1, vec![acc / n])
                }
            };
            if !v.bit_eq(&node.value) {
                return false;
            }
            values.push(v);
        }
        true
    }

    /// Reverse pass from `output` seeded with `seed`. Parameter gradients are
    /// accumulated additively into `store`; call `store.zero_grads()` first
    /// for a fresh step.
    pub fn backward(&self, output: NodeId, seed: Matrix, store: &mut ParamStore) {
        assert!(
            output.0 < self.nodes.len(),
            "backward requested for node {} but only {} recorded",
            output.0,
            self.nodes.len()
        );
        assert_eq!(
            seed.shape(),
            self.nodes[output.0].value.shape(),
            "seed shape {:?} does not match output shape {:?}",
            seed.shape(),
            self.nodes[output.0].value.shape()
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let slot = &mut store.get_mut(*pid).grad;
                    for (o, &v) in slot.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = matrix::matmul_bt(&g, &self.nodes[b.0].value);
                    let db = matrix::matmul_at(&self.nodes[a.0].value, &g);
                    accum(&mut grads[a.0], da);
                    accum(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accum(&mut grads[a.0], g.clone());
                    accum(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads[b.0], matrix::scale(&g, -1.0));
                    accum(&mut grads[a.0], g);
                }
                Op::MulElem(a, b) => {
                    let da = matrix::mul_elem(&g, &self.nodes[b.0].value);
                    let db = matrix::mul_elem(&g, &self.nodes[a.0].value);
                    accum(&mut grads[a.0], da);
                    accum(&mut grads[b.0], db);
                }
                Op::Scale(a, c) => accum(&mut grads[a.0], matrix::scale(&g, *c)),
                Op::AddBias(a, bias) => {
                    let cols = g.cols();
                    let mut db = Matrix::zeros(1, cols);
                    for i in 0..g.rows() {
                        let row = g.row(i);
                        for j in 0..cols {
                            db.data_mut()[j] += row[j];
                        }
                    }
                    accum(&mut grads[a.0], g);
                    accum(&mut grads[bias.0], db);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut dx = g;
                    for (d, &xi) in dx.data_mut().iter_mut().zip(x.data()) {
                        if xi <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accum(&mut grads[a.0], dx);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut dx = g;
                    for (d, &yi) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= yi * (1.0 - yi);
                    }
                    accum(&mut grads[a.0], dx);
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut dx = g;
                    for (d, &xi) in dx.data_mut().iter_mut().zip(x.data()) {
                        *d *= matrix::sigmoid_scalar(xi);
                    }
                    accum(&mut grads[a.0], dx);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut dx = g;
                    for (d, &xi) in dx.data_mut().iter_mut().zip(x.data()) {
                        *d *= if xi > 0.0 {
                            1.0
                        } else if xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    accum(&mut grads[a.0], dx);
                }
                Op::Transpose(a) => accum(&mut grads[a.0], matrix::transpose(&g)),
                Op::Reshape(a) => {
                    let src = &self.nodes[a.0].value;
                    let dx = Matrix::from_vec(src.rows(), src.cols(), g.data().to_vec());
                    accum(&mut grads[a.0], dx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        if rows > 0 {
                            accum(&mut grads[p.0], matrix::slice_rows(&g, start, rows));
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let src = &self.nodes[a.0].value;
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..*len {
                        dx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accum(&mut grads[a.0], dx);
                }
                Op::SliceCols(a, start, len) => {
                    let src = &self.nodes[a.0].value;
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        let grow = g.row(i);
                        let drow = dx.row_mut(i);
                        drow[*start..*start + *len].copy_from_slice(grow);
                    }
                    accum(&mut grads[a.0], dx);
                }
                Op::GatherRows(a, idx) => {
                    let src = &self.nodes[a.0].value;
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        let grow = g.row(r);
                        let drow = dx.row_mut(i);
                        for (d, &v) in drow.iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                    accum(&mut grads[a.0], dx);
                }
                Op::LayerNorm(a) => {
                    let x = &self.nodes[a.0].value;
                    accum(&mut grads[a.0], layer_norm_backward(x, &g));
                }
                Op::MaskedSoftmax(a, _mask) => {
                    let y = &node.value;
                    accum(&mut grads[a.0], softmax_backward(y, &g));
                }
                Op::Sum(a) => {
                    let src = &self.nodes[a.0].value;
                    let s = g.data()[0];
                    let dx = Matrix::from_fn(src.rows(), src.cols(), |_, _| s);
                    accum(&mut grads[a.0], dx);
                }
                Op::Mean(a) => {
                    let src = &self.nodes[a.0].value;
                    let s = g.data()[0] / src.len().max(1) as f64;
                    let dx = Matrix::from_fn(src.rows(), src.cols(), |_, _| s);
                    accum(&mut grads[a.0], dx);
                }
            }
        }
    }
}

fn accum(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        None => *slot = Some(delta),
        Some(m) => {
            for (o, &v) in m.data_mut().iter_mut().zip(delta.data()) {
                *o += v;
            }
        }
    }
}

fn layer_norm_backward(x: &Matrix, g: &Matrix) -> Matrix {
    let d = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let xrow = x.row(i);
        let grow = g.row(i);
        let mut mean = 0.0;
        for &v in xrow {
            mean += v;
        }
        mean /= d;
        let mut var = 0.0;
        for &v in xrow {
            let c = v - mean;
            var += c * c;
        }
        var /= d;
        let inv = 1.0 / (var + matrix::LAYER_NORM_EPS).sqrt();
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for j in 0..x.cols() {
            let xn = (xrow[j] - mean) * inv;
            g_mean += grow[j];
            gx_mean += grow[j] * xn;
        }
        g_mean /= d;
        gx_mean /= d;
        let drow = dx.row_mut(i);
        for j in 0..x.cols() {
            let xn = (xrow[j] - mean) * inv;
            drow[j] = inv * (grow[j] - g_mean - xn * gx_mean);
        }
    }
    dx
}

/// Row-wise softmax Jacobian action: dz = y * (g - sum(g * y)). Rows that were
/// fully masked have y = 0 and therefore receive zero gradient, and masked
/// positions inside a live row likewise contribute nothing.
fn softmax_backward(y: &Matrix, g: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let yrow = y.row(i);
        let grow = g.row(i);
        let mut dot = 0.0;
        for j in 0..y.cols() {
            dot += grow[j] * yrow[j];
        }
        let drow = dx.row_mut(i);
        for j in 0..y.cols() {
            drow[j] = yrow[j] * (grow[j] - dot);
        }
    }
    dx
}

/// x + relu(x W1 + b1) W2 + b2 — the residual two-layer feed-forward block.
/// With W2 and b2 zero this is the identity on x.
pub fn ffn_residual(
    g: &mut Graph,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> NodeId {
    let h = mlp2(g, x, w1, b1, w2, b2);
    g.add(x, h)
}

/// relu(x W1 + b1) W2 + b2 without the residual.
pub fn mlp2(g: &mut Graph, x: NodeId, w1: NodeId, b1: NodeId, w2: NodeId, b2: NodeId) -> NodeId {
    let h = g.matmul(x, w1);
    let h = g.add_bias(h, b1);
    let h = g.relu(h);
    let h = g.matmul(h, w2);
    g.add_bias(h, b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // d/dx (x^T x) at x = [1, 2] is [2, 4].
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_vec(2, 1, vec![1.0, 2.0]));
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let xt = g.transpose(xn);
        let y = g.matmul(xt, xn);
        g.backward(y, Matrix::from_vec(1, 1, vec![1.0]), &mut store);
        assert_eq!(store.get(x).grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn param_reuse_accumulates() {
        // y = sum(x) + sum(x) -> dx = 2 everywhere.
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]));
        let mut g = Graph::new();
        let a = g.param(&store, x);
        let s1 = g.sum(a);
        let s2 = g.sum(a);
        let y = g.add(s1, s2);
        g.backward(y, Matrix::from_vec(1, 1, vec![1.0]), &mut store);
        assert_eq!(store.get(x).grad.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn masked_position_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_vec(1, 3, vec![0.3, -0.4, 0.9]));
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let mask = Matrix::from_vec(1, 3, vec![0.0, 1.0, 0.0]);
        let y = g.masked_softmax(xn, mask);
        let s = g.sum(y);
        g.backward(s, Matrix::from_vec(1, 1, vec![1.0]), &mut store);
        assert_eq!(store.get(x).grad.data()[1], 0.0);
    }

    #[test]
    fn ffn_zero_second_layer_is_identity() {
        let mut store = ParamStore::new();
        let d = 4;
        let w1 = store.add("w1", Matrix::from_fn(d, d, |i, j| ((i + j) as f64).sin() * 0.3));
        let b1 = store.add("b1", Matrix::from_fn(1, d, |_, j| j as f64 * 0.1));
        let w2 = store.add("w2", Matrix::zeros(d, d));
        let b2 = store.add("b2", Matrix::zeros(1, d));
        let mut g = Graph::new();
        let x = g.input(Matrix::from_fn(3, d, |i, j| (i * d + j) as f64 * 0.25 - 1.0));
        let [w1n, b1n, w2n, b2n] = [w1, b1, w2, b2].map(|p| g.param(&store, p));
        let y = ffn_residual(&mut g, x, w1n, b1n, w2n, b2n);
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn replay_is_bitwise() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64).cos()));
        let mut g = Graph::new();
        let x = g.input(Matrix::from_fn(2, 3, |i, j| (i + j) as f64 * 0.7 - 0.4));
        let wn = g.param(&store, w);
        let h = g.matmul(x, wn);
        let h = g.layer_norm(h);
        let h = g.sigmoid(h);
        let _ = g.mean(h);
        assert!(g.replay_bitwise());
    }

    #[test]
    #[should_panic(expected = "backward requested for node")]
    fn backward_without_forward_panics() {
        let g = Graph::new();
        let mut store = ParamStore::new();
        g.backward(NodeId(0), Matrix::zeros(1, 1), &mut store);
    }
}
