//! Explicit reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records operations as they are applied; every recorded node,
//! interior or leaf, can be the target of a gradient query. Leaves may borrow
//! their value (model weights) so recording a forward pass does not copy
//! parameters.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{self, gelu_derivative, row_moments, softmax_in_place, Matrix};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + 1 * bias` with `bias` a single row.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Relu(NodeId),
    /// Row softmax; columns whose flag is `false` get probability zero.
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    RowSums(NodeId),
    Element(NodeId, usize, usize),
    /// Mean over rows of `-log softmax(x)[target]`.
    CrossEntropy(NodeId, Vec<usize>),
}

enum Value<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Value<'a>,
    requires_grad: bool,
}

/// Recording of a computation. Single writer while recording; read-only
/// afterwards.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`; zeros when `id` does not influence the output.
    pub fn get(&self, id: NodeId) -> Matrix {
        match self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
            None => Matrix::zeros(0, 0),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Matrix {
        match self.grads.get_mut(id.0).and_then(Option::take) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        self.nodes[id.0].value.get()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf that gradients flow into.
    pub fn variable(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Leaf, m, true)
    }

    pub fn variable_ref(&mut self, m: &'a Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Borrowed(m),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Leaf, m, false)
    }

    pub fn constant_ref(&mut self, m: &'a Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Borrowed(m),
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    /// `a * b^T`
    pub fn matmul_transposed(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_transposed(self.value(b))?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(Op::MatMulT(a, b), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    /// Adds the `1 x cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left_rows: av.rows(),
                left_cols: av.cols(),
                right_rows: bv.rows(),
                right_cols: bv.cols(),
            });
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (d, &b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *d += b;
            }
        }
        let rg = self.grad_any(&[a, bias]);
        Ok(self.push(Op::AddRow(a, bias), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.grad_any(&[a]);
        self.push(Op::Scale(a, s), v, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).gelu();
        let rg = self.grad_any(&[a]);
        self.push(Op::Gelu(a), v, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        let rg = self.grad_any(&[a]);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        let rg = self.grad_any(&[a]);
        self.push(Op::Softmax(a), v, rg)
    }

    /// Row softmax restricted to the columns flagged `true`; the others are
    /// treated as `-inf` logits.
    pub fn masked_softmax_rows(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        let av = self.value(a);
        if keep.len() != av.cols() {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                left_rows: av.rows(),
                left_cols: av.cols(),
                right_rows: 1,
                right_cols: keep.len(),
            });
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            for (x, &k) in row.iter_mut().zip(keep) {
                if !k {
                    *x = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(Op::Softmax(a), v, rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(x).layer_norm(self.value(gain), self.value(bias), eps)?;
        let rg = self.grad_any(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, v, rg))
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + width > av.cols() {
            return Err(Error::InvalidArgument(alloc::format!(
                "column slice {start}..{} exceeds {} columns",
                start + width,
                av.cols()
            )));
        }
        let v = Matrix::from_fn(av.rows(), width, |r, c| av.get(r, start + c));
        let rg = self.grad_any(&[a]);
        Ok(self.push(Op::SliceCols(a, start), v, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left_rows: rows,
                    left_cols: cols,
                    right_rows: pv.rows(),
                    right_cols: pv.cols(),
                });
            }
            cols += pv.cols();
        }
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                v.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let rg = self.grad_any(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, rg))
    }

    /// Selects rows of `a` by index (repeats allowed). Doubles as the
    /// embedding lookup.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: av.rows(),
            });
        }
        let mut v = Matrix::zeros(rows.len(), av.cols());
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).copy_from_slice(av.row(r));
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(Op::GatherRows(a, rows.to_vec()), v, rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        let rg = self.grad_any(&[a]);
        self.push(Op::SumAll(a), v, rg)
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).row_sums();
        let rg = self.grad_any(&[a]);
        self.push(Op::RowSums(a), v, rg)
    }

    /// The single entry `a[r, c]` as a `1 x 1` node.
    pub fn element(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let av = self.value(a);
        if r >= av.rows() || c >= av.cols() {
            return Err(Error::InvalidArgument(alloc::format!(
                "element ({r}, {c}) outside {}x{}",
                av.rows(),
                av.cols()
            )));
        }
        let v = Matrix::scalar(av.get(r, c));
        let rg = self.grad_any(&[a]);
        Ok(self.push(Op::Element(a, r, c), v, rg))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || targets.is_empty() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left_rows: lv.rows(),
                left_cols: lv.cols(),
                right_rows: targets.len(),
                right_cols: 1,
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                classes: lv.cols(),
            });
        }
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
            loss += lse - row[t];
        }
        let v = Matrix::scalar(loss / targets.len() as f64);
        let rg = self.grad_any(&[logits]);
        Ok(self.push(Op::CrossEntropy(logits, targets.to_vec()), v, rg))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check(output)?;
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::NonScalar {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(upstream) = rest[0].as_ref() else {
                continue;
            };
            self.propagate(&node.op, node.value.get(), upstream, before);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.get().shape()).collect(),
        })
    }

    /// `d(scalar) / d(wrt)`, shaped like `wrt`.
    pub fn gradient(&self, scalar: NodeId, wrt: NodeId) -> Result<Matrix> {
        self.check(wrt)?;
        let mut grads = self.backward(scalar)?;
        Ok(grads.take(wrt))
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, acc: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(acc, *a, matrix::matmul_nt(g, self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(acc, *b, matrix::matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                if self.wants(*a) {
                    accumulate(acc, *a, matrix::matmul_nn(g, self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(acc, *b, matrix::matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate_ref(acc, *a, g);
                }
                if self.wants(*b) {
                    accumulate_ref(acc, *b, g);
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    accumulate_ref(acc, *a, g);
                }
                if self.wants(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(acc, *bias, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(acc, *a, hadamard(g, self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(acc, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::Scale(a, s) => accumulate(acc, *a, g.scale(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= gelu_derivative(xv);
                }
                accumulate(acc, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(acc, *a, d);
            }
            Op::Softmax(a) => {
                // dx = y * (g - <g, y>) per row; masked columns have y = 0
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner = matrix::dot(y, gr);
                    for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *dv = yv * (gv - inner);
                    }
                }
                accumulate(acc, *a, d);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gain_v = self.value(*gain);
                let cols = xv.cols();
                let n = cols as f64;
                let mut dx = Matrix::zeros(xv.rows(), cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..xv.rows() {
                    let (mean, inv_std) = row_moments(xv.row(r), *eps);
                    let gr = g.row(r);
                    for c in 0..cols {
                        xhat[c] = (xv.get(r, c) - mean) * inv_std;
                        dxhat[c] = gr[c] * gain_v.data()[c];
                        dgain.data_mut()[c] += gr[c] * xhat[c];
                        dbias.data_mut()[c] += gr[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = matrix::dot(&dxhat, &xhat) / n;
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = inv_std * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                    }
                }
                if self.wants(*x) {
                    accumulate(acc, *x, dx);
                }
                if self.wants(*gain) {
                    accumulate(acc, *gain, dgain);
                }
                if self.wants(*bias) {
                    accumulate(acc, *bias, dbias);
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(acc, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let d = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        accumulate(acc, p, d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, rows) => {
                let av = self.value(*a);
                let slot = &mut acc[a.0];
                let d = slot.get_or_insert_with(|| Matrix::zeros(av.rows(), av.cols()));
                for (i, &r) in rows.iter().enumerate() {
                    for (dv, &gv) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *dv += gv;
                    }
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(acc, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::RowSums(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(acc, *a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::Element(a, r, c) => {
                let av = self.value(*a);
                let slot = &mut acc[a.0];
                let d = slot.get_or_insert_with(|| Matrix::zeros(av.rows(), av.cols()));
                let cur = d.get(*r, *c);
                d.set(*r, *c, cur + g.get(0, 0));
            }
            Op::CrossEntropy(a, targets) => {
                let lv = self.value(*a);
                let mut d = lv.softmax_rows();
                let scale = g.get(0, 0) / targets.len() as f64;
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(acc, *a, d);
            }
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

fn accumulate(acc: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut acc[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_ref(acc: &mut [Option<Matrix>], id: NodeId, g: &Matrix) {
    match &mut acc[id.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Free-function form of [`Graph::gradient`].
pub fn gradient(g: &Graph<'_>, scalar: NodeId, wrt: NodeId) -> Result<Matrix> {
    g.gradient(scalar, wrt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    /// Central differences of `f` around `x`, step 1e-4.
    fn finite_difference(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-4;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(analytic: &Matrix, numeric: &Matrix) {
        assert_eq!(analytic.shape(), numeric.shape());
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let tol = (1e-4 * a.abs().max(n.abs())).max(1e-6);
            assert!((a - n).abs() <= tol, "analytic {a} vs numeric {n}");
        }
    }

    /// Records `build` on a fresh graph with `x` as the sole variable and
    /// checks the recorded gradient against finite differences.
    fn check_op(x: Matrix, build: impl Fn(&mut Graph<'_>, NodeId) -> NodeId) {
        let eval = |m: &Matrix| {
            let mut g = Graph::new();
            let id = g.variable(m.clone());
            let out = build(&mut g, id);
            g.value(out).get(0, 0)
        };
        let mut g = Graph::new();
        let id = g.variable(x.clone());
        let out = build(&mut g, id);
        let analytic = g.gradient(out, id).unwrap();
        assert_close(&analytic, &finite_difference(&x, eval));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64));
        let s = g.sum_all(x);
        assert_eq!(g.gradient(s, x).unwrap(), Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn cross_entropy_gradient_is_probabilities_minus_one_hot() {
        let logits = Matrix::from_rows(&[&[0.3, -1.2, 2.0, 0.5]]).unwrap();
        let mut g = Graph::new();
        let x = g.variable(logits.clone());
        let loss = g.cross_entropy(x, &[2]).unwrap();
        let grad = g.gradient(loss, x).unwrap();
        let mut expected = logits.softmax_rows();
        expected.set(0, 2, expected.get(0, 2) - 1.0);
        assert!(grad.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(4, 3, &mut rng);
        let b = random(1, 3, &mut rng);
        let x = random(5, 4, &mut rng);
        check_op(x.clone(), |g, x| {
            let w = g.constant(w.clone());
            let y = g.matmul(x, w).unwrap();
            let bias = g.constant(b.clone());
            let y = g.add_row(y, bias).unwrap();
            let y = g.gelu(y);
            let y = g.mul(y, y).unwrap();
            g.sum_all(y)
        });
        check_op(x.clone(), |g, x| {
            let y = g.scale(x, 0.7);
            let z = g.relu(y);
            let z = g.add(z, x).unwrap();
            let rs = g.row_sums(z);
            let sq = g.mul(rs, rs).unwrap();
            g.sum_all(sq)
        });
    }

    #[test]
    fn softmax_and_layer_norm_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = random(4, 6, &mut rng);
        let gain = random(1, 6, &mut rng);
        let bias = random(1, 6, &mut rng);
        let x = random(4, 6, &mut rng);
        check_op(x.clone(), |g, x| {
            let s = g.softmax_rows(x);
            let w = g.constant(weights.clone());
            let p = g.mul(s, w).unwrap();
            g.sum_all(p)
        });
        check_op(x.clone(), |g, x| {
            let s = g.masked_softmax_rows(x, &[true, false, true, true, false, true]).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(s, w).unwrap();
            g.sum_all(p)
        });
        check_op(x.clone(), |g, x| {
            let gn = g.constant(gain.clone());
            let bs = g.constant(bias.clone());
            let y = g.layer_norm(x, gn, bs, 1e-5).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(y, w).unwrap();
            g.sum_all(p)
        });
        // gradient with respect to the gain itself
        check_op(gain.clone(), |g, gn| {
            let xs = g.constant(x.clone());
            let bs = g.constant(bias.clone());
            let y = g.layer_norm(xs, gn, bs, 1e-5).unwrap();
            let w = g.constant(weights.clone());
            let p = g.mul(y, w).unwrap();
            g.sum_all(p)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(4, 6, &mut rng);
        let other = random(3, 3, &mut rng);
        check_op(x.clone(), |g, x| {
            let a = g.slice_cols(x, 0, 3).unwrap();
            let b = g.slice_cols(x, 3, 3).unwrap();
            let o = g.constant(other.clone());
            let bt = g.matmul_transposed(b, o).unwrap();
            let c = g.concat_cols(&[bt, a]).unwrap();
            let gathered = g.gather_rows(c, &[0, 2, 2, 3]).unwrap();
            let e = g.element(gathered, 1, 4).unwrap();
            let t = g.cross_entropy(gathered, &[0, 5, 1, 2]).unwrap();
            let s = g.add(e, t).unwrap();
            g.scale(s, 1.3)
        });
    }

    #[test]
    fn gradient_errors() {
        let mut g = Graph::new();
        let x = g.variable(Matrix::zeros(2, 2));
        assert!(matches!(g.gradient(x, x), Err(Error::NonScalar { rows: 2, cols: 2 })));
        let s = g.sum_all(x);
        assert!(matches!(g.gradient(s, NodeId(99)), Err(Error::UnknownNode(99))));
    }

    #[test]
    fn non_ancestor_gradient_is_zero_and_repeatable() {
        let mut g = Graph::new();
        let x = g.variable(Matrix::filled(2, 3, 1.0));
        let unrelated = g.variable(Matrix::filled(4, 1, 2.0));
        let s = g.sum_all(x);
        assert_eq!(g.gradient(s, unrelated).unwrap(), Matrix::zeros(4, 1));
        assert_eq!(g.gradient(s, x).unwrap(), g.gradient(s, x).unwrap());
    }
}
