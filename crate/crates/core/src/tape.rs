//! Reverse-mode automatic differentiation over exactly the primitives the
//! transformer needs.
//!
//! A `Tape` records primitive applications in topological order; `backward`
//! walks them in exact reverse order, accumulating gradients additively so a
//! value feeding several later nodes (e.g. a latent hidden state reused
//! across iterations) receives the sum of its downstream contributions.
//!
//! Reductions use a fixed summation order, so identical inputs at identical
//! precision produce bit-identical outputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use std::rc::Rc;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const DISTRIBUTION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf { trainable: bool },
    MatMul { a: NodeId, b: NodeId },
    /// `a * b^T` without materializing the transpose.
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBiasRow { a: NodeId, bias: NodeId },
    Scale { a: NodeId, factor: S },
    Gelu { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId },
    SoftmaxRows { a: NodeId },
    /// Row-wise softmax over a per-row prefix; entries past the limit are
    /// exactly zero. This is how causal masking stays finite.
    MaskedSoftmaxRows { a: NodeId, limits: Rc<[usize]> },
    /// Fused multi-head causal attention over packed `[_, heads*dh]` rows.
    /// Equivalent to the per-head slice / scores / masked-softmax /
    /// weighted-sum / concat pipeline, with probabilities recomputed during
    /// backward instead of stored.
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, heads: usize, limits: Rc<[usize]>, scale: S },
    GatherRows { a: NodeId, indices: Rc<[usize]> },
    ConcatRows { a: NodeId, b: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize, width: usize },
    CrossEntropy { logits: NodeId, targets: Rc<[usize]> },
    L1Distance { p: NodeId, q: NodeId },
    Mse { a: NodeId, b: NodeId },
    Detach { a: NodeId },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.index()].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.index()].grad.as_ref()
    }

    pub fn grad_mut(&mut self, id: NodeId) -> Option<&mut Tensor<S>> {
        self.nodes[id.index()].grad.as_mut()
    }

    pub fn is_trainable_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.index()].op, Op::Leaf { trainable: true })
    }

    /// Trainable leaf; receives a gradient buffer of identical shape after
    /// every backward pass, even when detached from the loss.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Overwrite a leaf's value in place (used by finite differencing).
    pub fn set_leaf_value(&mut self, id: NodeId, data: &[S]) {
        let node = &mut self.nodes[id.index()];
        assert!(matches!(node.op, Op::Leaf { .. }), "set_leaf_value on non-leaf");
        node.value.data_mut().copy_from_slice(data);
    }

    fn push_leaf(&mut self, value: Tensor<S>, trainable: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op: Op::Leaf { trainable }, value, grad: None });
        id
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, name: &'static str) -> Result<NodeId> {
        value.check_finite(name)?;
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value, grad: None });
        Ok(id)
    }

    // ---- primitives ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", "rhs", &[ta.cols(), tb.cols()], tb.shape()));
        }
        let out = matmul_raw(ta, tb);
        self.push(Op::MatMul { a, b }, out, "matmul")
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_nt", "rhs", &[tb.rows(), ta.cols()], tb.shape()));
        }
        let out = matmul_nt_raw(ta, tb);
        self.push(Op::MatMulNt { a, b }, out, "matmul_nt")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", "rhs", &ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data);
        self.push(Op::Add { a, b }, out, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", "rhs", &ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data);
        self.push(Op::Mul { a, b }, out, "mul")
    }

    /// Broadcast a `[1, n]` bias over every row of `[m, n]`.
    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_bias_row", "bias", &[1, ta.cols()], tb.shape()));
        }
        let mut out = ta.clone();
        let brow = tb.data().to_vec();
        for i in 0..out.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(&brow) {
                *o += bv;
            }
        }
        self.push(Op::AddBiasRow { a, bias }, out, "add_bias_row")
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> Result<NodeId> {
        let out = self.value(a).map(|v| v * factor);
        self.push(Op::Scale { a, factor }, out, "scale")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(gelu_forward);
        self.push(Op::Gelu { a }, out, "gelu")
    }

    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (ta, tg, tb) = (self.value(a), self.value(gamma), self.value(beta));
        if tg.shape() != [1, ta.cols()] {
            return Err(shape_err("layer_norm", "gamma", &[1, ta.cols()], tg.shape()));
        }
        if tb.shape() != [1, ta.cols()] {
            return Err(shape_err("layer_norm", "beta", &[1, ta.cols()], tb.shape()));
        }
        let out = layer_norm_raw(ta, tg, tb);
        self.push(Op::LayerNorm { a, gamma, beta }, out, "layer_norm")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.cols() == 0 {
            return Err(shape_err("softmax", "input", &[ta.rows(), 1], ta.shape()));
        }
        let limits = vec![ta.cols(); ta.rows()];
        let out = masked_softmax_raw(ta, &limits);
        self.push(Op::SoftmaxRows { a }, out, "softmax")
    }

    pub fn masked_softmax_rows(&mut self, a: NodeId, limits: Vec<usize>) -> Result<NodeId> {
        let ta = self.value(a);
        assert_eq!(limits.len(), ta.rows(), "one limit per row");
        assert!(
            limits.iter().all(|&l| l >= 1 && l <= ta.cols()),
            "row limits must lie in 1..=cols"
        );
        let out = masked_softmax_raw(ta, &limits);
        self.push(Op::MaskedSoftmaxRows { a, limits: limits.into() }, out, "masked_softmax")
    }

    /// Multi-head causal attention: `q` holds the new rows, `k`/`v` the full
    /// attended prefix (cache plus new rows), all packed `[_, d]` with heads
    /// side by side. `limits[i]` is how many leading k/v rows row i sees.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        limits: Rc<[usize]>,
        scale: S,
    ) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tk.shape() != tv.shape() || tq.cols() != tk.cols() {
            return Err(shape_err("causal_attention", "kv", &tq.shape(), tk.shape()));
        }
        assert_eq!(tq.cols() % heads, 0, "width not divisible by heads");
        assert_eq!(limits.len(), tq.rows(), "one limit per query row");
        assert!(limits.iter().all(|&l| l >= 1 && l <= tk.rows()), "limit out of range");
        let out = attention_raw(tq, tk, tv, heads, &limits, scale);
        self.push(Op::CausalAttention { q, k, v, heads, limits, scale }, out, "causal_attention")
    }

    /// Row gather: `out[r] = a[indices[r]]`. Serves both embedding lookup
    /// (table gathered by token id) and selecting supervised positions.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let ta = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {} rows",
                ta.rows()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * ta.cols());
        for &i in &indices {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(indices.len(), ta.cols(), data);
        self.push(Op::GatherRows { a, indices: indices.into() }, out, "gather_rows")
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("concat_rows", "rhs", &[tb.rows(), ta.cols()], tb.shape()));
        }
        let mut data = Vec::with_capacity((ta.rows() + tb.rows()) * ta.cols());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let out = Tensor::new(ta.rows() + tb.rows(), ta.cols(), data);
        self.push(Op::ConcatRows { a, b }, out, "concat_rows")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", "rhs", &[ta.rows(), tb.cols()], tb.shape()));
        }
        let cols = ta.cols() + tb.cols();
        let mut data = Vec::with_capacity(ta.rows() * cols);
        for i in 0..ta.rows() {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor::new(ta.rows(), cols, data);
        self.push(Op::ConcatCols { a, b }, out, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if start + width > ta.cols() {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: {start}..{} out of range for {} cols",
                start + width,
                ta.cols()
            )));
        }
        let mut data = Vec::with_capacity(ta.rows() * width);
        for i in 0..ta.rows() {
            data.extend_from_slice(&ta.row(i)[start..start + width]);
        }
        let out = Tensor::new(ta.rows(), width, data);
        self.push(Op::SliceCols { a, start, width }, out, "slice_cols")
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let tl = self.value(logits);
        if tl.rows() != targets.len() || tl.cols() == 0 || targets.is_empty() {
            return Err(shape_err("cross_entropy", "logits", &[targets.len().max(1), tl.cols().max(1)], tl.shape()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= tl.cols()) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {bad} out of range for {} classes",
                tl.cols()
            )));
        }
        let out = Tensor::scalar(cross_entropy_raw(tl, &targets));
        self.push(Op::CrossEntropy { logits, targets: targets.into() }, out, "cross_entropy")
    }

    /// Total-variation style L1 between two probability vectors; range [0, 2].
    pub fn l1_distance(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() || tp.rows() != 1 {
            return Err(shape_err("l1_distance", "q", &tp.shape(), tq.shape()));
        }
        for t in [tp, tq] {
            let sum: f64 = t.data().iter().map(|v| v.to_f64_lossy()).sum();
            if (sum - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(Error::NotNormalized { sum, tol: DISTRIBUTION_TOL });
            }
        }
        let mut acc = S::zero();
        for (&x, &y) in tp.data().iter().zip(tq.data()) {
            acc += (x - y).abs();
        }
        self.push(Op::L1Distance { p, q }, Tensor::scalar(acc), "l1_distance")
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", "rhs", &ta.shape(), tb.shape()));
        }
        let inv = S::from_f64(1.0 / ta.len() as f64);
        let mut acc = S::zero();
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            acc += (x - y) * (x - y);
        }
        self.push(Op::Mse { a, b }, Tensor::scalar(acc * inv), "mse")
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).clone();
        self.push(Op::Detach { a }, out, "detach")
    }

    // ---- backward ------------------------------------------------------

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardWithoutReset);
        }
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(Error::NonScalarLoss { got: format!("{:?}", lt.shape()) });
        }
        self.backward_done = true;
        self.nodes[loss.index()].grad = Some(Tensor::scalar(S::one()));

        for i in (0..=loss.index()).rev() {
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } | Op::Detach { .. } => {}
                Op::MatMul { a, b } => {
                    // dA = G B^T, dB = A^T G
                    let da = matmul_nt_raw(&grad, self.value(b));
                    let db = matmul_tn_raw(self.value(a), &grad);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MatMulNt { a, b } => {
                    // C = A B^T: dA = G B, dB = G^T A
                    let da = matmul_raw(&grad, self.value(b));
                    let db = matmul_tn_raw(&grad, self.value(a));
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad.clone());
                }
                Op::Mul { a, b } => {
                    let da_data: Vec<S> =
                        grad.data().iter().zip(self.value(b).data()).map(|(&g, &y)| g * y).collect();
                    let db_data: Vec<S> =
                        grad.data().iter().zip(self.value(a).data()).map(|(&g, &x)| g * x).collect();
                    let shape = grad.shape();
                    self.accumulate(a, Tensor::new(shape[0], shape[1], da_data));
                    self.accumulate(b, Tensor::new(shape[0], shape[1], db_data));
                }
                Op::AddBiasRow { a, bias } => {
                    let mut db = Tensor::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        let src = grad.row(r).to_vec();
                        for (o, g) in db.row_mut(0).iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                    self.accumulate(a, grad.clone());
                    self.accumulate(bias, db);
                }
                Op::Scale { a, factor } => {
                    self.accumulate(a, grad.map(|g| g * factor));
                }
                Op::Gelu { a } => {
                    let da_data: Vec<S> = grad
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&g, &x)| g * gelu_backward(x))
                        .collect();
                    let shape = grad.shape();
                    self.accumulate(a, Tensor::new(shape[0], shape[1], da_data));
                }
                Op::LayerNorm { a, gamma, beta } => {
                    let (da, dg, db) =
                        layer_norm_backward(self.value(a), self.value(gamma), &grad);
                    self.accumulate(a, da);
                    self.accumulate(gamma, dg);
                    self.accumulate(beta, db);
                }
                Op::SoftmaxRows { a } => {
                    let limits = vec![grad.cols(); grad.rows()];
                    let da = softmax_backward(&self.nodes[i].value, &grad, &limits);
                    self.accumulate(a, da);
                }
                Op::MaskedSoftmaxRows { a, limits } => {
                    let da = softmax_backward(&self.nodes[i].value, &grad, &limits);
                    self.accumulate(a, da);
                }
                Op::CausalAttention { q, k, v, heads, limits, scale } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(q),
                        self.value(k),
                        self.value(v),
                        heads,
                        &limits,
                        scale,
                        &grad,
                    );
                    self.accumulate(q, dq);
                    self.accumulate(k, dk);
                    self.accumulate(v, dv);
                }
                Op::GatherRows { a, indices } => {
                    let src = self.value(a);
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for (r, &idx) in indices.iter().enumerate() {
                        let g = grad.row(r).to_vec();
                        for (o, gv) in da.row_mut(idx).iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::ConcatRows { a, b } => {
                    let ra = self.value(a).rows();
                    let cols = grad.cols();
                    let da = Tensor::new(ra, cols, grad.data()[..ra * cols].to_vec());
                    let db = Tensor::new(grad.rows() - ra, cols, grad.data()[ra * cols..].to_vec());
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.value(a).cols();
                    let cb = grad.cols() - ca;
                    let mut da = Tensor::zeros(grad.rows(), ca);
                    let mut db = Tensor::zeros(grad.rows(), cb);
                    for r in 0..grad.rows() {
                        da.row_mut(r).copy_from_slice(&grad.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&grad.row(r)[ca..]);
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::SliceCols { a, start, width } => {
                    let src = self.value(a);
                    let mut da = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..grad.rows() {
                        da.row_mut(r)[start..start + width].copy_from_slice(grad.row(r));
                    }
                    self.accumulate(a, da);
                }
                Op::CrossEntropy { logits, targets } => {
                    let g = grad.item();
                    let da = cross_entropy_backward(self.value(logits), &targets, g);
                    self.accumulate(logits, da);
                }
                Op::L1Distance { p, q } => {
                    let g = grad.item();
                    let (tp, tq) = (self.value(p), self.value(q));
                    let dp: Vec<S> = tp
                        .data()
                        .iter()
                        .zip(tq.data())
                        .map(|(&x, &y)| g * sign(x - y))
                        .collect();
                    let dq: Vec<S> = dp.iter().map(|&v| -v).collect();
                    let cols = tp.cols();
                    self.accumulate(p, Tensor::new(1, cols, dp));
                    self.accumulate(q, Tensor::new(1, cols, dq));
                }
                Op::Mse { a, b } => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let g = grad.item();
                    let coef = S::from_f64(2.0 / ta.len() as f64) * g;
                    let da_data: Vec<S> =
                        ta.data().iter().zip(tb.data()).map(|(&x, &y)| coef * (x - y)).collect();
                    let db_data: Vec<S> = da_data.iter().map(|&v| -v).collect();
                    let shape = ta.shape();
                    self.accumulate(a, Tensor::new(shape[0], shape[1], da_data));
                    self.accumulate(b, Tensor::new(shape[0], shape[1], db_data));
                }
            }
            self.nodes[i].grad = Some(grad);
        }

        // a parameter with no path to the loss gets explicit zeros
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf { trainable: true }) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<S>) {
        let node = &mut self.nodes[id.index()];
        match &mut node.grad {
            Some(g) => {
                for (o, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *o += d;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Recompute every non-leaf node from current leaf values, in the
    /// original topological order. Used by finite differencing.
    pub fn reval(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let value = match op {
                Op::Leaf { .. } => continue,
                Op::MatMul { a, b } => matmul_raw(self.value(a), self.value(b)),
                Op::MatMulNt { a, b } => matmul_nt_raw(self.value(a), self.value(b)),
                Op::Add { a, b } => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
                    Tensor::new(ta.rows(), ta.cols(), data)
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    Tensor::new(ta.rows(), ta.cols(), data)
                }
                Op::AddBiasRow { a, bias } => {
                    let mut out = self.value(a).clone();
                    let brow = self.value(bias).data().to_vec();
                    for r in 0..out.rows() {
                        for (o, &bv) in out.row_mut(r).iter_mut().zip(&brow) {
                            *o += bv;
                        }
                    }
                    out
                }
                Op::Scale { a, factor } => self.value(a).map(|v| v * factor),
                Op::Gelu { a } => self.value(a).map(gelu_forward),
                Op::LayerNorm { a, gamma, beta } => {
                    layer_norm_raw(self.value(a), self.value(gamma), self.value(beta))
                }
                Op::SoftmaxRows { a } => {
                    let ta = self.value(a);
                    let limits = vec![ta.cols(); ta.rows()];
                    masked_softmax_raw(ta, &limits)
                }
                Op::MaskedSoftmaxRows { a, ref limits } => masked_softmax_raw(self.value(a), limits),
                Op::CausalAttention { q, k, v, heads, ref limits, scale } => {
                    attention_raw(self.value(q), self.value(k), self.value(v), heads, limits, scale)
                }
                Op::GatherRows { a, ref indices } => {
                    let ta = self.value(a);
                    let mut data = Vec::with_capacity(indices.len() * ta.cols());
                    for &idx in indices.iter() {
                        data.extend_from_slice(ta.row(idx));
                    }
                    Tensor::new(indices.len(), ta.cols(), data)
                }
                Op::ConcatRows { a, b } => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let mut data = Vec::with_capacity((ta.rows() + tb.rows()) * ta.cols());
                    data.extend_from_slice(ta.data());
                    data.extend_from_slice(tb.data());
                    Tensor::new(ta.rows() + tb.rows(), ta.cols(), data)
                }
                Op::ConcatCols { a, b } => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let cols = ta.cols() + tb.cols();
                    let mut data = Vec::with_capacity(ta.rows() * cols);
                    for r in 0..ta.rows() {
                        data.extend_from_slice(ta.row(r));
                        data.extend_from_slice(tb.row(r));
                    }
                    Tensor::new(ta.rows(), cols, data)
                }
                Op::SliceCols { a, start, width } => {
                    let ta = self.value(a);
                    let mut data = Vec::with_capacity(ta.rows() * width);
                    for r in 0..ta.rows() {
                        data.extend_from_slice(&ta.row(r)[start..start + width]);
                    }
                    Tensor::new(ta.rows(), width, data)
                }
                Op::CrossEntropy { logits, ref targets } => {
                    Tensor::scalar(cross_entropy_raw(self.value(logits), targets))
                }
                Op::L1Distance { p, q } => {
                    let (tp, tq) = (self.value(p), self.value(q));
                    let mut acc = S::zero();
                    for (&x, &y) in tp.data().iter().zip(tq.data()) {
                        acc += (x - y).abs();
                    }
                    Tensor::scalar(acc)
                }
                Op::Mse { a, b } => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let inv = S::from_f64(1.0 / ta.len() as f64);
                    let mut acc = S::zero();
                    for (&x, &y) in ta.data().iter().zip(tb.data()) {
                        acc += (x - y) * (x - y);
                    }
                    Tensor::scalar(acc * inv)
                }
                Op::Detach { a } => self.value(a).clone(),
            };
            value.check_finite("reval")?;
            self.nodes[i].value = value;
        }
        Ok(())
    }
}

/// Max relative error between analytic and central-finite-difference
/// gradients over at least 32 randomly sampled coordinates of `param`
/// (all coordinates when the tensor is smaller).
///
/// The finite-difference side re-evaluates the recorded graph from scratch
/// and never touches the backward implementation it is checking.
pub fn grad_check<S: Scalar, R: Rng>(
    tape: &mut Tape<S>,
    loss: NodeId,
    param: NodeId,
    eps: f64,
    rng: &mut R,
) -> Result<f64> {
    tape.reset_grads();
    tape.backward(loss)?;
    let analytic = tape
        .grad(param)
        .expect("parameter gradient present after backward")
        .clone();

    let n = tape.value(param).len();
    let coords: Vec<usize> = if n <= 32 {
        (0..n).collect()
    } else {
        sample(rng, n, 32).into_vec()
    };

    let mut max_rel: f64 = 0.0;
    let base = tape.value(param).data().to_vec();
    let mut work = base.clone();
    for &c in &coords {
        work[c] = S::from_f64(base[c].to_f64_lossy() + eps);
        tape.set_leaf_value(param, &work);
        tape.reval()?;
        let plus = tape.value(loss).item().to_f64_lossy();

        work[c] = S::from_f64(base[c].to_f64_lossy() - eps);
        tape.set_leaf_value(param, &work);
        tape.reval()?;
        let minus = tape.value(loss).item().to_f64_lossy();

        work[c] = base[c];
        let fd = (plus - minus) / (2.0 * eps);
        let ad = analytic.data()[c].to_f64_lossy();
        let denom = ad.abs().max(fd.abs());
        if denom > 1e-7 {
            max_rel = max_rel.max((ad - fd).abs() / denom);
        }
    }
    tape.set_leaf_value(param, &base);
    tape.reval()?;
    Ok(max_rel)
}

// ---- raw kernels --------------------------------------------------------

fn shape_err(op: &'static str, operand: &'static str, expected: &[usize], got: [usize; 2]) -> Error {
    Error::ShapeMismatch {
        op,
        operand,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// `[m,k] x [k,n]`, accumulating over k in ascending order per output cell.
pub(crate) fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &aik) in arow.iter().enumerate().take(k) {
            let brow = b.row(kk);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a * b^T` where both operands are `[_, k]` row-major.
pub(crate) fn matmul_nt_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..n {
            orow[j] = dot(arow, b.row(j));
        }
    }
    out
}

/// `a^T * b` for `a: [k, m]`, `b: [k, n]`; used only by backward.
fn matmul_tn_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for i in 0..m {
            let aik = arow[i];
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Dot product with eight interleaved accumulators. The lane order is fixed,
/// so results are deterministic for a given input.
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for (xv, yv) in (&mut xc).zip(&mut yc) {
        for l in 0..8 {
            acc[l] += xv[l] * yv[l];
        }
    }
    let mut tail = S::zero();
    for (&xv, &yv) in xc.remainder().iter().zip(yc.remainder()) {
        tail += xv * yv;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_forward<S: Scalar>(x: S) -> S {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64(GELU_COEF);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_backward<S: Scalar>(x: S) -> S {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64(GELU_COEF);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

fn layer_norm_raw<S: Scalar>(a: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Tensor<S> {
    let d = a.cols();
    let inv_d = S::from_f64(1.0 / d as f64);
    let eps = S::from_f64(LAYER_NORM_EPS);
    let mut out = Tensor::zeros(a.rows(), d);
    for r in 0..a.rows() {
        let row = a.row(r);
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = S::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var *= inv_d;
        let inv_std = S::one() / (var + eps).sqrt();
        let orow = out.row_mut(r);
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv_std * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

fn layer_norm_backward<S: Scalar>(
    a: &Tensor<S>,
    gamma: &Tensor<S>,
    grad: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let d = a.cols();
    let inv_d = S::from_f64(1.0 / d as f64);
    let eps = S::from_f64(LAYER_NORM_EPS);
    let mut da = Tensor::zeros(a.rows(), d);
    let mut dgamma = Tensor::zeros(1, d);
    let mut dbeta = Tensor::zeros(1, d);
    let mut xhat = vec![S::zero(); d];
    let mut dxhat = vec![S::zero(); d];
    for r in 0..a.rows() {
        let row = a.row(r);
        let grow = grad.row(r);
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = S::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var *= inv_d;
        let inv_std = S::one() / (var + eps).sqrt();

        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv_std;
            dxhat[j] = grow[j] * gamma.data()[j];
        }
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for j in 0..d {
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        let darow = da.row_mut(r);
        for j in 0..d {
            darow[j] =
                inv_std * inv_d * (S::from_f64(d as f64) * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
        }
        for j in 0..d {
            dgamma.data_mut()[j] += grow[j] * xhat[j];
            dbeta.data_mut()[j] += grow[j];
        }
    }
    (da, dgamma, dbeta)
}

/// Scores, masked softmax and weighted sum for every head, matching the
/// per-head primitive pipeline operation for operation.
fn attention_raw<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    limits: &[usize],
    scale: S,
) -> Tensor<S> {
    let (m, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let mut out = Tensor::zeros(m, d);
    let mut probs = vec![S::zero(); k.rows()];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..m {
            let lim = limits[i];
            let qrow = &q.row(i)[off..off + dh];
            row_probs(qrow, k, off, dh, scale, &mut probs[..lim]);
            let orow = &mut out.row_mut(i)[off..off + dh];
            for (t, &p) in probs[..lim].iter().enumerate() {
                let vrow = &v.row(t)[off..off + dh];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
    }
    out
}

/// Scaled dot-product scores against the leading rows of `k` (one per
/// entry of `probs`), then softmax in place.
fn row_probs<S: Scalar>(qrow: &[S], k: &Tensor<S>, off: usize, dh: usize, scale: S, probs: &mut [S]) {
    for (t, p) in probs.iter_mut().enumerate() {
        *p = dot(qrow, &k.row(t)[off..off + dh]) * scale;
    }
    let mut mx = probs[0];
    for &s in probs.iter() {
        if s > mx {
            mx = s;
        }
    }
    let mut denom = S::zero();
    for p in probs.iter_mut() {
        *p = (*p - mx).exp();
        denom += *p;
    }
    let inv = S::one() / denom;
    for p in probs.iter_mut() {
        *p *= inv;
    }
}

fn attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    limits: &[usize],
    scale: S,
    grad: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (m, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let mut dq = Tensor::zeros(m, d);
    let mut dk = Tensor::zeros(k.rows(), d);
    let mut dv = Tensor::zeros(v.rows(), d);
    let mut probs = vec![S::zero(); k.rows()];
    let mut dscores = vec![S::zero(); k.rows()];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..m {
            let lim = limits[i];
            let qrow = &q.row(i)[off..off + dh];
            let grow = &grad.row(i)[off..off + dh];
            row_probs(qrow, k, off, dh, scale, &mut probs[..lim]);

            // through the weighted sum: dprobs[t] = g . v_t ; dv_t += p_t g
            let mut dot_dp_p = S::zero();
            for t in 0..lim {
                let vrow = &v.row(t)[off..off + dh];
                let dp = dot(grow, vrow);
                dscores[t] = dp;
                let p = probs[t];
                dot_dp_p += dp * p;
                let dvrow = &mut dv.row_mut(t)[off..off + dh];
                for (o, &g) in dvrow.iter_mut().zip(grow) {
                    *o += p * g;
                }
            }
            // softmax jacobian, then the scale factor
            for t in 0..lim {
                dscores[t] = probs[t] * (dscores[t] - dot_dp_p) * scale;
            }
            // through the scores: dq_i += ds_t k_t ; dk_t += ds_t q_i
            let dqrow = &mut dq.row_mut(i)[off..off + dh];
            for t in 0..lim {
                let ds = dscores[t];
                let krow = &k.row(t)[off..off + dh];
                for (o, &kv) in dqrow.iter_mut().zip(krow) {
                    *o += ds * kv;
                }
                let dkrow = &mut dk.row_mut(t)[off..off + dh];
                for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                    *o += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

fn masked_softmax_raw<S: Scalar>(a: &Tensor<S>, limits: &[usize]) -> Tensor<S> {
    let mut out = Tensor::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let lim = limits[r];
        let row = &a.row(r)[..lim];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let orow = out.row_mut(r);
        let mut denom = S::zero();
        for j in 0..lim {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            denom += e;
        }
        let inv = S::one() / denom;
        for o in orow[..lim].iter_mut() {
            *o *= inv;
        }
    }
    out
}

fn softmax_backward<S: Scalar>(probs: &Tensor<S>, grad: &Tensor<S>, limits: &[usize]) -> Tensor<S> {
    let mut da = Tensor::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let lim = limits[r];
        let prow = probs.row(r);
        let grow = grad.row(r);
        let mut dotv = S::zero();
        for j in 0..lim {
            dotv += grow[j] * prow[j];
        }
        let darow = da.row_mut(r);
        for j in 0..lim {
            darow[j] = prow[j] * (grow[j] - dotv);
        }
    }
    da
}

fn cross_entropy_raw<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> S {
    let inv_m = S::from_f64(1.0 / targets.len() as f64);
    let mut acc = S::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = S::zero();
        for &v in row {
            denom += (v - mx).exp();
        }
        acc += mx + denom.ln() - row[t];
    }
    acc * inv_m
}

fn cross_entropy_backward<S: Scalar>(logits: &Tensor<S>, targets: &[usize], g: S) -> Tensor<S> {
    let coef = g * S::from_f64(1.0 / targets.len() as f64);
    let mut da = Tensor::zeros(logits.rows(), logits.cols());
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = S::zero();
        for &v in row {
            denom += (v - mx).exp();
        }
        let inv = S::one() / denom;
        let darow = da.row_mut(r);
        for j in 0..row.len() {
            let p = (row[j] - mx).exp() * inv;
            let indicator = if j == t { S::one() } else { S::zero() };
            darow[j] = coef * (p - indicator);
        }
    }
    da
}


/// Kernel entry points for benchmarking executables; not part of the API.
#[doc(hidden)]
pub mod test_hooks {
    use super::*;

    pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        matmul_raw(a, b)
    }

    pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        matmul_nt_raw(a, b)
    }
}
