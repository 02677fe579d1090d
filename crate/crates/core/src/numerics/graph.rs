//! Recording tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking the node list
//! backwards from the loss is a reverse topological traversal that visits
//! each node once. Gradients reaching a node through several consumers are
//! summed.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, gemm, ResizeGeometry, Strides, PROB_FLOOR};
use super::tensor::numel;
use super::{NumericsError, Real, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    BroadcastLeading(Var),
    GatherRows(Var, Vec<Vec<usize>>),
    Resize(Var),
    CrossEntropy(Var, Vec<usize>),
    KlDiv(Var, Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBroadcast(a, b) | Op::Mul(a, b) | Op::KlDiv(a, b) => {
                vec![*a, *b]
            }
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::BroadcastLeading(a)
            | Op::GatherRows(a, _)
            | Op::Resize(a)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::Concat(vs, _) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording context.
#[derive(Debug)]
pub struct Graph<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn permuted_strides(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    (out_shape, src_strides)
}

/// Copies `src` (row-major `shape`) into the layout given by `perm`.
fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let (out_shape, src_strides) = permuted_strides(shape, perm);
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        return (out_shape, src.to_vec());
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer = numel(&out_shape[..rank - 1]);
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.node(i).requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let v = Var {
            graph: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        v
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Same value as `v`, cut off from the backward pass.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `x[..., k] * w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[k, n], Some(&xk)) = (ws.as_slice(), xs.last()) else {
            return Err(mismatch("linear", &xs, &ws));
        };
        if xk != k {
            return Err(mismatch("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(mismatch("linear(bias)", &ws, self.shape(b)));
            }
        }
        let m = numel(&xs) / k;
        let mut out = match b {
            Some(b) => {
                let bias = self.value(b).data();
                let mut o = Vec::with_capacity(m * n);
                for _ in 0..m {
                    o.extend_from_slice(bias);
                }
                o
            }
            None => vec![T::zero(); m * n],
        };
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            Strides::rm(k),
            self.value(w).data(),
            Strides::rm(n),
            beta,
            &mut out,
            Strides::rm(n),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }))
    }

    /// Batched product over matching leading dimensions:
    /// `[..., m, k] x [..., k, n]`, or `[..., m, k] x [..., n, k]^T` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (k2, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != k2 {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let sbs = if trans_b { Strides::rm_t(k) } else { Strides::rm(n) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..(i + 1) * m * k],
                Strides::rm(k),
                &bd[i * k * n..(i + 1) * k * n],
                sbs,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                Strides::rm(n),
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::BatchMatMul { a, b, trans_b }))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.shape().ends_with(vb.shape()) {
            return Err(mismatch("add_broadcast", va.shape(), vb.shape()));
        }
        let inner = vb.len();
        let data = va
            .data()
            .chunks(inner)
            .flat_map(|c| c.iter().zip(vb.data()).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(value, Op::AddBroadcast(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = kernels::softmax_lastaxis(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, NumericsError> {
        let parts = kernels::layer_norm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            parts.out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized: parts.normalized,
                rstd: parts.rstd,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = kernels::gelu(self.value(a));
        self.push(value, Op::Gelu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(NumericsError::InvalidArgument(format!(
                "permutation {perm:?} is invalid for shape {shape:?}"
            )));
        }
        let (out_shape, data) = permute_data(self.value(a).data(), &shape, perm);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(a, perm.to_vec())))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = self
            .shape(*parts.first().ok_or_else(|| NumericsError::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(NumericsError::InvalidArgument(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis)))
    }

    /// Repeats `a` along a new leading axis of extent `n`.
    pub fn broadcast_leading(&mut self, a: Var, n: usize) -> Result<Var, NumericsError> {
        if n == 0 {
            return Err(NumericsError::InvalidArgument("broadcast to zero extent".into()));
        }
        let v = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let mut data = Vec::with_capacity(n * v.len());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::BroadcastLeading(a)))
    }

    /// Per-batch row selection on `[B, N, ...]`: output row `j` of sample `b`
    /// is input row `index[b][j]`. Every sample must select the same count.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Vec<usize>>) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || index.len() != shape[0] {
            return Err(NumericsError::InvalidArgument(format!(
                "gather_rows: {} index lists for shape {shape:?}",
                index.len()
            )));
        }
        let keep = index[0].len();
        if keep == 0 || index.iter().any(|r| r.len() != keep || r.iter().any(|&i| i >= shape[1])) {
            return Err(NumericsError::InvalidArgument("gather_rows: ragged or out-of-range index".into()));
        }
        let inner = numel(&shape[2..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(shape[0] * keep * inner);
        for (b, rows) in index.iter().enumerate() {
            for &r in rows {
                let off = (b * shape[1] + r) * inner;
                data.extend_from_slice(&src[off..off + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[1] = keep;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::GatherRows(a, index)))
    }

    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var, NumericsError> {
        let value = kernels::bilinear_resize(self.value(a), out_h, out_w)?;
        Ok(self.push(value, Op::Resize(a)))
    }

    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let loss = kernels::cross_entropy(self.value(p), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(p, labels.to_vec())))
    }

    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var, NumericsError> {
        let loss = kernels::kl_divergence(self.value(p), self.value(q))?;
        Ok(self.push(Tensor::scalar(loss), Op::KlDiv(p, q)))
    }

    /// Gradients of a scalar `loss` with respect to every leaf that
    /// requires them. Intermediate gradients are released as soon as they
    /// have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        self.run_backward(loss, false)
    }

    /// Like [`Graph::backward`] but keeps the gradient of every node.
    pub fn backward_retaining(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        self.run_backward(loss, true)
    }

    fn run_backward(&self, loss: Var, retain: bool) -> Result<Gradients<T>, NumericsError> {
        if loss.graph != self.id || loss.index >= self.nodes.len() {
            return Err(NumericsError::UnrecordedVar);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.index].requires_grad {
            grads[loss.index] = Some(Tensor::from_parts(
                self.shape(loss).to_vec(),
                vec![T::one()],
            ));
        }
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = (if retain { grads[i].clone() } else { grads[i].take() }) else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() && i <= loss.index {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.index].requires_grad {
            return;
        }
        match &mut grads[v.index] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), gd, Strides::rm(n), vb.data(), Strides::rm_t(n), T::zero(), &mut da, Strides::rm(k));
                    self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), va.data(), Strides::rm_t(k), gd, Strides::rm(n), T::zero(), &mut db, Strides::rm(n));
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), db));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.len() / k;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), gd, Strides::rm(n), vw.data(), Strides::rm_t(n), T::zero(), &mut dx, Strides::rm(k));
                    self.accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), vx.data(), Strides::rm_t(k), gd, Strides::rm(n), T::zero(), &mut dw, Strides::rm(n));
                    self.accumulate(grads, *w, Tensor::from_parts(vec![k, n], dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); n];
                        for row in gd.chunks(n) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_parts(vec![n], db));
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let r = va.ndim();
                let (m, k) = (va.shape()[r - 2], va.shape()[r - 1]);
                let n = g.shape()[r - 1];
                let batch = va.len() / (m * k);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    // dA = dC * B^T  (or dC * B when B was used transposed)
                    let sb = if *trans_b { Strides::rm(k) } else { Strides::rm_t(n) };
                    for i in 0..batch {
                        gemm(
                            m, n, k, T::one(),
                            &gd[i * m * n..(i + 1) * m * n], Strides::rm(n),
                            &vb.data()[i * k * n..(i + 1) * k * n], sb,
                            T::zero(), &mut da[i * m * k..(i + 1) * m * k], Strides::rm(k),
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for i in 0..batch {
                        let ga = &gd[i * m * n..(i + 1) * m * n];
                        let aa = &va.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dC^T * A
                            gemm(n, m, k, T::one(), ga, Strides::rm_t(n), aa, Strides::rm(k), T::zero(), out, Strides::rm(k));
                        } else {
                            // dB = A^T * dC
                            gemm(k, m, n, T::one(), aa, Strides::rm_t(k), ga, Strides::rm(n), T::zero(), out, Strides::rm(n));
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let vb = self.value(*b);
                    let mut db = vec![T::zero(); vb.len()];
                    for chunk in gd.chunks(vb.len()) {
                        for (d, &c) in db.iter_mut().zip(chunk) {
                            *d += c;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), db));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = T::of(numel(&shape) as f64);
                self.accumulate(grads, *a, Tensor::full(&shape, gd[0] / n));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                for ((out, yr), gr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(gd.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let vg = self.value(*gamma).data();
                let d = vg.len();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, xr) in gd.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::from_parts(vec![d], dg));
                    self.accumulate(grads, *beta, Tensor::from_parts(vec![d], db));
                }
                if self.wants(*x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, ((out, gr), xr)) in dx.chunks_mut(d).zip(gd.chunks(d)).zip(normalized.chunks(d)).enumerate() {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * vg[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * vg[j];
                            out[j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = gd.iter().zip(va.data()).map(|(&q, &x)| q * kernels::gelu_grad_scalar(x)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), d));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (shape, data) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *a, Tensor::from_parts(shape, data));
            }
            Op::Concat(parts, axis) => {
                let shape = g.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(ps, d));
                    }
                    offset += chunk;
                }
            }
            Op::BroadcastLeading(a) => {
                let va = self.value(*a);
                let mut d = vec![T::zero(); va.len()];
                for chunk in gd.chunks(va.len()) {
                    for (x, &c) in d.iter_mut().zip(chunk) {
                        *x += c;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), d));
            }
            Op::GatherRows(a, index) => {
                let shape = self.shape(*a).to_vec();
                let inner = numel(&shape[2..]);
                let mut d = vec![T::zero(); numel(&shape)];
                let keep = index[0].len();
                for (b, rows) in index.iter().enumerate() {
                    for (j, &r) in rows.iter().enumerate() {
                        let src = (b * keep + j) * inner;
                        let dst = (b * shape[1] + r) * inner;
                        for t in 0..inner {
                            d[dst + t] += gd[src + t];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(shape, d));
            }
            Op::Resize(a) => {
                let in_shape = self.shape(*a).to_vec();
                let r = g.ndim();
                let (oh, ow) = (g.shape()[r - 3], g.shape()[r - 2]);
                let geo = ResizeGeometry::<T>::new(&in_shape, oh, ow).expect("validated in forward");
                if geo.in_h == oh && geo.in_w == ow {
                    self.accumulate(grads, *a, g.clone());
                    return;
                }
                let c = geo.channels;
                let in_plane = geo.in_h * geo.in_w * c;
                let out_plane = oh * ow * c;
                let mut d = vec![T::zero(); numel(&in_shape)];
                for b in 0..geo.batch {
                    let dst = &mut d[b * in_plane..(b + 1) * in_plane];
                    let src = &gd[b * out_plane..(b + 1) * out_plane];
                    for (oy, ty) in geo.rows.iter().enumerate() {
                        for (ox, tx) in geo.cols.iter().enumerate() {
                            let (wy1, wx1) = (ty.frac, tx.frac);
                            let (wy0, wx0) = (T::one() - wy1, T::one() - wx1);
                            for ch in 0..c {
                                let q = src[(oy * ow + ox) * c + ch];
                                let idx = |y: usize, x: usize| (y * geo.in_w + x) * c + ch;
                                dst[idx(ty.lo, tx.lo)] += q * wy0 * wx0;
                                dst[idx(ty.lo, tx.hi)] += q * wy0 * wx1;
                                dst[idx(ty.hi, tx.lo)] += q * wy1 * wx0;
                                dst[idx(ty.hi, tx.hi)] += q * wy1 * wx1;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(in_shape, d));
            }
            Op::CrossEntropy(p, labels) => {
                let vp = self.value(*p);
                let k = vp.shape()[1];
                let scale = gd[0] / T::of(labels.len() as f64);
                let floor = T::of(PROB_FLOOR);
                let mut d = vec![T::zero(); vp.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let pv = vp.data()[i * k + y];
                    if pv > floor {
                        d[i * k + y] = -scale / pv;
                    }
                }
                self.accumulate(grads, *p, Tensor::from_parts(vp.shape().to_vec(), d));
            }
            Op::KlDiv(p, q) => {
                let (vp, vq) = (self.value(*p), self.value(*q));
                let scale = gd[0] / T::of(vp.shape()[0] as f64);
                let floor = T::of(PROB_FLOOR);
                if self.wants(*p) {
                    let d = vp
                        .data()
                        .iter()
                        .zip(vq.data())
                        .map(|(&pk, &qk)| {
                            let log_ratio = kernels::floor_prob(pk).ln() - kernels::floor_prob(qk).ln();
                            let own = if pk > floor { T::one() } else { T::zero() };
                            scale * (log_ratio + own)
                        })
                        .collect();
                    self.accumulate(grads, *p, Tensor::from_parts(vp.shape().to_vec(), d));
                }
                if self.wants(*q) {
                    let d = vp
                        .data()
                        .iter()
                        .zip(vq.data())
                        .map(|(&pk, &qk)| if qk > floor { -scale * pk / qk } else { T::zero() })
                        .collect();
                    self.accumulate(grads, *q, Tensor::from_parts(vq.shape().to_vec(), d));
                }
            }
        }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    fn slot(&self, v: Var) -> Result<&Option<Tensor<T>>, NumericsError> {
        if v.graph != self.graph {
            return Err(NumericsError::UnrecordedVar);
        }
        self.grads.get(v.index).ok_or(NumericsError::UnrecordedVar)
    }

    /// Gradient of `v`; `None` when no gradient reached it (constants,
    /// detached values, or released intermediates).
    pub fn get(&self, v: Var) -> Result<Option<&Tensor<T>>, NumericsError> {
        Ok(self.slot(v)?.as_ref())
    }

    /// Gradient of a leaf created with [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Result<&Tensor<T>, NumericsError> {
        self.slot(v)?.as_ref().ok_or(NumericsError::NoGradient)
    }

    /// Moves the gradient of `v` out.
    pub fn take(&mut self, v: Var) -> Result<Tensor<T>, NumericsError> {
        if v.graph != self.graph {
            return Err(NumericsError::UnrecordedVar);
        }
        self.grads
            .get_mut(v.index)
            .ok_or(NumericsError::UnrecordedVar)?
            .take()
            .ok_or(NumericsError::NoGradient)
    }
}
