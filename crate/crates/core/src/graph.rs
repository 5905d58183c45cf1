//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every operation evaluates eagerly and appends a node to the graph, so
//! node order is already a topological order. [`Graph::backward`] walks the
//! nodes once in reverse, summing adjoint contributions from all consumers.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `x + bias` with `bias` broadcast over all leading axes.
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    /// `out[i] = src[index[i]]`, or zero for `None`.
    Gather {
        src: Var,
        index: Vec<Option<usize>>,
    },
    ConcatRows(Vec<Var>),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
    },
    Gelu(Var),
    DepthwiseConv3x3 {
        x: Var,
        kernels: Var,
        bias: Var,
    },
    Bilinear(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<T>,
        counted: usize,
    },
    /// `out[p, c] = Σ_k weights[p, k] · src[index[p, k], c]`.
    WeightedGather {
        weights: Var,
        src: Var,
        index: Vec<Option<usize>>,
    },
    RowNormalize(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input. Gradients are reported only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Sums several same-shaped tensors and multiplies by `s`.
    pub fn scaled_sum(&mut self, parts: &[Var], s: T) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::dim("sum of zero tensors"))?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, s))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).len();
        let xs = self.shape(x);
        if xs.last() != Some(&n) {
            return Err(Error::dim(format!(
                "bias {:?} does not match trailing axis of {xs:?}",
                self.shape(bias)
            )));
        }
        let mut out = self.value(x).clone();
        if n > 0 {
            let b = self.value(bias).data().to_vec();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(&b) {
                    *o += bv;
                }
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` for a rank-2 `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(self.value(x))?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// General index gather: `out[i] = src[index[i]]` (flat indices), with
    /// `None` producing zero.
    pub fn gather(&mut self, src: Var, shape: &[usize], index: Vec<Option<usize>>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let len = self.value(src).len();
        if n != index.len() {
            return Err(Error::dim(format!(
                "gather into {shape:?} with {} indices",
                index.len()
            )));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= len) {
            return Err(Error::dim(format!("gather index {bad} beyond source length {len}")));
        }
        let s = self.value(src).data();
        let data = index.iter().map(|i| i.map_or(T::zero(), |i| s[i])).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { src, index }, &[src]))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > rows {
            return Err(Error::dim(format!("rows {start}..{} of {rows}", start + len)));
        }
        let index = (start * cols..(start + len) * cols).map(Some).collect();
        self.gather(x, &[len, cols], index)
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return Err(Error::dim(format!("cols {start}..{} of {cols}", start + len)));
        }
        let index = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| Some(r * cols + c)))
            .collect();
        self.gather(x, &[rows, len], index)
    }

    /// The `rows × cols` block at `(r0, c0)` of a rank-2 tensor.
    pub fn block(&mut self, x: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if r0 + rows > r || c0 + cols > c {
            return Err(Error::dim(format!(
                "block [{r0}..{}, {c0}..{}] of {r}×{c}",
                r0 + rows,
                c0 + cols
            )));
        }
        let index = (r0..r0 + rows)
            .flat_map(|i| (c0..c0 + cols).map(move |j| Some(i * c + j)))
            .collect();
        self.gather(x, &[rows, cols], index)
    }

    /// Concatenates rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).dims2()?.1,
            None => return Err(Error::dim("concat of zero tensors")),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::dim(format!(
                    "concat rows: {:?} vs {cols} columns",
                    self.shape(p)
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new([rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis; entries with `mask == false` are exactly
    /// zero and receive no gradient.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let out = ops::masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), axis)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, axis }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn depthwise_conv3x3(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let out = ops::depthwise_conv3x3(self.value(x), self.value(kernels), self.value(bias))?;
        Ok(self.push(out, Op::DepthwiseConv3x3 { x, kernels, bias }, &[x, kernels, bias]))
    }

    /// Per-pixel linear map on an `H×W×Cin` tensor.
    pub fn pointwise_conv1x1(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (h, w, cin) = self.value(x).dims3()?;
        let (_, cout) = self.value(weight).dims2()?;
        let flat = self.reshape(x, &[h * w, cin])?;
        let y = self.linear(flat, weight, bias)?;
        self.reshape(y, &[h, w, cout])
    }

    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::Bilinear(x), &[x]))
    }

    /// Mean cross-entropy over non-ignored rows of `logits` (`P×C`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let ce = ops::cross_entropy(self.value(logits), targets, ignore_index)?;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore_index,
            probs: ce.probs,
            counted: ce.counted,
        };
        Ok(self.push(Tensor::scalar(ce.loss), op, &[logits]))
    }

    /// For every row `p` of `weights` (`P×K`), mixes the rows of `src`
    /// (`S×C`) selected by `index[p·K + k]` with those weights. `None`
    /// entries contribute nothing.
    pub fn weighted_gather(&mut self, weights: Var, src: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (p, k) = self.value(weights).dims2()?;
        let (s, c) = self.value(src).dims2()?;
        if index.len() != p * k {
            return Err(Error::dim(format!(
                "{} neighbor indices for weights of shape {:?}",
                index.len(),
                self.shape(weights)
            )));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= s) {
            return Err(Error::dim(format!("neighbor index {bad} beyond {s} source rows")));
        }
        let (w, sv) = (self.value(weights).data(), self.value(src).data());
        let mut out = vec![T::zero(); p * c];
        for (pi, row) in out.chunks_mut(c.max(1)).enumerate().take(p) {
            for ki in 0..k {
                let Some(si) = index[pi * k + ki] else { continue };
                let wt = w[pi * k + ki];
                for (o, &v) in row.iter_mut().zip(&sv[si * c..(si + 1) * c]) {
                    *o += wt * v;
                }
            }
        }
        let out = Tensor::new([p, c], out)?;
        Ok(self.push(out, Op::WeightedGather { weights, src, index }, &[weights, src]))
    }

    /// Divides each row of a rank-2 tensor by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let s: T = row.iter().copied().sum();
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        Ok(self.push(out, Op::RowNormalize(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::dim(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output).to_vec(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        // only leaves keep their gradients
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.shape(v).to_vec();
                *slot = Some(Tensor::new(shape, contrib).expect("adjoint has parent shape"));
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, gd.iter().map(|&v| v * *s).collect());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gd.to_vec());
                let n = self.value(*b).len();
                let mut db = vec![T::zero(); n];
                if n > 0 {
                    for row in gd.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                self.accumulate(grads, *b, db);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).dims2().expect("rank 2").1;
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    ops::gemm_nt(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    ops::gemm_tn(self.value(*a).data(), gd, &mut db, k, m, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let gt = ops::transpose(g).expect("rank 2");
                self.accumulate(grads, *x, gt.into_data());
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Gather { src, index } => {
                let mut d = vec![T::zero(); self.value(*src).len()];
                for (&gv, i) in gd.iter().zip(index) {
                    if let Some(i) = i {
                        d[*i] += gv;
                    }
                }
                self.accumulate(grads, *src, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Softmax { x, axis } => {
                let d = ops::softmax_backward(node.value.data(), gd, node.value.shape(), *axis);
                self.accumulate(grads, *x, d);
            }
            Op::MaskedSoftmax(x) => {
                let rank = node.value.rank();
                let d = ops::softmax_backward(node.value.data(), gd, node.value.shape(), rank - 1);
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, axis } => {
                let (dx, dg, db) = ops::layer_norm_backward(self.value(*x), self.value(*gamma), gd, *axis);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Gelu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| ops::gelu_grad(v) * gv)
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::DepthwiseConv3x3 { x, kernels, bias } => {
                let (dx, dk, db) = ops::depthwise_conv3x3_backward(self.value(*x), self.value(*kernels), gd);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *kernels, dk);
                self.accumulate(grads, *bias, db);
            }
            Op::Bilinear(x) => {
                let (ih, iw, c) = self.value(*x).dims3().expect("rank 3");
                let (oh, ow, _) = node.value.dims3().expect("rank 3");
                let d = ops::bilinear_backward(gd, ih, iw, oh, ow, c);
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                counted,
            } => {
                let (_, c) = self.value(*logits).dims2().expect("rank 2");
                let mut d = vec![T::zero(); probs.len()];
                if *counted > 0 {
                    let scale = gd[0] / T::from_count(*counted);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        for j in 0..c {
                            d[r * c + j] = probs[r * c + j] * scale;
                        }
                        d[r * c + t] -= scale;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::WeightedGather { weights, src, index } => {
                let (p, k) = self.value(*weights).dims2().expect("rank 2");
                let (s, c) = self.value(*src).dims2().expect("rank 2");
                let (w, sv) = (self.value(*weights).data(), self.value(*src).data());
                let mut dw = vec![T::zero(); p * k];
                let mut ds = vec![T::zero(); s * c];
                for pi in 0..p {
                    let grow = &gd[pi * c..(pi + 1) * c];
                    for ki in 0..k {
                        let Some(si) = index[pi * k + ki] else { continue };
                        let srow = &sv[si * c..(si + 1) * c];
                        dw[pi * k + ki] = grow.iter().zip(srow).map(|(&a, &b)| a * b).sum();
                        let wt = w[pi * k + ki];
                        for (d, &gv) in ds[si * c..(si + 1) * c].iter_mut().zip(grow) {
                            *d += wt * gv;
                        }
                    }
                }
                self.accumulate(grads, *weights, dw);
                self.accumulate(grads, *src, ds);
            }
            Op::RowNormalize(x) => {
                let (_, c) = node.value.dims2().expect("rank 2");
                let xv = self.value(*x).data();
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                if c > 0 {
                    for r in 0..y.len() / c {
                        let span = r * c..(r + 1) * c;
                        let s: T = xv[span.clone()].iter().copied().sum();
                        let dot: T = gd[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in span {
                            d[j] = (gd[j] - dot) / s;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` if the output does not depend on it or
    /// it was not marked `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
