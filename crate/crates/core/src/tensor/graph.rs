//! Reverse-mode differentiation tape.
//!
//! A `Graph` owns every tensor produced during a forward pass. Operations
//! evaluate eagerly, append a node recording their parents and whatever
//! context the backward rule needs, and return a `NodeId` handle. Topological
//! order equals creation order, so `backward` is a single reverse sweep with
//! additive fan-out accumulation.
//!
//! A graph is single-writer: build and differentiate it from one thread.
//! Independent graphs are freely usable from multiple threads.

use super::conv::{conv2d_backward_input, conv2d_backward_params, conv2d_forward, ConvCache, ConvParams};
use super::pool::{pool2d_backward, pool2d_forward, PoolCache};
pub use super::pool::PoolKind;
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a `Graph`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        params: ConvParams,
        cache: ConvCache<T>,
    },
    Pool2d {
        input: NodeId,
        kind: PoolKind,
        params: ConvParams,
        cache: PoolCache,
    },
    Relu {
        input: NodeId,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    ScaleAdd {
        main: NodeId,
        shortcut: NodeId,
        alpha: T,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SmoothL1 {
        pred: NodeId,
        target: NodeId,
    },
    Sum {
        input: NodeId,
    },
    WeightedSum {
        input: NodeId,
        weights: Vec<T>,
    },
    ToNhwc {
        input: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    SelectRows {
        input: NodeId,
        indices: Vec<usize>,
    },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => {
                let mut p = vec![*input, *weight];
                if let Some(b) = bias {
                    p.push(*b);
                }
                p
            }
            Op::Pool2d { input, .. }
            | Op::Relu { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::WeightedSum { input, .. }
            | Op::ToNhwc { input }
            | Op::Reshape { input }
            | Op::SelectRows { input, .. } => vec![*input],
            Op::ConcatChannels { parts } => parts.clone(),
            Op::ScaleAdd { main, shortcut, .. } => vec![*main, *shortcut],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, target } => vec![*pred, *target],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Reverse-mode tape over eagerly evaluated tensors.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grads_live: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grads_live: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::IndexOutOfRange(format!("node {}", id.0)));
        }
        Ok(())
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass, if one reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient as a tensor shaped like the node's value (zeros when the
    /// backward pass did not reach it).
    pub fn grad_tensor(&self, id: NodeId) -> Tensor<T> {
        let shape = self.nodes[id.0].value.shape();
        match &self.grads[id.0] {
            Some(g) => Tensor::from_vec(shape, g.clone()).expect("grad shape matches value"),
            None => Tensor::zeros(shape),
        }
    }

    /// Drop all gradients, allowing another backward pass.
    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.grads_live = false;
    }

    /// Insert a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Cross-correlation with stride, zero padding and dilation.
    /// `weight` is `(C_out, C_in, kh, kw)`; `bias` holds `C_out` values.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>, params: ConvParams) -> Result<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let (out, cache) = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &params,
        )?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, params, cache }))
    }

    /// Max or average pooling over the dilated tap grid.
    pub fn pool2d(&mut self, input: NodeId, kind: PoolKind, params: ConvParams) -> Result<NodeId> {
        self.check(input)?;
        let (out, cache) = pool2d_forward(self.value(input), kind, &params)?;
        Ok(self.push(out, Op::Pool2d { input, kind, params, cache }))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out = Tensor::from_vec(
            x.shape(),
            x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Relu { input })
    }

    /// Concatenate along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidParam("concat_channels needs at least one part".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.value(parts[0]).shape();
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{} vs {}", first, s),
                });
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = Tensor::zeros(out_shape);
        let plane = first.h * first.w;
        for n in 0..first.n {
            let mut c_off = 0;
            for &p in parts {
                let s = self.value(p).shape();
                let src = &self.value(p).data()[n * s.c * plane..(n + 1) * s.c * plane];
                let dst_base = (n * c_total + c_off) * plane;
                out.data_mut()[dst_base..dst_base + s.c * plane].copy_from_slice(src);
                c_off += s.c;
            }
        }
        Ok(self.push(out, Op::ConcatChannels { parts: parts.to_vec() }))
    }

    /// `main + alpha * shortcut`, shapes identical.
    pub fn scale_add(&mut self, main: NodeId, shortcut: NodeId, alpha: T) -> Result<NodeId> {
        self.check(main)?;
        self.check(shortcut)?;
        let (a, b) = (self.value(main), self.value(shortcut));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "scale_add",
                detail: format!("{} vs {}", a.shape(), b.shape()),
            });
        }
        let out = Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| x + alpha * y).collect(),
        )
        .expect("same shape");
        if !out.all_finite() {
            return Err(Error::NonFinite { op: "scale_add" });
        }
        Ok(self.push(out, Op::ScaleAdd { main, shortcut, alpha }))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let x = self.value(input);
        let out = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v * factor).collect()).expect("same shape");
        self.push(out, Op::Scale { input, factor })
    }

    /// Per-row softmax cross-entropy. `logits` is interpreted as `(R, K)`
    /// rows with `R = shape.n` and `K = c*h*w`; the result is `(R,1,1,1)`.
    /// Stabilized by max subtraction.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let x = self.value(logits);
        let rows = x.shape().n;
        let k = x.shape().c * x.shape().h * x.shape().w;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "softmax_ce",
                detail: format!("{} rows vs {} labels", rows, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::IndexOutOfRange(format!("label {} with {} classes", bad, k)));
        }
        let mut probs = vec![T::zero(); rows * k];
        let mut losses = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * k + j] = e;
                z = z + e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / z;
            }
            // -log softmax(label) = -(x[l] - m - ln z)
            losses.push(z.ln() - (row[labels[r]] - m));
        }
        let out = Tensor::from_vec(Shape::new(rows, 1, 1, 1), losses).expect("row count");
        if !out.all_finite() {
            return Err(Error::NonFinite { op: "softmax_ce" });
        }
        Ok(self.push(out, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    /// Elementwise smooth-L1 of `pred - target`: `0.5 x^2` for `|x| < 1`,
    /// `|x| - 0.5` otherwise.
    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.check(pred)?;
        self.check(target)?;
        let (a, b) = (self.value(pred), self.value(target));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1",
                detail: format!("{} vs {}", a.shape(), b.shape()),
            });
        }
        let half = T::from_f64(0.5);
        let out = Tensor::from_vec(
            a.shape(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&p, &t)| {
                    let x = p - t;
                    if x.abs() < T::one() {
                        half * x * x
                    } else {
                        x.abs() - half
                    }
                })
                .collect(),
        )
        .expect("same shape");
        if !out.all_finite() {
            return Err(Error::NonFinite { op: "smooth_l1" });
        }
        Ok(self.push(out, Op::SmoothL1 { pred, target }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let mut acc = T::zero();
        for &v in x.data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), Op::Sum { input })
    }

    /// Dot product with a constant coefficient vector, as a scalar node.
    pub fn weighted_sum(&mut self, input: NodeId, weights: Vec<T>) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        if weights.len() != x.data().len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} weights vs {} elements", weights.len(), x.data().len()),
            });
        }
        let mut acc = T::zero();
        for (&v, &w) in x.data().iter().zip(&weights) {
            acc = acc + v * w;
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite { op: "weighted_sum" });
        }
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum { input, weights }))
    }

    /// Materialize `(N,C,H,W)` as `(N,H,W,C)`; used to bring head outputs
    /// into prior-major row order before reshaping.
    pub fn to_nhwc(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let s = x.shape();
        let out_shape = Shape::new(s.n, s.h, s.w, s.c);
        let mut out = Tensor::zeros(out_shape);
        {
            let src = x.data();
            let dst = out.data_mut();
            for n in 0..s.n {
                for c in 0..s.c {
                    for h in 0..s.h {
                        let src_base = ((n * s.c + c) * s.h + h) * s.w;
                        for w in 0..s.w {
                            dst[((n * s.h + h) * s.w + w) * s.c + c] = src[src_base + w];
                        }
                    }
                }
            }
        }
        self.push(out, Op::ToNhwc { input })
    }

    /// View with a new shape of equal element count; data order unchanged.
    pub fn reshape(&mut self, input: NodeId, shape: Shape) -> Result<NodeId> {
        self.check(input)?;
        let out = self.value(input).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { input }))
    }

    /// Gather rows along axis 0 (a row is one `(c,h,w)` block). Duplicate
    /// indices are allowed; the backward pass scatter-adds.
    pub fn select_rows(&mut self, input: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let s = x.shape();
        let row = s.c * s.h * s.w;
        if let Some(&bad) = indices.iter().find(|&&i| i >= s.n) {
            return Err(Error::IndexOutOfRange(format!("row {} of {}", bad, s.n)));
        }
        let mut out = Tensor::zeros(Shape::new(indices.len(), s.c, s.h, s.w));
        for (o, &i) in indices.iter().enumerate() {
            out.data_mut()[o * row..(o + 1) * row].copy_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        Ok(self.push(out, Op::SelectRows { input, indices }))
    }

    /// Nodes reachable from `start` by following parent edges (inclusive).
    fn ancestors(&self, start: NodeId) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack = vec![start.0];
        while let Some(i) = stack.pop() {
            if mark[i] {
                continue;
            }
            mark[i] = true;
            for p in self.nodes[i].op.parents() {
                if !mark[p.0] {
                    stack.push(p.0);
                }
            }
        }
        mark
    }

    /// Nodes that have `root` somewhere in their ancestry (inclusive).
    fn descendants(&self, root: NodeId) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        mark[root.0] = true;
        for i in root.0 + 1..self.nodes.len() {
            if self.nodes[i].op.parents().iter().any(|p| mark[p.0]) {
                mark[i] = true;
            }
        }
        mark
    }

    /// Populate gradients for every node reachable from the scalar `loss`.
    ///
    /// Fan-out accumulates additively. Calling `backward` again without
    /// `clear_grads` is an error: silent accumulation across passes would
    /// double-count.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.grads_live {
            return Err(Error::BackwardAlreadyRun);
        }
        let shape = self.nodes[loss.0].value.shape();
        if shape.count() != 1 {
            return Err(Error::NonScalarLoss(format!("{}", shape)));
        }
        let needed = self.ancestors(loss);
        self.grads[loss.0] = Some(vec![T::one()]);
        self.sweep(loss.0, &needed);
        self.grads_live = true;
        Ok(())
    }

    /// Gradient of one output unit with respect to `input`:
    /// seeds 1.0 at `unit` of `output` (zeros elsewhere) and back-propagates.
    ///
    /// Clears any previous gradients first; each call is an independent
    /// seeding. Gradient computation is pruned to the nodes linking `output`
    /// to `input`, so parameter gradients are skipped.
    pub fn input_gradient(&mut self, output: NodeId, unit: (usize, usize, usize, usize), input: NodeId) -> Result<Tensor<T>> {
        self.check(output)?;
        self.check(input)?;
        let oshape = self.nodes[output.0].value.shape();
        let (n, c, h, w) = unit;
        if !oshape.contains(n, c, h, w) {
            return Err(Error::IndexOutOfRange(format!("unit ({n},{c},{h},{w}) of {oshape}")));
        }
        self.clear_grads();

        let anc = self.ancestors(output);
        let desc = self.descendants(input);
        let needed: Vec<bool> = anc.iter().zip(&desc).map(|(&a, &d)| a && d).collect();
        if !needed[output.0] {
            // output does not depend on input at all
            return Ok(Tensor::zeros(self.nodes[input.0].value.shape()));
        }

        let mut seed = vec![T::zero(); oshape.count()];
        seed[oshape.offset(n, c, h, w)] = T::one();
        self.grads[output.0] = Some(seed);
        self.sweep(output.0, &needed);
        let result = self.grad_tensor(input);
        self.grads_live = true;
        Ok(result)
    }

    /// Reverse sweep from `start` down to node 0, restricted to `needed`.
    fn sweep(&mut self, start: usize, needed: &[bool]) {
        for i in (0..=start).rev() {
            if !needed[i] || self.grads[i].is_none() {
                continue;
            }
            let grad = self.grads[i].take().expect("checked above");
            self.dispatch(i, &grad, needed);
            self.grads[i] = Some(grad);
        }
    }

    fn add_grad(&mut self, id: NodeId, contribution: impl Iterator<Item = T>) {
        let len = self.nodes[id.0].value.shape().count();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
        for (g, c) in slot.iter_mut().zip(contribution) {
            *g = *g + c;
        }
    }

    fn dispatch(&mut self, i: usize, grad: &[T], needed: &[bool]) {
        // Ops whose context borrows from self are handled with explicit
        // clones of the small metadata they need.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, params, .. } => {
                let (input, weight, bias, params) = (*input, *weight, *bias, *params);
                if needed[input.0] {
                    let gi = {
                        let Op::Conv2d { cache, .. } = &self.nodes[i].op else { unreachable!() };
                        conv2d_backward_input(
                            &self.nodes[weight.0].value,
                            grad,
                            &params,
                            self.nodes[input.0].value.shape(),
                            cache,
                        )
                    };
                    self.add_grad(input, gi.into_vec().into_iter());
                }
                let want_w = needed[weight.0];
                let want_b = bias.map(|b| needed[b.0]).unwrap_or(false);
                if want_w || want_b {
                    let (dw, db) = {
                        let Op::Conv2d { cache, .. } = &self.nodes[i].op else { unreachable!() };
                        conv2d_backward_params(
                            grad,
                            self.nodes[weight.0].value.shape(),
                            self.nodes[input.0].value.shape().n,
                            cache,
                            want_b,
                        )
                    };
                    if want_w {
                        self.add_grad(weight, dw.into_iter());
                    }
                    if let (Some(b), Some(db)) = (bias, db) {
                        self.add_grad(b, db.into_iter());
                    }
                }
            }
            Op::Pool2d { input, kind, params, .. } => {
                let (input, kind, params) = (*input, *kind, *params);
                if needed[input.0] {
                    let gi = {
                        let Op::Pool2d { cache, .. } = &self.nodes[i].op else { unreachable!() };
                        pool2d_backward(self.nodes[input.0].value.shape(), kind, &params, cache, grad)
                    };
                    self.add_grad(input, gi.into_vec().into_iter());
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if needed[input.0] {
                    let mask: Vec<T> = self.nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    self.add_grad(input, mask.into_iter());
                }
            }
            Op::ConcatChannels { parts } => {
                let parts = parts.clone();
                let out_shape = self.nodes[i].value.shape();
                let plane = out_shape.h * out_shape.w;
                let mut c_off = 0;
                for p in parts {
                    let s = self.nodes[p.0].value.shape();
                    if needed[p.0] {
                        let mut slice = vec![T::zero(); s.count()];
                        for n in 0..s.n {
                            let src_base = (n * out_shape.c + c_off) * plane;
                            let dst_base = n * s.c * plane;
                            slice[dst_base..dst_base + s.c * plane]
                                .copy_from_slice(&grad[src_base..src_base + s.c * plane]);
                        }
                        self.add_grad(p, slice.into_iter());
                    }
                    c_off += s.c;
                }
            }
            Op::ScaleAdd { main, shortcut, alpha } => {
                let (main, shortcut, alpha) = (*main, *shortcut, *alpha);
                if needed[main.0] {
                    self.add_grad(main, grad.iter().copied());
                }
                if needed[shortcut.0] {
                    self.add_grad(shortcut, grad.iter().map(|&g| alpha * g));
                }
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                if needed[input.0] {
                    self.add_grad(input, grad.iter().map(|&g| factor * g));
                }
            }
            Op::SoftmaxCe { logits, .. } => {
                let logits = *logits;
                if needed[logits.0] {
                    let contribution: Vec<T> = {
                        let Op::SoftmaxCe { labels, probs, .. } = &self.nodes[i].op else { unreachable!() };
                        let k = probs.len() / labels.len();
                        let mut out = Vec::with_capacity(probs.len());
                        for (r, &label) in labels.iter().enumerate() {
                            let g = grad[r];
                            for j in 0..k {
                                let indicator = if j == label { T::one() } else { T::zero() };
                                out.push((probs[r * k + j] - indicator) * g);
                            }
                        }
                        out
                    };
                    self.add_grad(logits, contribution.into_iter());
                }
            }
            Op::SmoothL1 { pred, target } => {
                let (pred, target) = (*pred, *target);
                let diff: Vec<T> = self.nodes[pred.0]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[target.0].value.data())
                    .zip(grad)
                    .map(|((&p, &t), &g)| {
                        let x = p - t;
                        let d = if x.abs() < T::one() {
                            x
                        } else if x > T::zero() {
                            T::one()
                        } else {
                            -T::one()
                        };
                        d * g
                    })
                    .collect();
                if needed[pred.0] {
                    self.add_grad(pred, diff.iter().copied());
                }
                if needed[target.0] {
                    self.add_grad(target, diff.iter().map(|&d| -d));
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if needed[input.0] {
                    let g = grad[0];
                    let len = self.nodes[input.0].value.shape().count();
                    self.add_grad(input, std::iter::repeat(g).take(len));
                }
            }
            Op::WeightedSum { input, .. } => {
                let input = *input;
                if needed[input.0] {
                    let contribution: Vec<T> = {
                        let Op::WeightedSum { weights, .. } = &self.nodes[i].op else { unreachable!() };
                        let g = grad[0];
                        weights.iter().map(|&w| w * g).collect()
                    };
                    self.add_grad(input, contribution.into_iter());
                }
            }
            Op::ToNhwc { input } => {
                let input = *input;
                if needed[input.0] {
                    let s = self.nodes[input.0].value.shape();
                    let mut gi = vec![T::zero(); s.count()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for h in 0..s.h {
                                for w in 0..s.w {
                                    gi[((n * s.c + c) * s.h + h) * s.w + w] =
                                        grad[((n * s.h + h) * s.w + w) * s.c + c];
                                }
                            }
                        }
                    }
                    self.add_grad(input, gi.into_iter());
                }
            }
            Op::Reshape { input } => {
                let input = *input;
                if needed[input.0] {
                    self.add_grad(input, grad.iter().copied());
                }
            }
            Op::SelectRows { input, .. } => {
                let input = *input;
                if needed[input.0] {
                    let s = self.nodes[input.0].value.shape();
                    let row = s.c * s.h * s.w;
                    let mut gi = vec![T::zero(); s.count()];
                    {
                        let Op::SelectRows { indices, .. } = &self.nodes[i].op else { unreachable!() };
                        for (o, &idx) in indices.iter().enumerate() {
                            for j in 0..row {
                                gi[idx * row + j] = gi[idx * row + j] + grad[o * row + j];
                            }
                        }
                    }
                    self.add_grad(input, gi.into_iter());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(Shape::new(1, 2, 2, 1), 3.0));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_twice_without_reset_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardAlreadyRun)));
        g.clear_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates_additively() {
        // loss = sum(x) + sum(x) => grad = 2
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(5.0));
        let a = g.sum(x);
        let b = g.sum(x);
        let loss = g.scale_add(a, b, 1.0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn relu_values_and_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(3, 1, 1, 1), vec![-1.0, 0.0, 2.5]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.5]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_shapes_and_backward_split() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::filled(Shape::new(1, 2, 4, 4), 1.0));
        let b = g.leaf(Tensor::filled(Shape::new(1, 3, 4, 4), 2.0));
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(cat).shape(), Shape::new(1, 5, 4, 4));
        let loss = g.sum(cat);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 32]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 48]);
    }

    #[test]
    fn concat_single_part_is_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let cat = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(cat).data(), g.value(a).data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        let b = g.leaf(Tensor::zeros(Shape::new(1, 1, 3, 4)));
        assert!(g.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn scale_add_alpha_zero_keeps_main() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap());
        let b = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![9.0, 9.0]).unwrap());
        let y = g.scale_add(a, b, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0]);
    }

    #[test]
    fn scale_add_cancellation_gives_zeros() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap());
        let neg = g.scale(a, -1.0);
        let y = g.scale_add(a, neg, 1.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_ce_uniform_two_class() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.0, 0.0]).unwrap());
        let loss = g.softmax_ce(logits, &[0]).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_is_stable_under_large_logits() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![100.0, 0.0]).unwrap());
        let loss = g.softmax_ce(logits, &[0]).unwrap();
        let v = g.value(loss).item();
        assert!(v.is_finite());
        assert!(v < 1e-40);
    }

    #[test]
    fn softmax_ce_rejects_label_out_of_range() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        assert!(g.softmax_ce(logits, &[3]).is_err());
    }

    #[test]
    fn smooth_l1_pointwise_values() {
        let mut g = Graph::<f64>::new();
        let pred = g.leaf(Tensor::from_vec(Shape::new(3, 1, 1, 1), vec![0.0, 0.5, 2.0]).unwrap());
        let target = g.leaf(Tensor::zeros(Shape::new(3, 1, 1, 1)));
        let y = g.smooth_l1(pred, target).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.125, 1.5]);
    }

    #[test]
    fn select_rows_gathers_and_scatters() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(3, 2, 1, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let sel = g.select_rows(x, vec![2, 0, 2]).unwrap();
        assert_eq!(g.value(sel).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum(sel);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn nhwc_round_trip_through_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, h, w| (c * 4 + h * 2 + w) as f64));
        let y = g.to_nhwc(x);
        assert_eq!(g.value(y).shape(), Shape::new(1, 2, 2, 2));
        // out[n,h,w,c]
        assert_eq!(g.value(y).at(0, 0, 0, 0), 0.0); // h0 w0 c0
        assert_eq!(g.value(y).at(0, 0, 0, 1), 4.0); // h0 w0 c1
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let loss = g.weighted_sum(y, w).unwrap();
        g.backward(loss).unwrap();
        // grad in NCHW order equals the weights permuted back
        assert_eq!(g.grad(x).unwrap(), &[1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn input_gradient_identity_is_one_hot() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(Shape::new(1, 1, 3, 3), 2.0));
        let y = g.scale(x, 1.0);
        let map = g.input_gradient(y, (0, 0, 1, 2), x).unwrap();
        let mut expected = Tensor::zeros(Shape::new(1, 1, 3, 3));
        expected.set(0, 0, 1, 2, 1.0);
        assert_eq!(map.data(), expected.data());
    }

    #[test]
    fn input_gradient_rejects_out_of_range_unit() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 3, 3)));
        let y = g.relu(x);
        assert!(g.input_gradient(y, (0, 0, 3, 0), x).is_err());
    }

    #[test]
    fn input_gradient_can_repeat_without_manual_reset() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), 1.0));
        let y = g.scale(x, 2.0);
        let a = g.input_gradient(y, (0, 0, 0, 0), x).unwrap();
        let b = g.input_gradient(y, (0, 0, 0, 0), x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.at(0, 0, 0, 0), 2.0);
    }
}
