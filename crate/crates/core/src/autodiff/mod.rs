//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`GraphBase`] is an eager tape: every op evaluates immediately and
//! records what it needs for the backward pass (max-pool argmax indices,
//! dropout masks). Node ids are indices into the tape, so ops can only refer
//! to earlier nodes and a single reverse sweep visits each node exactly once.
//!
//! There is no broadcasting; elementwise binaries demand equal shapes and
//! scalar interaction goes through [`GraphBase::scale`] /
//! [`GraphBase::add_scalar`]. Losses reduce to a rank-1 single-element
//! tensor before [`GraphBase::backward`] is called.

mod kernels;

pub use kernels::{Conv3dAttrs, Pool3dAttrs};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<S> {
    Leaf,
    Conv3d { input: NodeId, weight: NodeId, bias: Option<NodeId>, attrs: Conv3dAttrs },
    TConv3d { input: NodeId, weight: NodeId, bias: Option<NodeId>, attrs: Conv3dAttrs },
    MaxPool3d { input: NodeId, argmax: Vec<u32> },
    Dense { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    Softmax { input: NodeId, axis: usize },
    Dropout { input: NodeId, mask: Option<Vec<S>> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Add { lhs: NodeId, rhs: NodeId },
    Sub { lhs: NodeId, rhs: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    Div { lhs: NodeId, rhs: NodeId },
    Log { input: NodeId },
    Scale { input: NodeId, factor: S },
    AddScalar { input: NodeId },
    ReduceSum { input: NodeId },
    ReduceMean { input: NodeId },
    BceWithLogits { logits: NodeId, targets: NodeId },
}

struct Node<S> {
    value: TensorBase<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Per-node gradients produced by a backward sweep.
pub struct GradientsBase<S> {
    slots: Vec<Option<TensorBase<S>>>,
}

impl<S: Scalar> GradientsBase<S> {
    pub fn get(&self, id: NodeId) -> Option<&TensorBase<S>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<TensorBase<S>> {
        self.slots[id.0].take()
    }
}

pub struct GraphBase<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: Vec<NodeId>,
}

impl<S: Scalar> Default for GraphBase<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> GraphBase<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&mut self, value: TensorBase<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; registered so optimizers can walk the graph's
    /// parameters in creation order.
    pub fn param(&mut self, value: TensorBase<S>) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push(id);
        id
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &TensorBase<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: TensorBase<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        attrs: Conv3dAttrs,
    ) -> Result<NodeId> {
        let value = kernels::conv3d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &attrs,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv3d { input, weight, bias, attrs }, needs))
    }

    pub fn transposed_conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        attrs: Conv3dAttrs,
    ) -> Result<NodeId> {
        let value = kernels::tconv3d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &attrs,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::TConv3d { input, weight, bias, attrs }, needs))
    }

    pub fn maxpool3d(&mut self, input: NodeId, attrs: Pool3dAttrs) -> Result<NodeId> {
        let (value, argmax) = kernels::maxpool3d_forward(self.value(input), &attrs)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::MaxPool3d { input, argmax }, needs))
    }

    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let value = kernels::dense_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Dense { input, weight, bias }, needs))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| v.max(S::zero()));
        let needs = self.needs(input);
        self.push(value, Op::Relu { input }, needs)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(sigmoid_scalar);
        let needs = self.needs(input);
        self.push(value, Op::Sigmoid { input }, needs)
    }

    /// Softmax along `axis`, max-shifted per lane for stability.
    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let x = self.value(input);
        if axis >= x.shape().len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {} out of range for rank {}",
                axis,
                x.shape().len()
            )));
        }
        let (outer, len, inner) = lane_dims(x.shape(), axis);
        let mut value = x.clone();
        let data = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = S::neg_infinity();
                for j in 0..len {
                    m = m.max(data[base + j * inner]);
                }
                let mut z = S::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - m).exp();
                    data[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    data[base + j * inner] /= z;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(value, Op::Softmax { input, axis }, needs))
    }

    /// Inverted dropout. With `rng` present, elements are zeroed with
    /// probability `rate` and survivors scaled by `1/(1-rate)`; without an
    /// rng (inference) the op is the identity.
    pub fn dropout(
        &mut self,
        input: NodeId,
        rate: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {} outside [0, 1)", rate)));
        }
        let needs = self.needs(input);
        match rng {
            None => {
                let value = self.value(input).clone();
                Ok(self.push(value, Op::Dropout { input, mask: None }, needs))
            }
            Some(rng) => {
                let keep = 1.0 - rate;
                let scale = S::of(1.0 / keep);
                let mask: Vec<S> = (0..self.value(input).numel())
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { S::zero() })
                    .collect();
                let mut value = self.value(input).clone();
                for (v, &m) in value.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Ok(self.push(value, Op::Dropout { input, mask: Some(mask) }, needs))
            }
        }
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {} out of range for rank {}",
                axis,
                first.len()
            )));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(a, &d)| a != axis && d != first[a])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {}", s, first, axis),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = lane_dims(&shape, axis);
        let mut value = TensorBase::zeros(&shape);
        let out = value.data_mut();
        for o in 0..outer {
            let mut filled = 0;
            for &id in inputs {
                let t = self.value(id);
                let e = t.shape()[axis];
                let src = &t.data()[o * e * inner..(o + 1) * e * inner];
                out[(o * total + filled) * inner..(o * total + filled + e) * inner]
                    .copy_from_slice(src);
                filled += e;
            }
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, needs))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(lhs, rhs, "add")
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(lhs, rhs, "sub")
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(lhs, rhs, "mul")
    }

    pub fn div(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.value(rhs).data().iter().any(|&v| v == S::zero()) {
            return Err(Error::NonFinite("div by zero".into()));
        }
        self.binary(lhs, rhs, "div")
    }

    fn binary(&mut self, lhs: NodeId, rhs: NodeId, which: &'static str) -> Result<NodeId> {
        let (l, r) = (self.value(lhs), self.value(rhs));
        if l.shape() != r.shape() {
            return Err(Error::ShapeMismatch {
                op: which,
                detail: format!("{:?} vs {:?}", l.shape(), r.shape()),
            });
        }
        let data = l
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| match which {
                "add" => a + b,
                "sub" => a - b,
                "mul" => a * b,
                _ => a / b,
            })
            .collect();
        let value = TensorBase::new(l.shape(), data)?;
        let op = match which {
            "add" => Op::Add { lhs, rhs },
            "sub" => Op::Sub { lhs, rhs },
            "mul" => Op::Mul { lhs, rhs },
            _ => Op::Div { lhs, rhs },
        };
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, op, needs))
    }

    /// Natural log; rejects non-positive inputs so values stay finite.
    pub fn log(&mut self, input: NodeId) -> Result<NodeId> {
        if self.value(input).data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::NonFinite("log of non-positive value".into()));
        }
        let value = self.value(input).map(|v| v.ln());
        let needs = self.needs(input);
        Ok(self.push(value, Op::Log { input }, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: S) -> NodeId {
        let value = self.value(input).map(|v| v * factor);
        let needs = self.needs(input);
        self.push(value, Op::Scale { input, factor }, needs)
    }

    pub fn add_scalar(&mut self, input: NodeId, offset: S) -> NodeId {
        let value = self.value(input).map(|v| v + offset);
        let needs = self.needs(input);
        self.push(value, Op::AddScalar { input }, needs)
    }

    pub fn reduce_sum(&mut self, input: NodeId) -> NodeId {
        let value = TensorBase::scalar(self.value(input).sum());
        let needs = self.needs(input);
        self.push(value, Op::ReduceSum { input }, needs)
    }

    pub fn reduce_mean(&mut self, input: NodeId) -> NodeId {
        let t = self.value(input);
        let value = TensorBase::scalar(t.sum() / S::of(t.numel() as f64));
        let needs = self.needs(input);
        self.push(value, Op::ReduceMean { input }, needs)
    }

    /// Elementwise binary cross entropy on logits:
    /// `softplus(z) - target * z`, computed without forming `exp(z)`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (z, t) = (self.value(logits), self.value(targets));
        if z.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("{:?} vs {:?}", z.shape(), t.shape()),
            });
        }
        let data = z
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &t)| softplus_scalar(z) - t * z)
            .collect();
        let value = TensorBase::new(z.shape(), data)?;
        let needs = self.needs(logits) || self.needs(targets);
        Ok(self.push(value, Op::BceWithLogits { logits, targets }, needs))
    }

    /// Reverse sweep from a single-element `root`. Returns gradients for
    /// every node on a differentiable path between a parameter and the root.
    pub fn backward(&self, root: NodeId) -> Result<GradientsBase<S>> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a single element, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.needs(root) {
            return Err(Error::InvalidArgument(
                "backward root does not depend on any parameter".into(),
            ));
        }
        let mut slots: Vec<Option<TensorBase<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(TensorBase::full(self.value(root).shape(), S::one()));

        for idx in (0..=root.0).rev() {
            // Take the accumulated gradient out of its slot for the duration
            // of the visit (accumulate() needs the slot vector mutably) and
            // put it back afterwards so callers can read interior gradients,
            // e.g. GradCAM reading the bottleneck activation's.
            let Some(g) = slots[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Conv3d { input, weight, bias, attrs } => {
                    let (gin, gw, gb) = kernels::conv3d_backward(
                        self.value(*input),
                        self.value(*weight),
                        bias.is_some(),
                        attrs,
                        &g,
                    )?;
                    self.accumulate(&mut slots, *input, gin);
                    self.accumulate(&mut slots, *weight, gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        self.accumulate(&mut slots, *b, gb);
                    }
                }
                Op::TConv3d { input, weight, bias, attrs } => {
                    let (gin, gw, gb) = kernels::tconv3d_backward(
                        self.value(*input),
                        self.value(*weight),
                        bias.is_some(),
                        attrs,
                        &g,
                    )?;
                    self.accumulate(&mut slots, *input, gin);
                    self.accumulate(&mut slots, *weight, gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        self.accumulate(&mut slots, *b, gb);
                    }
                }
                Op::MaxPool3d { input, argmax } => {
                    let gin = kernels::maxpool3d_backward(argmax, &g, self.value(*input).shape());
                    self.accumulate(&mut slots, *input, gin);
                }
                Op::Dense { input, weight, bias } => {
                    let (gx, gw, gb) =
                        kernels::dense_backward(self.value(*input), self.value(*weight), bias.is_some(), &g);
                    self.accumulate(&mut slots, *input, gx);
                    self.accumulate(&mut slots, *weight, gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        self.accumulate(&mut slots, *b, gb);
                    }
                }
                Op::Relu { input } => {
                    let x = self.value(*input);
                    let mut gin = g.clone();
                    for (gi, &xi) in gin.data_mut().iter_mut().zip(x.data()) {
                        if xi <= S::zero() {
                            *gi = S::zero();
                        }
                    }
                    self.accumulate(&mut slots, *input, gin);
                }
                Op::Sigmoid { input } => {
                    let y = &self.nodes[idx].value;
                    let mut gin = g.clone();
                    for (gi, &yi) in gin.data_mut().iter_mut().zip(y.data()) {
                        *gi *= yi * (S::one() - yi);
                    }
                    self.accumulate(&mut slots, *input, gin);
                }
                Op::Softmax { input, axis } => {
                    let y = &self.nodes[idx].value;
                    let (outer, len, inner) = lane_dims(y.shape(), *axis);
                    let mut gin = g.clone();
                    let gd = gin.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut s = S::zero();
                            for j in 0..len {
                                s += gd[base + j * inner] * y.data()[base + j * inner];
                            }
                            for j in 0..len {
                                let yj = y.data()[base + j * inner];
                                gd[base + j * inner] = yj * (gd[base + j * inner] - s);
                            }
                        }
                    }
                    self.accumulate(&mut slots, *input, gin);
                }
                Op::Dropout { input, mask } => {
                    let gin = match mask {
                        None => g.clone(),
                        Some(mask) => {
                            let mut gin = g.clone();
                            for (gi, &m) in gin.data_mut().iter_mut().zip(mask) {
                                *gi *= m;
                            }
                            gin
                        }
                    };
                    self.accumulate(&mut slots, *input, gin);
                }
                Op::Concat { inputs, axis } => {
                    let shape = self.value(NodeId(idx)).shape().to_vec();
                    let (outer, total, inner) = lane_dims(&shape, *axis);
                    let mut filled = 0;
                    for &id in inputs {
                        let e = self.value(id).shape()[*axis];
                        let mut gin = TensorBase::zeros(self.value(id).shape());
                        for o in 0..outer {
                            let src = &g.data()
                                [(o * total + filled) * inner..(o * total + filled + e) * inner];
                            gin.data_mut()[o * e * inner..(o + 1) * e * inner].copy_from_slice(src);
                        }
                        self.accumulate(&mut slots, id, gin);
                        filled += e;
                    }
                }
                Op::Add { lhs, rhs } => {
                    self.accumulate(&mut slots, *lhs, g.clone());
                    self.accumulate(&mut slots, *rhs, g.clone());
                }
                Op::Sub { lhs, rhs } => {
                    self.accumulate(&mut slots, *lhs, g.clone());
                    self.accumulate(&mut slots, *rhs, g.map(|v| -v));
                }
                Op::Mul { lhs, rhs } => {
                    let (lv, rv) = (self.value(*lhs), self.value(*rhs));
                    let gl = elementwise(&g, rv, |a, b| a * b);
                    let gr = elementwise(&g, lv, |a, b| a * b);
                    self.accumulate(&mut slots, *lhs, gl);
                    self.accumulate(&mut slots, *rhs, gr);
                }
                Op::Div { lhs, rhs } => {
                    let rv = self.value(*rhs);
                    let out = &self.nodes[idx].value;
                    let gl = elementwise(&g, rv, |a, b| a / b);
                    let mut gr = elementwise(&g, out, |a, b| a * b);
                    for (gi, &r) in gr.data_mut().iter_mut().zip(rv.data()) {
                        *gi = -*gi / r;
                    }
                    self.accumulate(&mut slots, *lhs, gl);
                    self.accumulate(&mut slots, *rhs, gr);
                }
                Op::Log { input } => {
                    let gin = elementwise(&g, self.value(*input), |a, b| a / b);
                    self.accumulate(&mut slots, *input, gin);
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    self.accumulate(&mut slots, *input, g.map(|v| v * f));
                }
                Op::AddScalar { input } => {
                    self.accumulate(&mut slots, *input, g.clone());
                }
                Op::ReduceSum { input } => {
                    let gin = TensorBase::full(self.value(*input).shape(), g.data()[0]);
                    self.accumulate(&mut slots, *input, gin);
                }
                Op::ReduceMean { input } => {
                    let t = self.value(*input);
                    let gin = TensorBase::full(t.shape(), g.data()[0] / S::of(t.numel() as f64));
                    self.accumulate(&mut slots, *input, gin);
                }
                Op::BceWithLogits { logits, targets } => {
                    let (zv, tv) = (self.value(*logits), self.value(*targets));
                    let mut gz = g.clone();
                    for ((gi, &z), &t) in gz.data_mut().iter_mut().zip(zv.data()).zip(tv.data()) {
                        *gi *= sigmoid_scalar(z) - t;
                    }
                    self.accumulate(&mut slots, *logits, gz);
                    if self.needs(*targets) {
                        let mut gt = g.clone();
                        for (gi, &z) in gt.data_mut().iter_mut().zip(zv.data()) {
                            *gi *= -z;
                        }
                        self.accumulate(&mut slots, *targets, gt);
                    }
                }
            }
            slots[idx] = Some(g);
        }
        Ok(GradientsBase { slots })
    }

    fn accumulate(&self, slots: &mut [Option<TensorBase<S>>], id: NodeId, g: TensorBase<S>) {
        if !self.needs(id) {
            return;
        }
        match &mut slots[id.0] {
            Some(existing) => {
                for (e, &n) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += n;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn elementwise<S: Scalar>(
    a: &TensorBase<S>,
    b: &TensorBase<S>,
    f: impl Fn(S, S) -> S,
) -> TensorBase<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    TensorBase::new(a.shape(), data).expect("same shape")
}

fn sigmoid_scalar<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

fn softplus_scalar<S: Scalar>(z: S) -> S {
    z.max(S::zero()) + (S::one() + (-z.abs()).exp()).ln()
}
