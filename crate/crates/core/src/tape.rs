//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every op applied to its variables. [`Graph::backward`]
//! walks the records in exact reverse order, accumulating gradients for every
//! node that (transitively) depends on a differentiable leaf.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{dim_err, Error, Result};
use crate::labels::LabelMap;
use crate::ops;
use crate::tensor::{Real, Shape, Tensor};
use crate::warp;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    Concat,
    ScaleChannels,
    Add,
    Sub,
    Warp,
    SubsampleFlow,
    MaxPool2,
    Upsample,
    SoftmaxXent,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, padding: usize, stride: usize },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    ScaleChannels { x: Var, w: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Warp { features: Var, flow: Var, eps: T },
    SubsampleFlow { flow: Var, stride: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample { x: Var },
    SoftmaxXent { logits: Var, labels: Vec<LabelMap>, ignore: u8, count: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::Concat { .. } => OpKind::Concat,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Warp { .. } => OpKind::Warp,
            Op::SubsampleFlow { .. } => OpKind::SubsampleFlow,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    check_finite: bool,
    fault: Option<OpKind>,
    visit_log: Option<Vec<usize>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), check_finite: false, fault: None, visit_log: None }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    /// Test hook: scales the input gradients computed by every op of `kind`
    /// by 1.5, breaking the backward rule on purpose.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Records the node index of each op visited by the next backward pass.
    pub fn record_visits(&mut self) {
        self.visit_log = Some(Vec::new());
    }

    pub fn visits(&self) -> Option<&[usize]> {
        self.visit_log.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op_name(op.kind())));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf; its gradient is available after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass's output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize, stride: usize) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), padding, stride)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, padding, stride }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu_forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_forward(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat { parts: parts.to_vec() }, rg)
    }

    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::scale_channels_forward(self.value(x), self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::ScaleChannels { x, w }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_same(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_same(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub { a, b }, rg)
    }

    /// Bilinear warp of `features` by the reverse flow `flow` with nudge `epsilon`.
    pub fn warp(&mut self, features: Var, flow: Var, epsilon: f64) -> Result<Var> {
        if !(epsilon > 0.0) {
            return Err(Error::Validation(format!("warp epsilon must be positive, got {epsilon}")));
        }
        let eps = T::c(epsilon);
        let out = warp::warp_forward(self.value(features), self.value(flow), eps)?;
        let rg = self.rg(features) || self.rg(flow);
        self.push(out, Op::Warp { features, flow, eps }, rg)
    }

    pub fn subsample_flow(&mut self, flow: Var, stride: usize) -> Result<Var> {
        if self.shape(flow).c != 2 {
            return Err(dim_err!("flow must have 2 channels, got {}", self.shape(flow)));
        }
        if stride == 1 {
            return Ok(flow);
        }
        let out = warp::subsample_forward(self.value(flow), stride)?;
        let rg = self.rg(flow);
        self.push(out, Op::SubsampleFlow { flow, stride }, rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.h == out_h && s.w == out_w {
            return Ok(x);
        }
        let out = ops::upsample_forward(self.value(x), out_h, out_w)?;
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x }, rg)
    }

    /// Mean softmax cross-entropy over non-ignored pixels, as a 1x1x1x1 node.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[&LabelMap], ignore: u8) -> Result<Var> {
        let (loss, count) = ops::softmax_xent_forward(self.value(logits), labels, ignore)?;
        let rg = self.rg(logits);
        let labels = labels.iter().map(|&l| l.clone()).collect();
        self.push(Tensor::full(Shape::new(1, 1, 1, 1), loss), Op::SoftmaxXent { logits, labels, ignore, count }, rg)
    }

    /// Backpropagates from a scalar output (seed gradient 1).
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let s = self.shape(output);
        if s.numel() != 1 {
            return Err(dim_err!("backward from non-scalar {s}; use backward_with"));
        }
        self.backward_with(output, Tensor::full(s, T::one()))
    }

    /// Backpropagates an explicit upstream gradient for `output`.
    pub fn backward_with(&mut self, output: Var, upstream: Tensor<T>) -> Result<()> {
        if upstream.shape() != self.shape(output) {
            return Err(dim_err!("upstream {} does not match output {}", upstream.shape(), self.shape(output)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(upstream);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(log) = self.visit_log.as_mut() {
                if !matches!(self.nodes[i].op, Op::Leaf) {
                    log.push(i);
                }
            }
            let contributions = self.input_grads(i, &g);
            grads[i] = Some(g);
            let faulty = self.fault == Some(self.nodes[i].op.kind());
            for (var, mut cg) in contributions {
                if !self.rg(var) {
                    continue;
                }
                if faulty {
                    let k = T::c(1.5);
                    cg = cg.map(|v| v * k);
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(cg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, padding, stride } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = ops::conv2d_backward(self.value(*x), self.value(*w), g, *padding, *stride, need);
                if let Some(gx) = cg.input {
                    out.push((*x, gx));
                }
                if let Some(gw) = cg.weight {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    let shape = self.shape(*b);
                    out.push((*b, gb.reshape(shape).expect("bias length checked in forward")));
                }
            }
            Op::Relu { x } => out.push((*x, ops::relu_backward(self.value(*x), g))),
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c;
                    if self.rg(p) {
                        out.push((p, g.slice_channels(start, c).expect("concat layout")));
                    }
                    start += c;
                }
            }
            Op::ScaleChannels { x, w } => {
                let (gx, gw) = ops::scale_channels_backward(self.value(*x), self.value(*w), g);
                let wshape = self.shape(*w);
                out.push((*x, gx));
                out.push((*w, gw.reshape(wshape).expect("weight length checked in forward")));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Warp { features, flow, eps } => {
                let need = (self.rg(*features), self.rg(*flow));
                let (gf, gw) = warp::warp_backward_kernel(g, self.value(*features), self.value(*flow), *eps, need);
                if let Some(gf) = gf {
                    out.push((*features, gf));
                }
                if let Some(gw) = gw {
                    out.push((*flow, gw));
                }
            }
            Op::SubsampleFlow { flow, stride } => {
                out.push((*flow, warp::subsample_backward(self.shape(*flow), g, *stride)));
            }
            Op::MaxPool2 { x, argmax } => out.push((*x, ops::maxpool2_backward(self.shape(*x), argmax, g))),
            Op::Upsample { x } => out.push((*x, ops::upsample_backward(self.shape(*x), g))),
            Op::SoftmaxXent { logits, labels, ignore, count } => {
                let refs: Vec<&LabelMap> = labels.iter().collect();
                out.push((*logits, ops::softmax_xent_backward(self.value(*logits), &refs, *ignore, *count, g.data()[0])));
            }
        }
        out
    }

    /// Hash of every piecewise-selection decision made in the forward pass:
    /// ReLU signs, max-pool winners, and warp cells and clamp flags. Two
    /// forward passes with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                Op::Warp { flow, eps, .. } => {
                    let f = self.value(*flow);
                    let s = f.shape();
                    for n in 0..s.n {
                        for y in 0..s.h {
                            for x in 0..s.w {
                                let sp = warp::sample_point(x, y, f.at(n, 0, y, x), f.at(n, 1, y, x), *eps, s.w, s.h);
                                (sp.x1, sp.y1, sp.clamped_x, sp.clamped_y).hash(&mut h);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}

pub fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::Conv2d => "conv2d",
        OpKind::Relu => "relu",
        OpKind::Concat => "concat_channels",
        OpKind::ScaleChannels => "scale_per_channel",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Warp => "warp",
        OpKind::SubsampleFlow => "subsample_flow",
        OpKind::MaxPool2 => "maxpool2",
        OpKind::Upsample => "upsample_bilinear",
        OpKind::SoftmaxXent => "softmax_xent_loss",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_box_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let w = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let w = g.constant(Tensor::zeros(Shape::new(2, 5, 3, 3)));
        let msg = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("1x3x4x4") && msg.contains("2x5x3x3"), "{msg}");
    }

    #[test]
    fn flowcnn_first_layer_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 11, 8, 8)));
        let w = g.constant(Tensor::zeros(Shape::new(16, 11, 3, 3)));
        let b = g.constant(Tensor::vector(vec![0.0; 16]));
        let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 16, 8, 8));
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(Shape::new(1, 3, 1, 1), &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        g.backward_with(y, Tensor::full(Shape::new(1, 3, 1, 1), 1.0)).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 2, 2, 2), -0.5));
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        g.backward_with(y, Tensor::full(Shape::new(1, 2, 2, 2), 3.0)).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_single_part_and_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(Shape::new(1, 2, 4, 4), 1.0));
        let b = g.constant(Tensor::full(Shape::new(1, 2, 4, 4), 2.0));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), Shape::new(1, 4, 4, 4));
        let one = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(one), g.value(a));
        let odd = g.constant(Tensor::zeros(Shape::new(1, 1, 3, 4)));
        assert!(matches!(g.concat_channels(&[a, odd]), Err(Error::Dimension(_))));
    }

    #[test]
    fn scale_by_zero_weights() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(Shape::new(1, 2, 1, 2), &[1.0, 2.0, 3.0, 4.0]));
        let w = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = g.scale_channels(x, w).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        g.backward_with(y, t(Shape::new(1, 2, 1, 2), &[1.0, 1.0, 2.0, 0.5])).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(g.grad(w).unwrap().data(), &[3.0, 8.0]);
        let bad = g.leaf(Tensor::vector(vec![1.0; 3]));
        assert!(matches!(g.scale_channels(x, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn scale_by_ones_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(Shape::new(1, 2, 1, 2), &[1.0, -2.0, 3.0, 4.0]).cast());
        let w = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = g.scale_channels(x, w).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn add_identity_commutes_and_rejects_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.1, 0.2, 0.3]).unwrap());
        let b = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1e-8, 3.0, -7.1]).unwrap());
        let z = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 3)));
        let az = g.add(a, z).unwrap();
        assert_eq!(g.value(az), g.value(a));
        let ab = g.add(a, b).unwrap();
        let ba = g.add(b, a).unwrap();
        let bits = |v: Var, g: &Graph<f32>| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ab, &g), bits(ba, &g));
        let other = g.constant(Tensor::zeros(Shape::new(1, 1, 3, 1)));
        assert!(g.add(a, other).is_err());
    }

    #[test]
    fn xent_uniform_and_confident() {
        let labels = LabelMap::from_rows(&[&[0, 1], &[2, 3]]).unwrap();
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::zeros(Shape::new(1, 4, 2, 2)));
        let loss = g.softmax_xent(l, &[&labels], 255).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::<f64>::zeros(Shape::new(1, 4, 2, 2));
        for (p, &c) in labels.data().iter().enumerate() {
            logits.set(0, c as usize, p / 2, p % 2, 50.0);
        }
        let l = g.leaf(logits);
        let loss = g.softmax_xent(l, &[&labels], 255).unwrap();
        assert!(g.value(loss).data()[0] < 1e-15);
    }

    #[test]
    fn xent_rejects_out_of_range_labels() {
        let labels = LabelMap::from_rows(&[&[0, 5]]).unwrap();
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::zeros(Shape::new(1, 3, 1, 2)));
        assert!(matches!(g.softmax_xent(l, &[&labels], 255), Err(Error::Validation(_))));
        let ignored = LabelMap::from_rows(&[&[0, 255]]).unwrap();
        assert!(g.softmax_xent(l, &[&ignored], 255).is_ok());
    }

    #[test]
    fn backward_visits_in_reverse_recording_order() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 0.5));
        let a = g.relu(x).unwrap();
        let b = g.add(a, x).unwrap();
        let c = g.sub(b, a).unwrap();
        g.record_visits();
        g.backward_with(c, Tensor::full(Shape::new(1, 1, 2, 2), 1.0)).unwrap();
        assert_eq!(g.visits().unwrap(), &[c.index(), b.index(), a.index()]);
    }

    #[test]
    fn finite_checks_catch_overflow() {
        let mut g = Graph::<f32>::new().with_finite_checks();
        let a = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), f32::MAX));
        assert!(matches!(g.add(a, a), Err(Error::NonFinite("add"))));
    }
}
