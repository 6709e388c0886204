//! Eager computation graph with reverse-mode differentiation.
//!
//! Values are computed as ops are recorded. Nodes whose inputs do not need
//! gradients are stored as plain leaves, so an inference-mode graph keeps no
//! backward bookkeeping at all.

use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::store::{ParamId, ParamStore};
use crate::tensor::ensure_same_shape;
use crate::{ShapeError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvInputGrad { dy: Var, w: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulConst(Var, Rc<Tensor>),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Logit(Var, f64),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SampleSum(Var),
    SampleNorm(Var),
    Concat(Vec<Var>),
    Upsample2x(Var),
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    Reshape(Var),
    BroadcastBatch(Var),
    SelectBatch(Var, Vec<usize>),
    BceWithLogits(Var, Rc<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameters of one [`ParamStore`] inserted into a graph, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter in `bound`, zero-filled where the loss
    /// did not depend on a parameter.
    pub fn for_params(&self, bound: &Bound, store: &ParamStore) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(store.values())
            .map(|(v, p)| self.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// An eagerly evaluated computation graph.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records what is needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph in which nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable leaf (constant in inference graphs).
    pub fn input(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.leaf(value, rg)
    }

    /// Inserts every parameter of `store` as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store.values().iter().map(|t| self.input(t.clone())).collect();
        Bound { vars }
    }

    /// Inserts every parameter of `store` as a constant.
    pub fn freeze(&mut self, store: &ParamStore) -> Bound {
        let vars = store.values().iter().map(|t| self.constant(t.clone())).collect();
        Bound { vars }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, ShapeError> {
        let geom = ConvGeom::for_input(self.value(x), self.value(w), stride, pad)?;
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Gradient of a `stride`/`pad` convolution with weights `w` with respect
    /// to an input of spatial size `in_hw`, given the output gradient `dy`.
    /// Differentiable in both `dy` and `w`.
    pub fn conv2d_input_grad(
        &mut self,
        dy: Var,
        w: Var,
        stride: usize,
        pad: usize,
        in_hw: (usize, usize),
    ) -> Result<Var, ShapeError> {
        let (out_c, in_c, k, _) = self.value(w).dims4()?;
        let geom = ConvGeom::new(in_c, out_c, k, stride, pad, in_hw.0, in_hw.1)?;
        let out = conv::conv2d_input_grad(self.value(dy), self.value(w), &geom)?;
        Ok(self.push(out, Op::ConvInputGrad { dy, w, geom }, &[dy, w]))
    }

    /// Fully connected layer over the flattened sample: `x [B, ...]`,
    /// `w [O, F]`, optional `b [O]`, output `[B, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (batch, feat) = (xv.batch(), xv.sample_len());
        let [out_f, w_feat] = wv.shape()[..] else {
            return Err(ShapeError::Rank {
                expected: 2,
                shape: wv.shape().to_vec(),
            });
        };
        if w_feat != feat {
            return Err(ShapeError::Mismatch {
                expected: vec![out_f, feat],
                actual: wv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; batch * out_f];
        if let Some(b) = b {
            let bv = self.value(b);
            ensure_same_shape(&[out_f], bv.shape())?;
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(bv.data());
            }
        }
        conv::gemm(batch, feat, out_f, xv.data(), false, wv.data(), true, 1.0, &mut out);
        let out = Tensor::new([batch, out_f], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise quotient `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p / q)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor>) -> Result<Var, ShapeError> {
        let out = self.value(a).zip_map(&c, |p, q| p * q)?;
        Ok(self.push(out, Op::MulConst(a, c), &[a]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// `ln(c / (1 - c))` with `c` clamped to `[eps, 1 - eps]`; the derivative
    /// is zero where the clamp is active.
    pub fn logit(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|v| {
            let c = v.clamp(eps, 1.0 - eps);
            (c / (1.0 - c)).ln()
        });
        self.push(out, Op::Logit(a, eps), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    /// Per-sample sum over every non-batch axis; output `[B]`.
    pub fn sample_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.batch()).map(|s| v.sample(s).iter().sum()).collect();
        let out = Tensor::new([v.batch()], data).expect("batch-sized");
        self.push(out, Op::SampleSum(a), &[a])
    }

    /// Per-sample Euclidean norm over every non-batch axis; output `[B]`.
    /// The derivative at a zero vector is taken to be zero.
    pub fn sample_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.batch())
            .map(|s| v.sample(s).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new([v.batch()], data).expect("batch-sized");
        self.push(out, Op::SampleNorm(a), &[a])
    }

    /// Concatenation of 4D tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let first = self.value(*parts.first().ok_or(ShapeError::Empty)?).dims4()?;
        let (b, _, h, w) = first;
        let mut total_c = 0;
        for p in parts {
            let (pb, pc, ph, pw) = self.value(*p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(ShapeError::Mismatch {
                    expected: vec![b, pc, h, w],
                    actual: self.value(*p).shape().to_vec(),
                });
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(b * total_c * h * w);
        for s in 0..b {
            for p in parts {
                data.extend_from_slice(self.value(*p).sample(s));
            }
        }
        let out = Tensor::new([b, total_c, h, w], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var, ShapeError> {
        let v = self.value(a);
        let (b, c, h, w) = v.dims4()?;
        let mut out = Tensor::zeros([b, c, 2 * h, 2 * w]);
        let src = v.data();
        let dst = out.data_mut();
        for plane in 0..b * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[(plane * 2 * h + i) * 2 * w + j] = src[(plane * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(out, Op::Upsample2x(a), &[a]))
    }

    /// Per-sample, per-channel standardisation without affine parameters.
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Result<Var, ShapeError> {
        let v = self.value(a);
        let (b, c, h, w) = v.dims4()?;
        let hw = h * w;
        let mut out = v.clone();
        let mut inv_std = Vec::with_capacity(b * c);
        for plane in out.data_mut().chunks_mut(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in plane.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        debug_assert_eq!(inv_std.len(), b * c);
        Ok(self.push(out, Op::InstanceNorm { x: a, inv_std }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, ShapeError> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Repeats `a` (holding one sample's worth of elements) `batch` times;
    /// output shape is `[batch] ++ sample_shape`.
    pub fn broadcast_batch(&mut self, a: Var, batch: usize, sample_shape: &[usize]) -> Result<Var, ShapeError> {
        let v = self.value(a);
        let n: usize = sample_shape.iter().product();
        if v.numel() != n {
            return Err(ShapeError::ElementCount {
                shape: sample_shape.to_vec(),
                expected: n,
                actual: v.numel(),
            });
        }
        let mut data = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(sample_shape);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::BroadcastBatch(a), &[a]))
    }

    pub fn select_batch(&mut self, a: Var, indices: &[usize]) -> Result<Var, ShapeError> {
        let v = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.batch()) {
            return Err(ShapeError::Mismatch {
                expected: vec![v.batch()],
                actual: vec![bad],
            });
        }
        let out = v.select_batch(indices);
        Ok(self.push(out, Op::SelectBatch(a, indices.to_vec()), &[a]))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Tensor>) -> Result<Var, ShapeError> {
        let z = self.value(logits);
        ensure_same_shape(z.shape(), targets.shape())?;
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / z.numel() as f64);
        Ok(self.push(out, Op::BceWithLogits(logits, targets), &[logits]))
    }

    /// Reverse-mode gradients of the single-element node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, ShapeError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(ShapeError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), ShapeError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.wants(*x) {
                    let dx = conv::conv2d_input_grad(g, self.value(*w), geom)?;
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = conv::conv2d_weight_grad(self.value(*x), g, geom)?;
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = conv::conv2d_bias_grad(g)?.reshape(self.value(*b).shape())?;
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::ConvInputGrad { dy, w, geom } => {
                if self.wants(*dy) {
                    let d = conv::conv2d(g, self.value(*w), None, geom.stride, geom.pad)?;
                    self.accumulate(grads, *dy, d);
                }
                if self.wants(*w) {
                    let dw = conv::conv2d_weight_grad(g, self.value(*dy), geom)?;
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, feat, out_f) = (xv.batch(), xv.sample_len(), wv.shape()[0]);
                if self.wants(*x) {
                    let mut dx = vec![0.0; batch * feat];
                    conv::gemm(batch, out_f, feat, g.data(), false, wv.data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; out_f * feat];
                    conv::gemm(out_f, batch, feat, g.data(), true, xv.data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; out_f];
                        for row in g.data().chunks(out_f) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new([out_f], db)?);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |p, q| p * q)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |p, q| p * q)?);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |p, q| p / q)?);
                }
                if self.wants(*b) {
                    let gq = g.zip_map(&node.value, |p, y| p * y)?;
                    self.accumulate(grads, *b, gq.zip_map(bv, |p, q| -p / q)?);
                }
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.zip_map(c, |p, q| p * q)?),
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })?;
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))?;
                self.accumulate(grads, *a, d);
            }
            Op::Logit(a, eps) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x > *eps && x < 1.0 - eps {
                        gv / (x * (1.0 - x))
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv)?;
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = g.item() / av.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(av.shape(), gv));
            }
            Op::SampleSum(a) => {
                let av = self.value(*a);
                let n = av.sample_len();
                let d = Tensor::from_fn(av.shape(), |k| g.data()[k / n]);
                self.accumulate(grads, *a, d);
            }
            Op::SampleNorm(a) => {
                let av = self.value(*a);
                let n = av.sample_len();
                let norms = node.value.data();
                let d = Tensor::from_fn(av.shape(), |k| {
                    let s = k / n;
                    if norms[s] > 0.0 {
                        g.data()[s] * av.data()[k] / norms[s]
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let b = node.value.batch();
                let mut offset = 0;
                let out_sample = node.value.sample_len();
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.sample_len();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(b * n);
                        for s in 0..b {
                            let start = s * out_sample + offset;
                            d.extend_from_slice(&g.data()[start..start + n]);
                        }
                        self.accumulate(grads, *p, Tensor::new(pv.shape(), d)?);
                    }
                    offset += n;
                }
                debug_assert_eq!(offset, out_sample);
            }
            Op::Upsample2x(a) => {
                let av = self.value(*a);
                let (b, c, h, w) = av.dims4()?;
                let mut d = Tensor::zeros(av.shape());
                let dst = d.data_mut();
                let src = g.data();
                for plane in 0..b * c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(plane * h + i / 2) * w + j / 2] += src[(plane * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut d = Tensor::zeros(node.value.shape());
                for (p, ((dst, gy), y)) in d
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(g.data().chunks(hw))
                    .zip(node.value.data().chunks(hw))
                    .enumerate()
                {
                    let mean_g = gy.iter().sum::<f64>() / hw as f64;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for k in 0..hw {
                        dst[k] = inv_std[p] * (gy[k] - mean_g - y[k] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.value(*a).shape())?;
                self.accumulate(grads, *a, d);
            }
            Op::BroadcastBatch(a) => {
                let av = self.value(*a);
                let n = av.numel();
                let mut d = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (acc, v) in d.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), d)?);
            }
            Op::SelectBatch(a, indices) => {
                let av = self.value(*a);
                let n = av.sample_len();
                let mut d = Tensor::zeros(av.shape());
                for (row, &src) in indices.iter().enumerate() {
                    let dst = &mut d.data_mut()[src * n..(src + 1) * n];
                    for (acc, v) in dst.iter_mut().zip(&g.data()[row * n..(row + 1) * n]) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::BceWithLogits(a, targets) => {
                let av = self.value(*a);
                let scale = g.item() / av.numel() as f64;
                let d = av.zip_map(targets, |z, t| scale * (sigmoid(z) - t))?;
                self.accumulate(grads, *a, d);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
