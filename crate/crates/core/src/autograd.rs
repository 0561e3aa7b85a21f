//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Every forward operation pushes a node onto a [`Tape`]; tape order is
//! a topological order, so the backward pass is a single reverse sweep.
//! Parameters live outside the tape in a [`ParamSet`] and receive
//! accumulated (`+=`) gradients, so a parameter referenced from several
//! tape nodes still gets exactly one combined gradient per pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvGeometry, Tensor};

/// Handle to a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named value tensor with its accumulated-gradient companion.
#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Registry of all trainable tensors of a model, addressed by [`ParamId`]
/// or by hierarchical name (e.g. `conv1.weight`, `conv1.an.v`).
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.to_string(), value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].grad
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn total_scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    /// `grad += incoming` for every provided slot (indexed by `ParamId`).
    pub fn accumulate(&mut self, grads: &[Option<Tensor<S>>]) -> Result<()> {
        for (i, slot) in grads.iter().enumerate() {
            if let Some(g) = slot {
                self.params[i].grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn snapshot_values(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, values: &[Tensor<S>]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
    }
}

/// Handle to a recorded tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Affine { w: ValueId, x: ValueId, b: Option<ValueId> },
    Conv2d { x: ValueId, k: ValueId, b: ValueId, geom: ConvGeometry },
    Relu { x: ValueId },
    Sigmoid { x: ValueId },
    Clamp { x: ValueId, bound: S },
    Pow { x: ValueId, k: usize },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, factor: S },
    Sum { x: ValueId },
    RepeatInterleave { x: ValueId, copies: usize },
    PolyShared { coeffs: ValueId, u: ValueId },
    PolyCombine { coeffs: ValueId, u: ValueId },
    ChannelAffine { u: ValueId, p: ValueId, q: ValueId },
    Inhibit { u: ValueId, c: ValueId, window: usize, dense: bool },
    MaxPool2 { x: ValueId, argmax: Vec<usize> },
    Upsample2 { x: ValueId },
    Reshape { x: ValueId },
    ConcatChannels { a: ValueId, b: ValueId },
    SoftmaxXent { logits: ValueId, label: usize, probs: Tensor<S> },
    Mse { pred: ValueId, target: Tensor<S> },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    param: Option<ParamId>,
}

/// Records forward operations and replays them in reverse for gradients.
/// A tape is confined to one training worker.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: ValueId) -> Result<S> {
        let v = self.value(id);
        if v.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar node, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, param: Option<ParamId>) -> ValueId {
        self.nodes.push(Node { value, op, param });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a constant input; receives no gradient of its own.
    pub fn leaf(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, Op::Leaf, None)
    }

    /// Record the current value of a parameter; gradients accumulate
    /// back into `params` on `backward_into`.
    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> ValueId {
        self.push(params.value(id).clone(), Op::Leaf, Some(id))
    }

    /// `W·x (+ b)` for `W: [m,n]`, `x: [n]`.
    pub fn affine(&mut self, w: ValueId, x: ValueId, b: Option<ValueId>) -> Result<ValueId> {
        let mut out = tensor::matvec(self.value(w), self.value(x))?;
        if let Some(bid) = b {
            out = out.add(self.value(bid))?;
        }
        Ok(self.push(out, Op::Affine { w, x, b }, None))
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        kernels: ValueId,
        bias: ValueId,
        geom: ConvGeometry,
    ) -> Result<ValueId> {
        let out = tensor::conv2d(self.value(x), self.value(kernels), self.value(bias), &geom)?;
        Ok(self.push(out, Op::Conv2d { x, k: kernels, b: bias, geom }, None))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(out, Op::Relu { x }, None)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        self.push(out, Op::Sigmoid { x }, None)
    }

    /// Symmetric clamp to `[-bound, bound]`; unit gradient inside the
    /// interval, zero outside.
    pub fn clamp(&mut self, x: ValueId, bound: S) -> ValueId {
        let out = self.value(x).map(|v| v.min(bound).max(-bound));
        self.push(out, Op::Clamp { x, bound }, None)
    }

    pub fn pow(&mut self, x: ValueId, k: usize) -> ValueId {
        let out = tensor::elementwise_pow(self.value(x), k);
        self.push(out, Op::Pow { x, k }, None)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, None))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b }, None))
    }

    pub fn scale(&mut self, x: ValueId, factor: S) -> ValueId {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale { x, factor }, None)
    }

    /// Sum of all elements -> scalar node.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, None)
    }

    /// `[r] -> [r*copies]`, each element repeated `copies` times in a row.
    pub fn repeat_interleave(&mut self, x: ValueId, copies: usize) -> Result<ValueId> {
        let v = self.value(x);
        if v.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "repeat_interleave",
                lhs: v.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let mut data = Vec::with_capacity(v.numel() * copies);
        for &e in v.data() {
            for _ in 0..copies {
                data.push(e);
            }
        }
        let out = Tensor::new(&[v.numel() * copies], data)?;
        Ok(self.push(out, Op::RepeatInterleave { x, copies }, None))
    }

    /// Polynomial with one shared coefficient vector: `out = Σ_k c[k]·u^k`
    /// elementwise, evaluated by Horner's scheme.
    pub fn poly_shared(&mut self, coeffs: ValueId, u: ValueId) -> Result<ValueId> {
        let c = self.value(coeffs);
        if c.shape().len() != 1 || c.numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "poly_shared coeffs",
                lhs: c.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let cd = c.data().to_vec();
        let out = self.value(u).map(|uv| horner(&cd, uv));
        Ok(self.push(out, Op::PolyShared { coeffs, u }, None))
    }

    /// Per-site polynomial: `coeffs` holds `K+1` stacked blocks the size
    /// of `u` (block `k` = order-`k` coefficient per site), and
    /// `out[q] = Σ_k coeffs[k·m+q]·u[q]^k` via Horner.
    pub fn poly_combine(&mut self, coeffs: ValueId, u: ValueId) -> Result<ValueId> {
        let c = self.value(coeffs);
        let uv = self.value(u);
        let m = uv.numel();
        if m == 0 || c.numel() % m != 0 || c.numel() / m == 0 {
            return Err(Error::ShapeMismatch {
                op: "poly_combine",
                lhs: c.shape().to_vec(),
                rhs: uv.shape().to_vec(),
            });
        }
        let k1 = c.numel() / m;
        let cd = c.data();
        let ud = uv.data();
        let mut data = vec![S::zero(); m];
        for q in 0..m {
            let uq = ud[q];
            let mut acc = cd[(k1 - 1) * m + q];
            for k in (0..k1 - 1).rev() {
                acc = acc * uq + cd[k * m + q];
            }
            data[q] = acc;
        }
        let out = Tensor::new(uv.shape(), data)?;
        Ok(self.push(out, Op::PolyCombine { coeffs, u }, None))
    }

    /// Per-channel affine gate input: `out[c, s] = p[c]·u[c, s] + q[c]`.
    /// For a 1-D `u` every element is its own channel.
    pub fn channel_affine(&mut self, u: ValueId, p: ValueId, q: ValueId) -> Result<ValueId> {
        let uv = self.value(u);
        let channels = uv.shape()[0];
        let spatial = uv.numel() / channels.max(1);
        let pv = self.value(p);
        let qv = self.value(q);
        if pv.numel() != channels || qv.numel() != channels {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: pv.shape().to_vec(),
                rhs: vec![channels],
            });
        }
        let mut data = vec![S::zero(); uv.numel()];
        for c in 0..channels {
            let (pc, qc) = (pv.data()[c], qv.data()[c]);
            for s in 0..spatial {
                data[c * spatial + s] = pc * uv.data()[c * spatial + s] + qc;
            }
        }
        let out = Tensor::new(uv.shape(), data)?;
        Ok(self.push(out, Op::ChannelAffine { u, p, q }, None))
    }

    /// Lateral inhibition: `relu(u - c·(neighborhood_sum(u) - u))`.
    /// Spatial mode sums a `window`x`window` box per channel; dense mode
    /// sums all nodes.
    pub fn inhibit(&mut self, u: ValueId, c: ValueId, window: usize, dense: bool) -> Result<ValueId> {
        if self.value(c).numel() != 1 {
            return Err(Error::Contract("inhibition strength must be scalar".into()));
        }
        if dense {
            if self.value(u).shape().len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "inhibit dense",
                    lhs: self.value(u).shape().to_vec(),
                    rhs: vec![0],
                });
            }
        } else if self.value(u).shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "inhibit spatial",
                lhs: self.value(u).shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        let cv = self.value(c).data()[0];
        let uv = self.value(u);
        let sums = inhibit_neighborhood_sum(uv, window, dense)?;
        let mut data = vec![S::zero(); uv.numel()];
        for (i, d) in data.iter_mut().enumerate() {
            let ui = uv.data()[i];
            let v = ui - cv * (sums.data()[i] - ui);
            *d = if v > S::zero() { v } else { S::zero() };
        }
        let out = Tensor::new(uv.shape(), data)?;
        Ok(self.push(out, Op::Inhibit { u, c, window, dense }, None))
    }

    pub fn maxpool2(&mut self, x: ValueId) -> Result<ValueId> {
        let (out, argmax) = tensor::maxpool2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, None))
    }

    pub fn upsample_nearest2(&mut self, x: ValueId) -> Result<ValueId> {
        let out = tensor::upsample_nearest2(self.value(x))?;
        Ok(self.push(out, Op::Upsample2 { x }, None))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, None))
    }

    /// Row-major flatten to a vector.
    pub fn flatten(&mut self, x: ValueId) -> Result<ValueId> {
        let numel = self.value(x).numel();
        self.reshape(x, &[numel])
    }

    /// Stack `b`'s channels after `a`'s; spatial extents must match.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape().len() != 3 || bv.shape().len() != 3 || av.shape()[1..] != bv.shape()[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let shape = [av.shape()[0] + bv.shape()[0], av.shape()[1], av.shape()[2]];
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::ConcatChannels { a, b }, None))
    }

    /// `-log softmax(logits)[label]`, stabilized by max subtraction.
    pub fn softmax_xent(&mut self, logits: ValueId, label: usize) -> Result<ValueId> {
        let lv = self.value(logits);
        if lv.shape().len() != 1 || lv.numel() < 2 {
            return Err(Error::Contract(format!(
                "softmax_xent expects a logit vector of width >= 2, got {:?}",
                lv.shape()
            )));
        }
        if label >= lv.numel() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                lv.numel()
            )));
        }
        let probs = softmax(lv);
        let loss = -(probs.data()[label].ln());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, label, probs },
            None,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, pred: ValueId, target: &Tensor<S>) -> Result<ValueId> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: pv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = S::from_f64(pv.numel() as f64);
        let mut acc = S::zero();
        for (&a, &b) in pv.data().iter().zip(target.data()) {
            let d = a - b;
            acc = acc + d * d;
        }
        let loss = acc / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.clone() }, None))
    }

    /// Reverse sweep from a scalar loss; returns per-parameter gradients
    /// indexed by `ParamId`. Parameters not reachable from the loss get
    /// `None` (i.e. zero).
    pub fn param_grads(&self, loss: ValueId, n_params: usize) -> Result<Vec<Option<Tensor<S>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out: Vec<Option<Tensor<S>>> = (0..n_params).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &grads[i]) {
                match &mut out[pid.0] {
                    Some(t) => t.add_assign(g)?,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        Ok(out)
    }

    /// Backward pass accumulating directly into `params` (`grad += ...`).
    pub fn backward_into(&self, loss: ValueId, params: &mut ParamSet<S>) -> Result<()> {
        let grads = self.param_grads(loss, params.len())?;
        params.accumulate(&grads)
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor<S>>], id: ValueId, t: Tensor<S>| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { w, x, b } => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                let mut gw = Tensor::zeros(&[m, n]);
                {
                    let gwd = gw.data_mut();
                    for r in 0..m {
                        let gr = g.data()[r];
                        for (col, &xj) in xv.data().iter().enumerate() {
                            gwd[r * n + col] = gr * xj;
                        }
                    }
                }
                acc(grads, *w, gw)?;
                acc(grads, *x, tensor::matvec_transposed(wv, g)?)?;
                if let Some(bid) = b {
                    acc(grads, *bid, g.clone())?;
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                acc(
                    grads,
                    *x,
                    tensor::conv2d_backward_input(g, kv, geom, xv.shape())?,
                )?;
                acc(
                    grads,
                    *k,
                    tensor::conv2d_backward_kernels(g, xv, geom, kv.shape())?,
                )?;
                acc(grads, *b, tensor::conv2d_backward_bias(g)?)?;
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let gx = g
                    .zip_map(xv, "relu backward", |gv, v| {
                        if v > S::zero() {
                            gv
                        } else {
                            S::zero()
                        }
                    })?;
                acc(grads, *x, gx)?;
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[i].value;
                let gx = g.zip_map(yv, "sigmoid backward", |gv, y| gv * y * (S::one() - y))?;
                acc(grads, *x, gx)?;
            }
            Op::Clamp { x, bound } => {
                let xv = self.value(*x);
                let b = *bound;
                let gx = g.zip_map(xv, "clamp backward", |gv, v| {
                    if v.abs() <= b {
                        gv
                    } else {
                        S::zero()
                    }
                })?;
                acc(grads, *x, gx)?;
            }
            Op::Pow { x, k } => {
                let xv = self.value(*x);
                let kk = *k;
                let gx = if kk == 0 {
                    Tensor::zeros(xv.shape())
                } else {
                    let kf = S::from_f64(kk as f64);
                    g.zip_map(xv, "pow backward", |gv, v| {
                        gv * kf * tensor::pow_scalar(v, kk - 1)
                    })?
                };
                acc(grads, *x, gx)?;
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g.clone())?;
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(grads, *a, g.mul(bv)?)?;
                acc(grads, *b, g.mul(av)?)?;
            }
            Op::Scale { x, factor } => {
                acc(grads, *x, g.scale(*factor))?;
            }
            Op::Sum { x } => {
                let gs = g.data()[0];
                acc(grads, *x, Tensor::filled(self.value(*x).shape(), gs))?;
            }
            Op::RepeatInterleave { x, copies } => {
                let r = self.value(*x).numel();
                let mut gx = Tensor::zeros(&[r]);
                let gxd = gx.data_mut();
                for k in 0..r {
                    let mut a = S::zero();
                    for &gv in &g.data()[k * copies..(k + 1) * copies] {
                        a = a + gv;
                    }
                    gxd[k] = a;
                }
                acc(grads, *x, gx)?;
            }
            Op::PolyShared { coeffs, u } => {
                let cv = self.value(*coeffs);
                let uv = self.value(*u);
                let k1 = cv.numel();
                let mut gc = Tensor::zeros(cv.shape());
                let mut gu = Tensor::zeros(uv.shape());
                {
                    let gcd = gc.data_mut();
                    let gud = gu.data_mut();
                    for (q, (&gv, &uq)) in g.data().iter().zip(uv.data()).enumerate() {
                        let mut du = S::zero();
                        for k in 0..k1 {
                            gcd[k] = gcd[k] + gv * tensor::pow_scalar(uq, k);
                            if k >= 1 {
                                du = du
                                    + S::from_f64(k as f64)
                                        * cv.data()[k]
                                        * tensor::pow_scalar(uq, k - 1);
                            }
                        }
                        gud[q] = gv * du;
                    }
                }
                acc(grads, *coeffs, gc)?;
                acc(grads, *u, gu)?;
            }
            Op::PolyCombine { coeffs, u } => {
                let cv = self.value(*coeffs);
                let uv = self.value(*u);
                let m = uv.numel();
                let k1 = cv.numel() / m;
                let mut gc = Tensor::zeros(cv.shape());
                let mut gu = Tensor::zeros(uv.shape());
                {
                    let gcd = gc.data_mut();
                    let gud = gu.data_mut();
                    for (q, (&gv, &uq)) in g.data().iter().zip(uv.data()).enumerate() {
                        let mut du = S::zero();
                        for k in 0..k1 {
                            gcd[k * m + q] = gv * tensor::pow_scalar(uq, k);
                            if k >= 1 {
                                du = du
                                    + S::from_f64(k as f64)
                                        * cv.data()[k * m + q]
                                        * tensor::pow_scalar(uq, k - 1);
                            }
                        }
                        gud[q] = gv * du;
                    }
                }
                acc(grads, *coeffs, gc)?;
                acc(grads, *u, gu)?;
            }
            Op::ChannelAffine { u, p, q } => {
                let uv = self.value(*u);
                let pv = self.value(*p);
                let channels = uv.shape()[0];
                let spatial = uv.numel() / channels;
                let mut gu = Tensor::zeros(uv.shape());
                let mut gp = Tensor::zeros(pv.shape());
                let mut gq = Tensor::zeros(pv.shape());
                {
                    let gud = gu.data_mut();
                    let gpd = gp.data_mut();
                    let gqd = gq.data_mut();
                    for c in 0..channels {
                        let pc = pv.data()[c];
                        let mut ap = S::zero();
                        let mut aq = S::zero();
                        for s in 0..spatial {
                            let gi = g.data()[c * spatial + s];
                            gud[c * spatial + s] = gi * pc;
                            ap = ap + gi * uv.data()[c * spatial + s];
                            aq = aq + gi;
                        }
                        gpd[c] = ap;
                        gqd[c] = aq;
                    }
                }
                acc(grads, *u, gu)?;
                acc(grads, *p, gp)?;
                acc(grads, *q, gq)?;
            }
            Op::Inhibit { u, c, window, dense } => {
                let uv = self.value(*u);
                let yv = &self.nodes[i].value;
                let cv = self.value(*c).data()[0];
                let sums = inhibit_neighborhood_sum(uv, *window, *dense)?;
                // dv = g masked by the relu of v = u - c·(sums - u).
                let dv = g.zip_map(yv, "inhibit backward", |gv, y| {
                    if y > S::zero() {
                        gv
                    } else {
                        S::zero()
                    }
                })?;
                // du = dv - c·(S dv - dv); the neighborhood operator is symmetric.
                let s_dv = inhibit_neighborhood_sum(&dv, *window, *dense)?;
                let mut gu = Tensor::zeros(uv.shape());
                let mut gc = S::zero();
                {
                    let gud = gu.data_mut();
                    for idx in 0..uv.numel() {
                        let d = dv.data()[idx];
                        gud[idx] = d - cv * (s_dv.data()[idx] - d);
                        gc = gc - d * (sums.data()[idx] - uv.data()[idx]);
                    }
                }
                acc(grads, *u, gu)?;
                acc(grads, *c, Tensor::scalar(gc))?;
            }
            Op::MaxPool2 { x, argmax } => {
                let shape = self.value(*x).shape().to_vec();
                acc(grads, *x, tensor::maxpool2_backward(g, argmax, &shape))?;
            }
            Op::Upsample2 { x } => {
                acc(grads, *x, tensor::upsample_nearest2_backward(g)?)?;
            }
            Op::Reshape { x } => {
                acc(grads, *x, g.reshape(self.value(*x).shape())?)?;
            }
            Op::ConcatChannels { a, b } => {
                let an = self.value(*a).numel();
                let ga = Tensor::new(self.value(*a).shape(), g.data()[..an].to_vec())?;
                let gb = Tensor::new(self.value(*b).shape(), g.data()[an..].to_vec())?;
                acc(grads, *a, ga)?;
                acc(grads, *b, gb)?;
            }
            Op::SoftmaxXent { logits, label, probs } => {
                let gs = g.data()[0];
                let mut gl = probs.clone();
                {
                    let gld = gl.data_mut();
                    gld[*label] = gld[*label] - S::one();
                    for v in gld.iter_mut() {
                        *v = *v * gs;
                    }
                }
                acc(grads, *logits, gl)?;
            }
            Op::Mse { pred, target } => {
                let gs = g.data()[0];
                let pv = self.value(*pred);
                let scale = S::from_f64(2.0 / pv.numel() as f64) * gs;
                let gp = pv.zip_map(target, "mse backward", |p, t| scale * (p - t))?;
                acc(grads, *pred, gp)?;
            }
        }
        Ok(())
    }
}

#[inline]
fn horner<S: Scalar>(coeffs: &[S], u: S) -> S {
    let mut acc = coeffs[coeffs.len() - 1];
    for &c in coeffs.iter().rev().skip(1) {
        acc = acc * u + c;
    }
    acc
}

/// Stabilized softmax of a logit vector.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let max = logits.data().iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<S> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let total: S = {
        let mut acc = S::zero();
        for &e in &exps {
            acc = acc + e;
        }
        acc
    };
    Tensor::new(logits.shape(), exps.into_iter().map(|e| e / total).collect()).unwrap()
}

/// Neighborhood sum used by inhibition: box window per channel in
/// spatial mode, total sum broadcast in dense mode.
fn inhibit_neighborhood_sum<S: Scalar>(u: &Tensor<S>, window: usize, dense: bool) -> Result<Tensor<S>> {
    if dense {
        Ok(Tensor::filled(u.shape(), u.sum()))
    } else {
        tensor::window_sum(u, window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_linear() {
        // E = w·x with x = 3 -> dE/dw = 3.
        let mut params = ParamSet::new();
        let w = params.register("w", Tensor::from_slice(&[2.0f64])).unwrap();
        let mut tape = Tape::new();
        let wid = tape.param(&params, w);
        let w2 = tape.reshape(wid, &[1, 1]).unwrap();
        let x = tape.leaf(Tensor::from_slice(&[3.0]));
        let e = tape.affine(w2, x, None).unwrap();
        tape.backward_into(e, &mut params).unwrap();
        assert_eq!(params.grad(w).data(), &[3.0]);
    }

    #[test]
    fn backward_power_rule() {
        // E = Σ u^2 at u = [1, -2] -> grad [2, -4].
        let mut params = ParamSet::new();
        let u = params.register("u", Tensor::from_slice(&[1.0f64, -2.0])).unwrap();
        let mut tape = Tape::new();
        let uid = tape.param(&params, u);
        let sq = tape.pow(uid, 2);
        let e = tape.sum(sq);
        tape.backward_into(e, &mut params).unwrap();
        assert_eq!(params.grad(u).data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let err = tape.param_grads(x, 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unreachable_parameter_gets_zero_grad() {
        let mut params = ParamSet::new();
        let used = params.register("used", Tensor::from_slice(&[1.0f64])).unwrap();
        let unused = params.register("unused", Tensor::from_slice(&[1.0f64])).unwrap();
        let mut tape = Tape::new();
        let uid = tape.param(&params, used);
        let e = tape.sum(uid);
        tape.backward_into(e, &mut params).unwrap();
        assert_eq!(params.grad(used).data(), &[1.0]);
        assert_eq!(params.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn grad_of_sum_is_sum_of_grads() {
        let build = |scale_a: f64, scale_b: f64| -> (ParamSet<f64>, Vec<f64>) {
            let mut params = ParamSet::new();
            let p = params.register("p", Tensor::from_slice(&[1.5f64, -0.5])).unwrap();
            let mut tape = Tape::new();
            let pid = tape.param(&params, p);
            let a = tape.pow(pid, 2);
            let sa = tape.sum(a);
            let sa = tape.scale(sa, scale_a);
            let b = tape.pow(pid, 3);
            let sb = tape.sum(b);
            let sb = tape.scale(sb, scale_b);
            let e = tape.add(sa, sb).unwrap();
            tape.backward_into(e, &mut params).unwrap();
            let g = params.grad(p).data().to_vec();
            (params, g)
        };
        let (_, g_both) = build(1.0, 1.0);
        let (_, g_a) = build(1.0, 0.0);
        let (_, g_b) = build(0.0, 1.0);
        for i in 0..2 {
            assert_eq!(g_both[i], g_a[i] + g_b[i]);
        }
    }

    #[test]
    fn repeated_backward_is_identical_after_zeroing() {
        let mut params = ParamSet::new();
        let p = params
            .register("p", Tensor::from_slice(&[0.3f64, -1.1, 0.7]))
            .unwrap();
        let mut tape = Tape::new();
        let pid = tape.param(&params, p);
        let r = tape.relu(pid);
        let e = tape.sum(r);
        tape.backward_into(e, &mut params).unwrap();
        let g1 = params.grad(p).clone();
        params.zero_grads();
        tape.backward_into(e, &mut params).unwrap();
        assert_eq!(&g1, params.grad(p));
    }

    #[test]
    fn gradient_accumulates_for_shared_parameter() {
        let mut params = ParamSet::new();
        let p = params.register("p", Tensor::from_slice(&[2.0f64])).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&params, p);
        let b = tape.param(&params, p);
        let prod = tape.mul(a, b).unwrap(); // p^2 through two leaves
        let e = tape.sum(prod);
        tape.backward_into(e, &mut params).unwrap();
        assert_eq!(params.grad(p).data(), &[4.0]);
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[10]));
        let loss = tape.softmax_xent(logits, 3).unwrap();
        let v = tape.scalar_value(loss).unwrap();
        assert!((v - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_gradient_is_probs_minus_onehot() {
        let mut params = ParamSet::new();
        let p = params
            .register("logits", Tensor::from_slice(&[0.2f64, -0.4, 1.1]))
            .unwrap();
        let mut tape = Tape::new();
        let lid = tape.param(&params, p);
        let loss = tape.softmax_xent(lid, 2).unwrap();
        tape.backward_into(loss, &mut params).unwrap();
        let probs = softmax(params.value(p));
        for i in 0..3 {
            let want = probs.data()[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((params.grad(p).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_xent_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[4]));
        assert!(tape.softmax_xent(logits, 4).is_err());
    }

    #[test]
    fn mse_basics() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_slice(&[0.0, 2.0]));
        let t = Tensor::from_slice(&[1.0, 1.0]);
        let loss = tape.mse(a, &t).unwrap();
        assert_eq!(tape.scalar_value(loss).unwrap(), 1.0);

        let b = tape.leaf(Tensor::from_slice(&[1.0, 1.0]));
        let loss0 = tape.mse(b, &t).unwrap();
        assert_eq!(tape.scalar_value(loss0).unwrap(), 0.0);
    }

    /// Central-difference check of a composite dense -> polynomial -> mse
    /// graph; every op in the chain must agree with finite differences.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let run = |params: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let w = tape.param(params, ParamId(0));
            let w2 = tape.reshape(w, &[2, 3]).unwrap();
            let c = tape.param(params, ParamId(1));
            let x = tape.leaf(Tensor::from_slice(&[0.5, -0.3, 0.8]));
            let u = tape.affine(w2, x, None).unwrap();
            let y = tape.poly_shared(c, u).unwrap();
            let target = Tensor::from_slice(&[0.25, -0.75]);
            let loss = tape.mse(y, &target).unwrap();
            tape.scalar_value(loss).unwrap()
        };
        let mut params = ParamSet::new();
        let w = params
            .register(
                "w",
                Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap(),
            )
            .unwrap();
        let c = params
            .register("c", Tensor::from_slice(&[0.05, 0.9, -0.1, 0.2]))
            .unwrap();

        // analytic
        {
            let mut tape = Tape::new();
            let wid = tape.param(&params, w);
            let w2 = tape.reshape(wid, &[2, 3]).unwrap();
            let cid = tape.param(&params, c);
            let x = tape.leaf(Tensor::from_slice(&[0.5, -0.3, 0.8]));
            let u = tape.affine(w2, x, None).unwrap();
            let y = tape.poly_shared(cid, u).unwrap();
            let target = Tensor::from_slice(&[0.25, -0.75]);
            let loss = tape.mse(y, &target).unwrap();
            tape.backward_into(loss, &mut params).unwrap();
        }

        let eps = 1e-5;
        for pid in [w, c] {
            for i in 0..params.value(pid).numel() {
                let orig = params.value(pid).data()[i];
                params.value_mut(pid).data_mut()[i] = orig + eps;
                let lp = run(&params);
                params.value_mut(pid).data_mut()[i] = orig - eps;
                let lm = run(&params);
                params.value_mut(pid).data_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = params.grad(pid).data()[i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5, "param {pid:?}[{i}]: analytic {an} vs fd {fd}");
            }
        }
    }
}
