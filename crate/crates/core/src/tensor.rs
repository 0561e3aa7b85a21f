//! Dense n-dimensional arrays and the numeric kernels everything else
//! builds on: matmul, 2-D convolution (with backward passes), pooling,
//! nearest-neighbor upsampling, elementwise algebra and integer powers.
//!
//! All kernels use a fixed loop nest, so repeated calls on identical
//! inputs are bitwise identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest supported polynomial/power order for `elementwise_pow`.
pub const MAX_POW_ORDER: usize = 8;

/// Dense row-major tensor. Images are channels-first `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, S::one())
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(data: &[S]) -> Self {
        Self { shape: vec![data.len()], data: data.to_vec() }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, idx: &[usize]) -> S {
        self.data[self.linear(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: S) {
        let li = self.linear(idx);
        self.data[li] = v;
    }

    fn linear(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut li = 0;
        for (i, &extent) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < extent);
            li = li * extent + i;
        }
        li
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: S) {
        self.data.fill(v);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements, in index order.
    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }
}

/// Zero padding (default) or circular wrap-around (used by the
/// translation-equivariance tests).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    Zeros,
    Circular,
}

/// Spatial geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel_h: kernel, kernel_w: kernel, stride, padding, pad_mode: PadMode::Zeros }
    }

    /// "Same" padding `(k-1)/2`; defined only for odd kernels.
    pub fn same(kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Geometry(format!(
                "same padding is defined only for odd kernels, got {kernel}"
            )));
        }
        Ok(Self::new(kernel, 1, (kernel - 1) / 2))
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    /// Output spatial extent for one axis; must be >= 1.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if kernel > padded || self.stride == 0 {
            return Err(Error::Geometry(format!(
                "kernel {kernel} exceeds padded extent {padded} (input {input}, padding {})",
                self.padding
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.output_extent(h, self.kernel_h)?, self.output_extent(w, self.kernel_w)?))
    }
}

/// `c = a @ b` for `a: [m,k]`, `b: [k,n]`. Inner accumulation runs in
/// ascending `k` order.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut c = Tensor::zeros(&[m, n]);
    let cd = c.data_mut();
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let c_row = &mut cd[i * n..(i + 1) * n];
        for t in 0..k {
            let a_it = ad[i * k + t];
            let b_row = &bd[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_it * bv;
            }
        }
    }
    Ok(c)
}

/// `W @ x` for `W: [m,n]`, `x: [n]` -> `[m]`.
pub fn matvec<S: Scalar>(w: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if w.shape().len() != 2 || x.shape().len() != 1 || w.shape()[1] != x.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            lhs: w.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&[m]);
    let od = out.data_mut();
    let wd = w.data();
    let xd = x.data();
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        let mut acc = S::zero();
        for (&wv, &xv) in row.iter().zip(xd) {
            acc = acc + wv * xv;
        }
        od[i] = acc;
    }
    Ok(out)
}

/// `W^T @ g` for `W: [m,n]`, `g: [m]` -> `[n]`.
pub fn matvec_transposed<S: Scalar>(w: &Tensor<S>, g: &Tensor<S>) -> Result<Tensor<S>> {
    if w.shape().len() != 2 || g.shape().len() != 1 || w.shape()[0] != g.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matvec_transposed",
            lhs: w.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut out = Tensor::zeros(&[n]);
    let od = out.data_mut();
    let wd = w.data();
    let gd = g.data();
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        let gv = gd[i];
        for (ov, &wv) in od.iter_mut().zip(row) {
            *ov = *ov + gv * wv;
        }
    }
    Ok(out)
}

/// `out[i] = t[i]^k` by repeated multiplication; `k = 0` gives ones.
pub fn elementwise_pow<S: Scalar>(t: &Tensor<S>, k: usize) -> Tensor<S> {
    debug_assert!(k <= MAX_POW_ORDER, "power order {k} above MAX_POW_ORDER");
    t.map(|v| pow_scalar(v, k))
}

#[inline]
pub fn pow_scalar<S: Scalar>(v: S, k: usize) -> S {
    if k == 0 {
        return S::one();
    }
    let mut acc = v;
    for _ in 1..k {
        acc = acc * v;
    }
    acc
}

fn check_chw<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::ShapeMismatch { op, lhs: t.shape().to_vec(), rhs: vec![0, 0, 0] }),
    }
}

/// Copy `input` into a `[C, H+2p, W+2p]` buffer according to the pad mode.
fn pad_input<S: Scalar>(input: &Tensor<S>, c: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Tensor<S> {
    if p == 0 {
        return input.clone();
    }
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut padded = Tensor::zeros(&[c, ph, pw]);
    let pd = padded.data_mut();
    let id = input.data();
    match mode {
        PadMode::Zeros => {
            for ci in 0..c {
                for y in 0..h {
                    let src = &id[(ci * h + y) * w..(ci * h + y) * w + w];
                    let dst = &mut pd[(ci * ph + y + p) * pw + p..(ci * ph + y + p) * pw + p + w];
                    dst.copy_from_slice(src);
                }
            }
        }
        PadMode::Circular => {
            for ci in 0..c {
                for py in 0..ph {
                    let sy = (py as isize - p as isize).rem_euclid(h as isize) as usize;
                    for px in 0..pw {
                        let sx = (px as isize - p as isize).rem_euclid(w as isize) as usize;
                        pd[(ci * ph + py) * pw + px] = id[(ci * h + sy) * w + sx];
                    }
                }
            }
        }
    }
    padded
}

/// Fold a padded gradient buffer `[C, H+2p, W+2p]` back to `[C, H, W]`.
fn unpad_grad<S: Scalar>(padded: &Tensor<S>, c: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Tensor<S> {
    if p == 0 {
        return padded.clone();
    }
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    let pd = padded.data();
    match mode {
        PadMode::Zeros => {
            for ci in 0..c {
                for y in 0..h {
                    let src = &pd[(ci * ph + y + p) * pw + p..(ci * ph + y + p) * pw + p + w];
                    let dst = &mut od[(ci * h + y) * w..(ci * h + y) * w + w];
                    dst.copy_from_slice(src);
                }
            }
        }
        PadMode::Circular => {
            for ci in 0..c {
                for py in 0..ph {
                    let sy = (py as isize - p as isize).rem_euclid(h as isize) as usize;
                    for px in 0..pw {
                        let sx = (px as isize - p as isize).rem_euclid(w as isize) as usize;
                        od[(ci * h + sy) * w + sx] =
                            od[(ci * h + sy) * w + sx] + pd[(ci * ph + py) * pw + px];
                    }
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation over all input channels plus per-output-channel
/// bias. `input: [C_in,H,W]`, `kernels: [C_out,C_in,kh,kw]`, `bias: [C_out]`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    geom: &ConvGeometry,
) -> Result<Tensor<S>> {
    let (ci_n, h, w) = check_chw(input, "conv2d input")?;
    let kshape = kernels.shape();
    if kshape.len() != 4 || kshape[1] != ci_n {
        return Err(Error::ShapeMismatch {
            op: "conv2d kernels",
            lhs: kshape.to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    let (co_n, kh, kw) = (kshape[0], kshape[2], kshape[3]);
    if kh != geom.kernel_h || kw != geom.kernel_w {
        return Err(Error::Geometry(format!(
            "kernel tensor {kshape:?} disagrees with geometry {}x{}",
            geom.kernel_h, geom.kernel_w
        )));
    }
    if bias.shape() != [co_n] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![co_n],
        });
    }
    let (oh, ow) = geom.output_hw(h, w)?;
    let p = geom.padding;
    let s = geom.stride;
    let padded = pad_input(input, ci_n, h, w, p, geom.pad_mode);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let pd = padded.data();
    let kd = kernels.data();
    let bd = bias.data();
    let mut out = Tensor::zeros(&[co_n, oh, ow]);
    let od = out.data_mut();
    for co in 0..co_n {
        let och = &mut od[co * oh * ow..(co + 1) * oh * ow];
        och.fill(bd[co]);
        for ci in 0..ci_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let kval = kd[((co * ci_n + ci) * kh + ky) * kw + kx];
                    for oy in 0..oh {
                        let in_off = (ci * ph + oy * s + ky) * pw + kx;
                        let o_row = &mut och[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let in_row = &pd[in_off..in_off + ow];
                            for (o, &x) in o_row.iter_mut().zip(in_row) {
                                *o = *o + kval * x;
                            }
                        } else {
                            for (ox, o) in o_row.iter_mut().enumerate() {
                                *o = *o + kval * pd[in_off + ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<S: Scalar>(
    grad_out: &Tensor<S>,
    kernels: &Tensor<S>,
    geom: &ConvGeometry,
    input_shape: &[usize],
) -> Result<Tensor<S>> {
    let (co_n, oh, ow) = check_chw(grad_out, "conv2d grad_out")?;
    let kshape = kernels.shape();
    let (ci_n, kh, kw) = (kshape[1], kshape[2], kshape[3]);
    let (h, w) = (input_shape[1], input_shape[2]);
    let p = geom.padding;
    let s = geom.stride;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut padded_grad = Tensor::zeros(&[ci_n, ph, pw]);
    let pgd = padded_grad.data_mut();
    let kd = kernels.data();
    let gd = grad_out.data();
    for co in 0..co_n {
        let gch = &gd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..ci_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let kval = kd[((co * ci_n + ci) * kh + ky) * kw + kx];
                    for oy in 0..oh {
                        let pg_off = (ci * ph + oy * s + ky) * pw + kx;
                        let g_row = &gch[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let pg_row = &mut pgd[pg_off..pg_off + ow];
                            for (pg, &g) in pg_row.iter_mut().zip(g_row) {
                                *pg = *pg + kval * g;
                            }
                        } else {
                            for (ox, &g) in g_row.iter().enumerate() {
                                pgd[pg_off + ox * s] = pgd[pg_off + ox * s] + kval * g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(unpad_grad(&padded_grad, ci_n, h, w, p, geom.pad_mode))
}

/// Gradient of `conv2d` with respect to the kernels.
pub fn conv2d_backward_kernels<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    geom: &ConvGeometry,
    kernel_shape: &[usize],
) -> Result<Tensor<S>> {
    let (co_n, oh, ow) = check_chw(grad_out, "conv2d grad_out")?;
    let (ci_n, h, w) = check_chw(input, "conv2d input")?;
    let (kh, kw) = (kernel_shape[2], kernel_shape[3]);
    let p = geom.padding;
    let s = geom.stride;
    let padded = pad_input(input, ci_n, h, w, p, geom.pad_mode);
    let pw = w + 2 * p;
    let ph = h + 2 * p;
    let pd = padded.data();
    let gd = grad_out.data();
    let mut gk = Tensor::zeros(kernel_shape);
    let gkd = gk.data_mut();
    for co in 0..co_n {
        let gch = &gd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..ci_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = S::zero();
                    for oy in 0..oh {
                        let in_off = (ci * ph + oy * s + ky) * pw + kx;
                        let g_row = &gch[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let in_row = &pd[in_off..in_off + ow];
                            for (&g, &x) in g_row.iter().zip(in_row) {
                                acc = acc + g * x;
                            }
                        } else {
                            for (ox, &g) in g_row.iter().enumerate() {
                                acc = acc + g * pd[in_off + ox * s];
                            }
                        }
                    }
                    gkd[((co * ci_n + ci) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Ok(gk)
}

/// Gradient of `conv2d` with respect to the bias: per-channel sum.
pub fn conv2d_backward_bias<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let (co_n, oh, ow) = check_chw(grad_out, "conv2d grad_out")?;
    let gd = grad_out.data();
    let mut gb = Tensor::zeros(&[co_n]);
    let gbd = gb.data_mut();
    for co in 0..co_n {
        let mut acc = S::zero();
        for &g in &gd[co * oh * ow..(co + 1) * oh * ow] {
            acc = acc + g;
        }
        gbd[co] = acc;
    }
    Ok(gb)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the
/// linear input index of each window maximum (first occurrence wins).
pub fn maxpool2<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let (c, h, w) = check_chw(input, "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Geometry(format!(
            "maxpool2 requires even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let id = input.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let od = out.data_mut();
    let mut argmax = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ci * h + 2 * oy) * w + 2 * ox;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                let mut best_v = id[best];
                for &cand in &candidates[1..] {
                    if id[cand] > best_v {
                        best_v = id[cand];
                        best = cand;
                    }
                }
                od[(ci * oh + oy) * ow + ox] = best_v;
                argmax[(ci * oh + oy) * ow + ox] = best;
            }
        }
    }
    Ok((out, argmax))
}

/// Route pooled gradients back to the recorded argmax positions.
pub fn maxpool2_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Tensor<S> {
    let mut grad_in = Tensor::zeros(input_shape);
    let gd = grad_in.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        gd[idx] = gd[idx] + g;
    }
    grad_in
}

/// Replicate every pixel into a 2x2 block: `[C,H,W] -> [C,2H,2W]`.
pub fn upsample_nearest2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = check_chw(input, "upsample_nearest2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let id = input.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let od = out.data_mut();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = id[(ci * h + y) * w + x];
                let base = (ci * oh + 2 * y) * ow + 2 * x;
                od[base] = v;
                od[base + 1] = v;
                od[base + ow] = v;
                od[base + ow + 1] = v;
            }
        }
    }
    Ok(out)
}

/// Each source pixel receives the sum of its 2x2 block's gradients.
pub fn upsample_nearest2_backward<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, oh, ow) = check_chw(grad_out, "upsample_nearest2 grad")?;
    let (h, w) = (oh / 2, ow / 2);
    let gd = grad_out.data();
    let mut grad_in = Tensor::zeros(&[c, h, w]);
    let gid = grad_in.data_mut();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = (ci * oh + 2 * y) * ow + 2 * x;
                gid[(ci * h + y) * w + x] = gd[base] + gd[base + 1] + gd[base + ow] + gd[base + ow + 1];
            }
        }
    }
    Ok(grad_in)
}

/// Per-channel sum over a square window centered at each pixel, zero
/// padded at the borders. Used by the lateral-inhibition receptor field.
pub fn window_sum<S: Scalar>(input: &Tensor<S>, window: usize) -> Result<Tensor<S>> {
    let (c, h, w) = check_chw(input, "window_sum")?;
    if window % 2 == 0 {
        return Err(Error::Geometry(format!("window must be odd, got {window}")));
    }
    let r = (window / 2) as isize;
    let id = input.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = S::zero();
                for dy in -r..=r {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let sx = x + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc = acc + id[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
                od[(ci * h + y as usize) * w + x as usize] = acc;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Naive quadruple-loop convolution used as the independent oracle.
    fn conv2d_reference(
        input: &Tensor<f64>,
        kernels: &Tensor<f64>,
        bias: &Tensor<f64>,
        geom: &ConvGeometry,
    ) -> Tensor<f64> {
        let (ci_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co_n, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
        let (oh, ow) = geom.output_hw(h, w).unwrap();
        let p = geom.padding as isize;
        let mut out = Tensor::zeros(&[co_n, oh, ow]);
        for co in 0..co_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..ci_n {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = (oy * geom.stride + ky) as isize - p;
                                let sx = (ox * geom.stride + kx) as isize - p;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += input.at(&[ci, sy as usize, sx as usize])
                                    * kernels.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out.set(&[co, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i2 = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
    }

    #[test]
    fn matmul_zero_annihilation() {
        let a = t64(&[1, 2], &[1.0, 2.0]);
        let z = t64(&[2, 1], &[0.0, 0.0]);
        assert_eq!(matmul(&a, &z).unwrap(), t64(&[1, 1], &[0.0]));
    }

    #[test]
    fn matmul_hand_evaluated() {
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2, 1], &[5.0, 7.0]);
        assert_eq!(matmul(&a, &b).unwrap(), t64(&[2, 1], &[19.0, 43.0]));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t64(&[2, 3], &[0.0; 6]);
        let b = t64(&[2, 2], &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv2d_all_ones_same_padding_center() {
        let input = Tensor::<f64>::ones(&[1, 3, 3]);
        let kernels = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let bias = Tensor::<f64>::zeros(&[1]);
        let out = conv2d(&input, &kernels, &bias, &ConvGeometry::same(3).unwrap()).unwrap();
        assert_eq!(out.at(&[0, 1, 1]), 9.0);
        assert_eq!(out.at(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn conv2d_zero_kernel_gives_bias() {
        let input = t64(&[2, 4, 4], &(0..32).map(|v| v as f64).collect::<Vec<_>>());
        let kernels = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        let bias = t64(&[3], &[1.0, -2.0, 0.5]);
        let out = conv2d(&input, &kernels, &bias, &ConvGeometry::same(3).unwrap()).unwrap();
        for co in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(out.at(&[co, y, x]), bias.data()[co]);
                }
            }
        }
    }

    #[test]
    fn conv2d_strided_matches_reference() {
        let input = t64(&[1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let kernels = t64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, -1.0]);
        let bias = Tensor::<f64>::zeros(&[1]);
        let geom = ConvGeometry {
            kernel_h: 2,
            kernel_w: 2,
            stride: 2,
            padding: 0,
            pad_mode: PadMode::Zeros,
        };
        let got = conv2d(&input, &kernels, &bias, &geom).unwrap();
        let want = conv2d_reference(&input, &kernels, &bias, &geom);
        assert_eq!(got, want);
    }

    #[test]
    fn conv2d_random_matches_reference() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..12 {
            let ci = rng.random_range(1..4usize);
            let co = rng.random_range(1..4usize);
            let k = [1, 3, 5][rng.random_range(0..3usize)];
            let h = rng.random_range(k..k + 6);
            let w = rng.random_range(k..k + 6);
            let geom = if trial % 2 == 0 {
                ConvGeometry::same(k).unwrap()
            } else {
                ConvGeometry::new(k, 1, 0)
            };
            let input = Tensor::new(
                &[ci, h, w],
                (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let kernels = Tensor::new(
                &[co, ci, k, k],
                (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let bias =
                Tensor::new(&[co], (0..co).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let got = conv2d(&input, &kernels, &bias, &geom).unwrap();
            let want = conv2d_reference(&input, &kernels, &bias, &geom);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_identity_1x1_kernel() {
        let input = t64(&[2, 3, 3], &(0..18).map(|v| v as f64 - 9.0).collect::<Vec<_>>());
        // Kernel picks channel ci for output co == ci.
        let mut kernels = Tensor::<f64>::zeros(&[2, 2, 1, 1]);
        kernels.set(&[0, 0, 0, 0], 1.0);
        kernels.set(&[1, 1, 0, 0], 1.0);
        let bias = Tensor::<f64>::zeros(&[2]);
        let out = conv2d(&input, &kernels, &bias, &ConvGeometry::same(1).unwrap()).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv2d_linearity() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let geom = ConvGeometry::same(3).unwrap();
        let rand_t = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
            Tensor::new(
                shape,
                (0..shape.iter().product())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>(),
            )
            .unwrap()
        };
        let x = rand_t(&mut rng, &[2, 5, 5]);
        let y = rand_t(&mut rng, &[2, 5, 5]);
        let kernels = rand_t(&mut rng, &[3, 2, 3, 3]);
        let bias = Tensor::<f64>::zeros(&[3]);
        let (alpha, beta) = (0.7, -1.3);
        let lhs = conv2d(
            &x.scale(alpha).add(&y.scale(beta)).unwrap(),
            &kernels,
            &bias,
            &geom,
        )
        .unwrap();
        let rhs = conv2d(&x, &kernels, &bias, &geom)
            .unwrap()
            .scale(alpha)
            .add(&conv2d(&y, &kernels, &bias, &geom).unwrap().scale(beta))
            .unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_bitwise_deterministic() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::new(
            &[3, 6, 6],
            (0..108).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let kernels = Tensor::new(
            &[4, 3, 3, 3],
            (0..108).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let bias = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let geom = ConvGeometry::same(3).unwrap();
        let a = conv2d(&input, &kernels, &bias, &geom).unwrap();
        let b = conv2d(&input, &kernels, &bias, &geom).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pow_basics() {
        let t = t64(&[2], &[2.0, -3.0]);
        assert_eq!(elementwise_pow(&t, 0), Tensor::ones(&[2]));
        assert_eq!(elementwise_pow(&t, 1), t);
        assert_eq!(elementwise_pow(&t, 3), t64(&[2], &[8.0, -27.0]));
    }

    #[test]
    fn maxpool_basics() {
        let t = t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (out, idx) = maxpool2(&t).unwrap();
        assert_eq!(out, t64(&[1, 1, 1], &[4.0]));
        assert_eq!(idx, vec![3]);

        let c = Tensor::<f64>::filled(&[2, 4, 4], 7.0);
        let (out, _) = maxpool2(&c).unwrap();
        assert_eq!(out, Tensor::filled(&[2, 2, 2], 7.0));

        let odd = Tensor::<f64>::zeros(&[1, 3, 4]);
        assert!(matches!(maxpool2(&odd), Err(Error::Geometry(_))));
    }

    #[test]
    fn maxpool_random_matches_bruteforce() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let t = Tensor::new(
            &[1, 4, 4],
            (0..16).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let (out, _) = maxpool2(&t).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(t.at(&[0, 2 * oy + dy, 2 * ox + dx]));
                    }
                }
                assert_eq!(out.at(&[0, oy, ox]), m);
            }
        }
    }

    #[test]
    fn upsample_basics() {
        let t = t64(&[1, 1, 1], &[5.0]);
        let up = upsample_nearest2(&t).unwrap();
        assert_eq!(up, t64(&[1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
    }

    #[test]
    fn window_sum_hand_case() {
        // 3x3 constant map m: interior window sums 9m, corner 4m.
        let t = Tensor::<f64>::filled(&[1, 3, 3], 2.0);
        let s = window_sum(&t, 3).unwrap();
        assert_eq!(s.at(&[0, 1, 1]), 18.0);
        assert_eq!(s.at(&[0, 0, 0]), 8.0);
    }

    proptest! {
        #[test]
        fn pow2_equals_self_product(v in proptest::collection::vec(-3.0f64..3.0, 1..20)) {
            let t = Tensor::from_slice(&v);
            prop_assert_eq!(elementwise_pow(&t, 2), t.mul(&t).unwrap());
        }

        #[test]
        fn maxpool_of_upsample_roundtrips(v in proptest::collection::vec(-3.0f64..3.0, 12)) {
            let t = Tensor::new(&[1, 3, 4], v).unwrap();
            let up = upsample_nearest2(&t).unwrap();
            let (down, _) = maxpool2(&up).unwrap();
            prop_assert_eq!(down, t);
        }
    }
}
