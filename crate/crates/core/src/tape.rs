//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every forward op appends a node holding its output value and enough
//! bookkeeping to run its backward rule. Nodes only ever reference earlier
//! nodes, so replaying the tape in reverse is a valid topological order.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

/// Leaky-ReLU negative slope used throughout the networks.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Per-channel running statistics for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f32,
    /// Weight kept on the old running value at each update.
    pub momentum: f32,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, out_c: usize },
    ConvTranspose2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, in_c: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    Activation { x: Var, kind: Activation },
    Affine { x: Var, w: Var, b: Var },
    Concat { a: Var, b: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleShift { x: Var, scale: f32 },
    Abs { x: Var },
    Square { x: Var },
    ClampedLog { x: Var, lo: f32, hi: f32 },
    Sum { x: Var },
    Mean { x: Var },
    Gram { x: Var },
    AvgPool2 { x: Var },
    TotalVariation { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf. Gradients are only computed for leaves created with
    /// `requires_grad` and for values depending on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn chw(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        self.value(v).chw().map_err(|_| Error::shape(op, format!("expected [C,H,W], got {:?}", self.shape(v))))
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution with zero padding. `kernel` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = self.chw(input, "conv2d")?;
        let (out_c, k) = match self.shape(kernel) {
            &[o, ci, k1, k2] if ci == c && k1 == k2 => (o, k1),
            s => return Err(Error::shape("conv2d", format!("kernel {s:?} incompatible with input channels {c}"))),
        };
        if self.shape(bias) != [out_c] {
            return Err(Error::shape("conv2d", format!("bias {:?}, expected [{out_c}]", self.shape(bias))));
        }
        let geom = ConvGeom::forward(c, h, w, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("input {h}x{w} pad {pad} kernel {k} stride {stride}")))?;
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            out_c,
            &geom,
        );
        let value = Tensor::new(vec![out_c, geom.out_h, geom.out_w], data)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom, out_c }, rg))
    }

    /// Transposed 2-D convolution. `kernel` is `[C_in, C_out, k, k]`; output
    /// spatial size is `(H - 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = self.chw(input, "conv_transpose2d")?;
        let (out_c, k) = match self.shape(kernel) {
            &[ci, o, k1, k2] if ci == c && k1 == k2 => (o, k1),
            s => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("kernel {s:?} incompatible with input channels {c}"),
                ))
            }
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("conv_transpose2d stride must be >= 1".into()));
        }
        if self.shape(bias) != [out_c] {
            return Err(Error::shape("conv_transpose2d", format!("bias {:?}, expected [{out_c}]", self.shape(bias))));
        }
        let oh = ((h - 1) * stride + k).checked_sub(2 * pad);
        let ow = ((w - 1) * stride + k).checked_sub(2 * pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(Error::shape("conv_transpose2d", "padding exceeds output size")),
        };
        let geom = ConvGeom { channels: out_c, height: oh, width: ow, kernel: k, stride, pad, out_h: h, out_w: w };
        let data = kernels::conv_transpose2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            c,
            &geom,
        );
        let value = Tensor::new(vec![out_c, oh, ow], data)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(value, Op::ConvTranspose2d { input, kernel, bias, geom, in_c: c }, rg))
    }

    /// Per-channel batch normalization over the spatial positions of a
    /// `[C, H, W]` input. In [`Mode::Train`] the batch statistics are used and
    /// folded into `stats`; in [`Mode::Infer`] `stats` is used as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        cfg: BatchNormConfig,
        mode: Mode,
    ) -> Result<Var> {
        if cfg.eps.is_nan() || cfg.eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("batch_norm eps must be > 0, got {}", cfg.eps)));
        }
        let (c, h, w) = self.chw(x, "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "gamma {:?} beta {:?} stats {} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta),
                    stats.channels()
                ),
            ));
        }
        let n = h * w;
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![0.0f32; xs.len()];
        let mut xhat = vec![0.0f32; xs.len()];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let plane = &xs[ch * n..(ch + 1) * n];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                    let (mean, var) = (mean as f32, var as f32);
                    let m = cfg.momentum;
                    stats.mean[ch] = m * stats.mean[ch] + (1.0 - m) * mean;
                    stats.var[ch] = m * stats.var[ch] + (1.0 - m) * var;
                    (mean, var)
                }
                Mode::Infer => (stats.mean[ch], stats.var[ch]),
            };
            let istd = 1.0 / (var + cfg.eps).sqrt();
            inv_std[ch] = istd;
            for i in 0..n {
                let xh = (plane[i] - mean) * istd;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = gs[ch] * xh + bs[ch];
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: mode == Mode::Train };
        Ok(self.push(value, op, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::LeakyRelu(s) => self.value(x).map(|v| if v >= 0.0 { v } else { s * v }),
            Activation::Tanh => self.value(x).map(f32::tanh),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Activation { x, kind }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// `W·x + b` with `x` flattened to `[n]`, `W` `[m, n]`, `b` `[m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let m = match self.shape(w) {
            &[m, k] if k == n => m,
            s => return Err(Error::shape("affine", format!("weight {s:?} for input of {n} values"))),
        };
        if self.shape(b) != [m] {
            return Err(Error::shape("affine", format!("bias {:?}, expected [{m}]", self.shape(b))));
        }
        let mut out = kernels::matmul(self.value(w).data(), self.value(x).data(), m, n, 1);
        for (o, &bv) in out.iter_mut().zip(self.value(b).data()) {
            *o += bv;
        }
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::from_vec(out), Op::Affine { x, w, b }, rg))
    }

    /// Stack `[C1,H,W]` and `[C2,H,W]` into `[C1+C2,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.chw(a, "concat_channels")?;
        let (cb, hb, wb) = self.chw(b, "concat_channels")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape("concat_channels", format!("spatial {ha}x{wa} vs {hb}x{wb}")));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    /// `scale·x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::ScaleShift { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f32) -> Var {
        self.scale_shift(x, scale, 0.0)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f32::abs);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Abs { x }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Square { x }, rg)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn clamped_log(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi).ln());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::ClampedLog { x, lo, hi }, rg)
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum { x }, rg)
    }

    /// Mean of all elements, accumulated in `f64`.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Mean { x }, rg)
    }

    /// Gram matrix `G_ij = Σ_k f_ik f_jk` of a `[C, H, W]` feature stack.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "gram")?;
        let data = gram_matrix(self.value(x).data(), c, h * w);
        let value = Tensor::new(vec![c, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Gram { x }, rg))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] = 0.25 * (xs[base] + xs[base + 1] + xs[base + w] + xs[base + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::AvgPool2 { x }, rg))
    }

    /// Sum of squared differences between vertical and horizontal neighbours,
    /// over every channel of a `[C, H, W]` image.
    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "total_variation")?;
        let xs = self.value(x).data();
        let mut acc = 0.0f64;
        for ch in 0..c {
            let p = &xs[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let v = p[y * w + xx] as f64;
                    if xx + 1 < w {
                        acc += (p[y * w + xx + 1] as f64 - v).powi(2);
                    }
                    if y + 1 < h {
                        acc += (p[(y + 1) * w + xx] as f64 - v).powi(2);
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(acc as f32), Op::TotalVariation { x }, rg))
    }

    // ----------------------------------------------------------- backward

    /// Propagate gradients from the scalar `loss` back to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, delta: Vec<f32>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, out_c } => {
                let p = geom.col_cols();
                if rg(*bias) {
                    acc(*bias, channel_sums(g, *out_c, p));
                }
                if rg(*kernel) {
                    let cols = kernels::im2col(self.value(*input).data(), geom);
                    acc(*kernel, kernels::matmul_a_bt(g, &cols, *out_c, p, geom.col_rows()));
                }
                if rg(*input) {
                    let dcols = kernels::matmul_at_b(self.value(*kernel).data(), g, *out_c, geom.col_rows(), p);
                    acc(*input, kernels::col2im(&dcols, geom));
                }
            }
            Op::ConvTranspose2d { input, kernel, bias, geom, in_c } => {
                if rg(*bias) {
                    acc(*bias, channel_sums(g, geom.channels, geom.height * geom.width));
                }
                if rg(*kernel) || rg(*input) {
                    let dcols = kernels::im2col(g, geom);
                    if rg(*kernel) {
                        acc(
                            *kernel,
                            kernels::matmul_a_bt(
                                self.value(*input).data(),
                                &dcols,
                                *in_c,
                                geom.col_cols(),
                                geom.col_rows(),
                            ),
                        );
                    }
                    if rg(*input) {
                        acc(
                            *input,
                            kernels::matmul(
                                self.value(*kernel).data(),
                                &dcols,
                                *in_c,
                                geom.col_rows(),
                                geom.col_cols(),
                            ),
                        );
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let n = g.len() / c;
                let gs = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                    for i in ch * n..(ch + 1) * n {
                        sg += g[i] as f64;
                        sgx += (g[i] * xhat[i]) as f64;
                    }
                    dgamma[ch] = sgx as f32;
                    dbeta[ch] = sg as f32;
                }
                if rg(*x) {
                    let mut dx = vec![0.0f32; g.len()];
                    for ch in 0..c {
                        let k = gs[ch] * inv_std[ch];
                        if *batch_stats {
                            let mg = dbeta[ch] / n as f32;
                            let mgx = dgamma[ch] / n as f32;
                            for i in ch * n..(ch + 1) * n {
                                dx[i] = k * (g[i] - mg - xhat[i] * mgx);
                            }
                        } else {
                            for i in ch * n..(ch + 1) * n {
                                dx[i] = k * g[i];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Activation { x, kind } => {
                let d: Vec<f32> = match kind {
                    Activation::LeakyRelu(s) => self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v >= 0.0 { gv } else { s * gv })
                        .collect(),
                    Activation::Tanh => node.value.data().iter().zip(g).map(|(&y, &gv)| gv * (1.0 - y * y)).collect(),
                    Activation::Sigmoid => {
                        node.value.data().iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect()
                    }
                };
                acc(*x, d);
            }
            Op::Affine { x, w, b } => {
                let n = self.value(*x).numel();
                let m = g.len();
                if rg(*w) {
                    acc(*w, kernels::matmul(g, self.value(*x).data(), m, 1, n));
                }
                if rg(*x) {
                    acc(*x, kernels::matmul_at_b(self.value(*w).data(), g, m, n, 1));
                }
                acc(*b, g.to_vec());
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).numel();
                acc(*a, g[..na].to_vec());
                acc(*b, g[na..].to_vec());
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if rg(*a) {
                    acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if rg(*b) {
                    acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::ScaleShift { x, scale } => acc(*x, g.iter().map(|v| v * scale).collect()),
            Op::Abs { x } => acc(
                *x,
                self.value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Square { x } => acc(*x, self.value(*x).data().iter().zip(g).map(|(&v, &gv)| 2.0 * v * gv).collect()),
            Op::ClampedLog { x, lo, hi } => acc(
                *x,
                self.value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv / v } else { 0.0 })
                    .collect(),
            ),
            Op::Sum { x } => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f32; n]);
            }
            Op::Gram { x } => {
                let (c, h, w) = self.value(*x).chw().expect("gram input");
                let p = h * w;
                // dF = (dG + dGᵀ) · F
                let mut sym = vec![0.0f32; c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = g[i * c + j] + g[j * c + i];
                    }
                }
                acc(*x, kernels::matmul(&sym, self.value(*x).data(), c, c, p));
            }
            Op::AvgPool2 { x } => {
                let (c, h, w) = self.value(*x).chw().expect("pool input");
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * g[(ch * oh + y) * ow + xx];
                            let base = ch * h * w + 2 * y * w + 2 * xx;
                            dx[base] = gv;
                            dx[base + 1] = gv;
                            dx[base + w] = gv;
                            dx[base + w + 1] = gv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::TotalVariation { x } => {
                let (c, h, w) = self.value(*x).chw().expect("tv input");
                let xs = self.value(*x).data();
                let mut dx = vec![0.0f32; xs.len()];
                let s = 2.0 * g[0];
                for ch in 0..c {
                    let o = ch * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let i = o + y * w + xx;
                            if xx + 1 < w {
                                let d = s * (xs[i + 1] - xs[i]);
                                dx[i + 1] += d;
                                dx[i] -= d;
                            }
                            if y + 1 < h {
                                let d = s * (xs[i + w] - xs[i]);
                                dx[i + w] += d;
                                dx[i] -= d;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn channel_sums(g: &[f32], channels: usize, plane: usize) -> Vec<f32> {
    (0..channels).map(|c| g[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() as f32).collect()
}

/// Gram matrix of `c` feature rows of length `p`, summed in ascending `k`.
pub fn gram_matrix(features: &[f32], c: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * c];
    for i in 0..c {
        let fi = &features[i * p..(i + 1) * p];
        for j in i..c {
            let fj = &features[j * p..(j + 1) * p];
            let mut acc = 0.0f32;
            for k in 0..p {
                acc += fi[k] * fj[k];
            }
            out[i * c + j] = acc;
            out[j * c + i] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_zero_input_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 5, 5]));
        let k = tape.constant(Tensor::full(&[3, 2, 3, 3], 0.7));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect();
        let x = tape.constant(t(&[1, 3, 4], &data));
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv2d_sliding_window_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn conv2d_channel_mismatch_is_descriptive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, k, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("input channels 2"), "{err}");
    }

    #[test]
    fn conv_halves_and_transpose_doubles() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 8, 8]));
        let k = tape.constant(Tensor::full(&[4, 2, 4, 4], 0.1));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 4]);
        let kt = tape.constant(Tensor::full(&[4, 3, 4, 4], 0.1));
        let bt = tape.constant(Tensor::zeros(&[3]));
        let z = tape.conv_transpose2d(y, kt, bt, 2, 1).unwrap();
        assert_eq!(tape.shape(z), &[3, 8, 8]);
    }

    #[test]
    fn conv_transpose_single_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 1]));
        let k = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::full(&[2], 0.5));
        let y = tape.conv_transpose2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));

        let z = tape.constant(Tensor::zeros(&[1, 3, 3]));
        let y = tape.conv_transpose2d(z, k, b, 2, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_norm_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2], &[1.0, 3.0]));
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let cfg = BatchNormConfig { eps: 1e-12, momentum: 0.9 };
        let y = tape.batch_norm(x, g, b, &mut stats, cfg, Mode::Train).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5, "{out:?}");
        assert!((stats.mean[0] - 0.2).abs() < 1e-6);
        assert!((stats.var[0] - (0.9 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_constant_and_zero_gamma() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 3], 4.2));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        let y = tape.batch_norm(x, g, b, &mut stats, BatchNormConfig::default(), Mode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() <= 1e-5f32.sqrt()));

        let x = tape.constant(t(&[2, 1, 3], &[1., -2., 5., 0.3, 0.1, 9.]));
        let g0 = tape.constant(Tensor::zeros(&[2]));
        let bc = tape.constant(Tensor::full(&[2], 1.25));
        let y = tape.batch_norm(x, g0, bc, &mut stats, BatchNormConfig::default(), Mode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn batch_norm_rejects_bad_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2]));
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let cfg = BatchNormConfig { eps: 0.0, momentum: 0.9 };
        assert!(matches!(tape.batch_norm(x, g, b, &mut stats, cfg, Mode::Train), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn batch_norm_infer_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2], &[3.0, 5.0]));
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats { mean: vec![1.0], var: vec![4.0] };
        let cfg = BatchNormConfig { eps: 1e-12, momentum: 0.9 };
        let y = tape.batch_norm(x, g, b, &mut stats, cfg, Mode::Infer).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        assert_eq!(stats.mean, vec![1.0]);
    }

    #[test]
    fn activation_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0, -1.0, 2.0, 0.5]));
        let th = tape.tanh(x);
        let sg = tape.sigmoid(x);
        let lr = tape.leaky_relu(x, LEAKY_SLOPE);
        assert_eq!(tape.value(th).data()[0], 0.0);
        assert_eq!(tape.value(sg).data()[0], 0.5);
        assert!((tape.value(lr).data()[1] + 0.2).abs() < 1e-7);
        assert_eq!(tape.value(lr).data()[2], 2.0);
        assert_eq!(tape.value(lr).data()[3], 0.5);
    }

    #[test]
    fn affine_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[1.0, 0.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 2.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(Tensor::zeros(&[2]));
        let y = tape.affine(x, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w0 = tape.constant(Tensor::zeros(&[2, 2]));
        let y = tape.affine(x, w0, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.affine(x, bad, b).is_err());
    }

    #[test]
    fn concat_shapes_and_gradient_split() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[512, 8, 8]));
        let b = tape.param(Tensor::ones(&[256, 8, 8]));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[768, 8, 8]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(a).data().iter().all(|&v| v == 1.0));
        assert_eq!(g.wrt(a).shape(), &[512, 8, 8]);

        let small = tape.param(Tensor::full(&[2, 3, 3], 2.0));
        let empty = tape.constant(Tensor::zeros(&[0, 3, 3]));
        let c = tape.concat_channels(small, empty).unwrap();
        assert_eq!(tape.value(c), tape.value(small));

        let mismatched = tape.constant(Tensor::zeros(&[1, 4, 3]));
        assert!(tape.concat_channels(small, mismatched).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let unused = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
        assert!(!g.reached(unused));

        let target = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let d = tape.sub(x, target).unwrap();
        let sq = tape.square(d);
        let m = tape.mean(sq);
        let g = tape.backward(m).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));

        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn gram_hand_values() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[1, 1, 2], &[1.0, 2.0]));
        let g = tape.gram(f).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0]);
        let e = tape.constant(t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]));
        let g = tape.gram(e).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn tv_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let tv = tape.total_variation(a).unwrap();
        assert_eq!(tape.value(tv).item(), 2.0);
        let b = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let tv = tape.total_variation(b).unwrap();
        assert_eq!(tape.value(tv).item(), 4.0);
    }
}
