//! Tape of executed operations and reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node ids are
//! already a topological order and `backward` is a single reverse sweep.
//! Parameters can be borrowed into the graph without copying.

use std::borrow::Cow;

use super::kernels::{col2im, im2col, Window};
use super::tensor::{matmul, Real, Tensor};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over batch and space.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        /// Eval mode uses fixed statistics, so mean/variance carry no gradient.
        batch_stats: bool,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    SelectChannel {
        x: NodeId,
        channel: usize,
    },
    FitSpatial {
        x: NodeId,
        row_off: usize,
        col_off: usize,
    },
    Sum {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Tensor<T>,
    },
    DiceLoss {
        p: NodeId,
        target: Tensor<T>,
        overlap: T,
        denom: T,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape(msg.into())
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, operands: &[NodeId]) -> NodeId {
        let rg = operands.iter().any(|&id| self.nodes[id.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Borrowed leaf; `trainable` controls whether it receives a gradient.
    pub fn borrowed(&mut self, t: &'a Tensor<T>, trainable: bool) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, trainable)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn dims4(&self, id: NodeId) -> Result<(usize, usize, usize, usize), AutodiffError> {
        self.value(id).dims4()
    }

    // ----- forward operations -------------------------------------------------

    /// Cross-correlation with square kernels. `w` is `[out, in, k, k]`, `b` is `[out]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (n, c, h, wd) = self.dims4(x)?;
        let (o, ci, kh, kw) = self.dims4(w)?;
        if ci != c || kh != kw {
            return Err(shape_err(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if stride == 0 {
            return Err(shape_err("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv2d bias must have one entry per output channel"));
            }
        }
        let win = Window {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let hw = win.cols();
        let mut out = vec![T::zero(); n * o * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = if win.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); win.rows() * hw]
            };
            for bi in 0..n {
                let xn = &xv[bi * c * h * wd..(bi + 1) * c * h * wd];
                let src: &[T] = if win.is_pointwise() {
                    xn
                } else {
                    im2col(xn, &win, &mut cols);
                    &cols
                };
                let dst = &mut out[bi * o * hw..(bi + 1) * o * hw];
                matmul(o, win.rows(), hw, wv, false, src, false, dst, false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                add_channel_bias(&mut out, bv, n, o, hw);
            }
        }
        let value = Tensor::new(vec![n, o, win.out_h, win.out_w], out)?;
        let mut operands = vec![x, w];
        operands.extend(b);
        Ok(self.derived(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &operands,
        ))
    }

    /// Transposed convolution without padding. `w` is `[in, out, k, k]`; output
    /// spatial size is `(H-1)*stride + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (n, c, h, wd) = self.dims4(x)?;
        let (ci, o, kh, kw) = self.dims4(w)?;
        if ci != c || kh != kw {
            return Err(shape_err(format!(
                "conv_transpose2d weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if stride == 0 {
            return Err(shape_err("conv_transpose2d stride must be positive"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv_transpose2d bias must have one entry per output channel"));
            }
        }
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        let win = Window {
            channels: o,
            height: oh,
            width: ow,
            kernel: kh,
            stride,
            pad: 0,
            out_h: h,
            out_w: wd,
        };
        let mut out = vec![T::zero(); n * o * oh * ow];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = vec![T::zero(); win.rows() * h * wd];
            for bi in 0..n {
                let xn = &xv[bi * c * h * wd..(bi + 1) * c * h * wd];
                matmul(win.rows(), c, h * wd, wv, true, xn, false, &mut cols, false);
                col2im(&cols, &win, &mut out[bi * o * oh * ow..(bi + 1) * o * oh * ow]);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data(), n, o, oh * ow);
            }
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let mut operands = vec![x, w];
        operands.extend(b);
        Ok(self.derived(value, Op::ConvTranspose2d { x, w, b, stride }, &operands))
    }

    /// Batch normalization from the statistics of this batch.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats<T>), AutodiffError> {
        let (n, c, h, w) = self.dims4(x)?;
        self.check_affine(gamma, beta, c)?;
        let m = n * h * w;
        if m == 0 {
            return Err(AutodiffError::EmptyBatch);
        }
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let inv_m = T::from_f64(1.0 / m as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..n {
                s += xv[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w].iter().copied().sum();
            }
            let mu = s * inv_m;
            let mut v = T::zero();
            for bi in 0..n {
                for &val in &xv[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w] {
                    let d = val - mu;
                    v += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = v * inv_m;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv_std);
        let id = self.derived(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        );
        Ok((id, BatchStats { mean, var }))
    }

    /// Batch normalization from fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4(x)?;
        self.check_affine(gamma, beta, c)?;
        if n * h * w == 0 {
            return Err(AutodiffError::EmptyBatch);
        }
        if mean.len() != c || var.len() != c {
            return Err(shape_err("running statistics length differs from channel count"));
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let out = self.normalize(x, gamma, beta, mean, &inv_std);
        Ok(self.derived(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        ))
    }

    fn check_affine(&self, gamma: NodeId, beta: NodeId, c: usize) -> Result<(), AutodiffError> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(format!(
                "batch norm parameters must have length {c}, got {:?} and {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        Ok(())
    }

    fn normalize(&self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[T], inv_std: &[T]) -> Tensor<T> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4().expect("checked");
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xt.clone();
        let hw = h * w;
        for bi in 0..n {
            for ch in 0..c {
                let scale = g[ch] * inv_std[ch];
                let shift = b[ch] - mean[ch] * scale;
                for v in &mut out.data_mut()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.derived(out, Op::Relu { x }, &[x])
    }

    /// Max pooling with symmetric padding.
    pub fn maxpool2d(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, AutodiffError> {
        self.maxpool2d_padded(x, kernel, stride, (pad, pad))
    }

    /// Max pooling with `(before, after)` padding applied to both spatial axes.
    /// Padded positions never win; ties go to the first position in scan order.
    pub fn maxpool2d_padded(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4(x)?;
        let (pb, pe) = pad;
        if kernel == 0 || stride == 0 || pb >= kernel || pe >= kernel {
            return Err(shape_err("maxpool needs kernel > padding and positive stride"));
        }
        if h + pb + pe < kernel || w + pb + pe < kernel {
            return Err(shape_err("maxpool kernel larger than padded input"));
        }
        let oh = (h + pb + pe - kernel) / stride + 1;
        let ow = (w + pb + pe - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ki in 0..kernel {
                        let ii = (oi * stride + ki) as isize - pb as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for kj in 0..kernel {
                            let jj = (oj * stride + kj) as isize - pb as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            let idx = base + ii as usize * w + jj as usize;
                            if best_idx == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.derived(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let first = *inputs.first().ok_or_else(|| shape_err("concat of zero tensors"))?;
        let (n, _, h, w) = self.dims4(first)?;
        let mut total = 0;
        for &id in inputs {
            let (ni, ci, hi, wi) = self.dims4(id)?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(shape_err(format!(
                    "concat operands disagree: {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(id).shape()
                )));
            }
            total += ci;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for bi in 0..n {
            for &id in inputs {
                let ci = self.value(id).shape()[1];
                out.extend_from_slice(&self.value(id).data()[bi * ci * hw..(bi + 1) * ci * hw]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        Ok(self.derived(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "add operands disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.derived(out, Op::Add { a, b }, &[a, b]))
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4(x)?;
        let hw = h * w;
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for bi in 0..n {
            let base = bi * c * hw;
            for p in 0..hw {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(d[base + ch * hw + p]);
                }
                let mut s = T::zero();
                for ch in 0..c {
                    let e = (d[base + ch * hw + p] - mx).exp();
                    d[base + ch * hw + p] = e;
                    s += e;
                }
                for ch in 0..c {
                    d[base + ch * hw + p] = d[base + ch * hw + p] / s;
                }
            }
        }
        Ok(self.derived(out, Op::Softmax { x }, &[x]))
    }

    /// Keeps one channel: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn select_channel(&mut self, x: NodeId, channel: usize) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4(x)?;
        if channel >= c {
            return Err(shape_err(format!("channel {channel} out of range for {c} channels")));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * hw);
        for bi in 0..n {
            out.extend_from_slice(&xv[(bi * c + channel) * hw..(bi * c + channel + 1) * hw]);
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.derived(value, Op::SelectChannel { x, channel }, &[x]))
    }

    /// Resizes the spatial extent to `height x width`: zero-pads on the
    /// bottom/right when growing, centre-crops (floor offset) when shrinking.
    pub fn fit_spatial(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4(x)?;
        if height == 0 || width == 0 {
            return Err(shape_err("fit_spatial target must be non-empty"));
        }
        if (h, w) == (height, width) {
            return Ok(x);
        }
        let row_off = if h > height { (h - height) / 2 } else { 0 };
        let col_off = if w > width { (w - width) / 2 } else { 0 };
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * height * width];
        for plane in 0..n * c {
            for i in 0..height.min(h - row_off) {
                let src = &xv[plane * h * w + (i + row_off) * w..];
                let dst = &mut out[plane * height * width + i * width..];
                let len = width.min(w - col_off);
                dst[..len].copy_from_slice(&src[col_off..col_off + len]);
            }
        }
        let value = Tensor::new(vec![n, c, height, width], out)?;
        Ok(self.derived(value, Op::FitSpatial { x, row_off, col_off }, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.derived(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// `sum_i weights_i * x_i`; handy as a generic scalar probe in gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId, AutodiffError> {
        if weights.shape() != self.value(x).shape() {
            return Err(shape_err("weighted_sum weights must match the operand shape"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.derived(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Soft Dice loss `1 - 2 sum(g p) / (sum g^2 + sum p^2)` over every element;
    /// defined as 0 when both sums vanish.
    pub fn dice_loss(&mut self, p: NodeId, target: Tensor<T>) -> Result<NodeId, AutodiffError> {
        if target.shape() != self.value(p).shape() {
            return Err(shape_err(format!(
                "dice_loss target {:?} does not match prediction {:?}",
                target.shape(),
                self.value(p).shape()
            )));
        }
        let pv = self.value(p).data();
        let mut overlap = T::zero();
        let mut denom = T::zero();
        for (&pi, &gi) in pv.iter().zip(target.data()) {
            overlap += gi * pi;
            denom += gi * gi + pi * pi;
        }
        let two = T::from_f64(2.0);
        let loss = if denom == T::zero() {
            T::zero()
        } else {
            T::one() - two * overlap / denom
        };
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::DiceLoss {
                p,
                target,
                overlap,
                denom,
            },
            &[p],
        ))
    }

    // ----- reverse sweep ------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Variables unreachable from `loss` receive zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if self.grads.is_some() {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.as_ref()?.get(id.0)?.as_ref()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), AutodiffError> {
        let go = gout.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (n, c, h, wd) = self.dims4(*x)?;
                let (o, _, k, _) = self.dims4(*w)?;
                let (_, _, oh, ow) = self.nodes[i].value.dims4()?;
                let win = Window {
                    channels: c,
                    height: h,
                    width: wd,
                    kernel: k,
                    stride: *stride,
                    pad: *pad,
                    out_h: oh,
                    out_w: ow,
                };
                let hw = oh * ow;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
                let mut dw = vec![T::zero(); if need_w { wv.len() } else { 0 }];
                let mut cols = vec![T::zero(); if win.is_pointwise() { 0 } else { win.rows() * hw }];
                let mut dcols = vec![T::zero(); if need_x && !win.is_pointwise() { win.rows() * hw } else { 0 }];
                for bi in 0..n {
                    let xn = &xv[bi * c * h * wd..(bi + 1) * c * h * wd];
                    let gn = &go[bi * o * hw..(bi + 1) * o * hw];
                    if need_w {
                        let src: &[T] = if win.is_pointwise() {
                            xn
                        } else {
                            im2col(xn, &win, &mut cols);
                            &cols
                        };
                        matmul(o, hw, win.rows(), gn, false, src, true, &mut dw, true);
                    }
                    if need_x {
                        let dxn = &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd];
                        if win.is_pointwise() {
                            matmul(win.rows(), o, hw, wv, true, gn, false, dxn, false);
                        } else {
                            matmul(win.rows(), o, hw, wv, true, gn, false, &mut dcols, false);
                            col2im(&dcols, &win, dxn);
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(vec![n, c, h, wd], dx)?);
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(go, n, o, hw)?);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let (n, c, h, wd) = self.dims4(*x)?;
                let (_, o, k, _) = self.dims4(*w)?;
                let (_, _, oh, ow) = self.nodes[i].value.dims4()?;
                let win = Window {
                    channels: o,
                    height: oh,
                    width: ow,
                    kernel: k,
                    stride: *stride,
                    pad: 0,
                    out_h: h,
                    out_w: wd,
                };
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
                let mut dw = vec![T::zero(); if need_w { wv.len() } else { 0 }];
                let mut dcols = vec![T::zero(); win.rows() * h * wd];
                for bi in 0..n {
                    let gn = &go[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                    im2col(gn, &win, &mut dcols);
                    if need_x {
                        let dxn = &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd];
                        matmul(c, win.rows(), h * wd, wv, false, &dcols, false, dxn, false);
                    }
                    if need_w {
                        let xn = &xv[bi * c * h * wd..(bi + 1) * c * h * wd];
                        matmul(c, h * wd, win.rows(), xn, false, &dcols, true, &mut dw, true);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(vec![n, c, h, wd], dx)?);
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, channel_sums(go, n, o, oh * ow)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.dims4(*x)?;
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let xv = self.value(*x).data();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for bi in 0..n {
                        let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                        for (&xi, &gi) in xv[r.clone()].iter().zip(&go[r]) {
                            dgamma[ch] += gi * (xi - mean[ch]) * inv_std[ch];
                            dbeta[ch] += gi;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        for bi in 0..n {
                            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                            for ((d, &xi), &gi) in dx[r.clone()].iter_mut().zip(&xv[r.clone()]).zip(&go[r]) {
                                *d = if *batch_stats {
                                    // dxhat = g*gamma; dx = inv_std/m (m dxhat - sum dxhat - xhat sum(dxhat xhat))
                                    let xhat = (xi - mean[ch]) * inv_std[ch];
                                    scale * (gi - (dbeta[ch] + xhat * dgamma[ch]) / m)
                                } else {
                                    scale * gi
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx: Vec<T> = xv
                    .iter()
                    .zip(go)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&idx, &g) in argmax.iter().zip(go) {
                    d[idx] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { inputs } => {
                let (n, _, h, w) = self.nodes[i].value.dims4()?;
                let hw = h * w;
                let total: usize = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for &id in inputs {
                    let ci = self.value(id).shape()[1];
                    if self.requires_grad(id) {
                        let mut part = Vec::with_capacity(n * ci * hw);
                        for bi in 0..n {
                            let start = (bi * total + offset) * hw;
                            part.extend_from_slice(&go[start..start + ci * hw]);
                        }
                        self.accumulate(grads, id, Tensor::new(vec![n, ci, h, w], part)?);
                    }
                    offset += ci;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Softmax { x } => {
                let y = &self.nodes[i].value;
                let (n, c, h, w) = y.dims4()?;
                let hw = h * w;
                let yv = y.data();
                let mut dx = vec![T::zero(); yv.len()];
                for bi in 0..n {
                    let base = bi * c * hw;
                    for p in 0..hw {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            dot += yv[base + ch * hw + p] * go[base + ch * hw + p];
                        }
                        for ch in 0..c {
                            let k = base + ch * hw + p;
                            dx[k] = yv[k] * (go[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::SelectChannel { x, channel } => {
                let (n, c, h, w) = self.dims4(*x)?;
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for bi in 0..n {
                    let dst = (bi * c + channel) * hw;
                    dx[dst..dst + hw].copy_from_slice(&go[bi * hw..(bi + 1) * hw]);
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::FitSpatial { x, row_off, col_off } => {
                let (n, c, h, w) = self.dims4(*x)?;
                let (_, _, height, width) = self.nodes[i].value.dims4()?;
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for r in 0..height.min(h - row_off) {
                        let len = width.min(w - col_off);
                        let src = &go[plane * height * width + r * width..][..len];
                        let dst = &mut dx[plane * h * w + (r + row_off) * w + col_off..][..len];
                        dst.copy_from_slice(src);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Sum { x } => {
                let g = go[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::WeightedSum { x, weights } => {
                let g = go[0];
                self.accumulate(grads, *x, weights.map(|w| w * g));
            }
            Op::DiceLoss {
                p,
                target,
                overlap,
                denom,
            } => {
                if *denom == T::zero() {
                    self.accumulate(grads, *p, Tensor::zeros(self.value(*p).shape()));
                } else {
                    let g = go[0];
                    let two = T::from_f64(2.0);
                    let d2 = *denom * *denom;
                    let pv = self.value(*p).data();
                    let dp: Vec<T> = pv
                        .iter()
                        .zip(target.data())
                        .map(|(&pi, &gi)| g * (-two * gi * *denom + two * *overlap * two * pi) / d2)
                        .collect();
                    self.accumulate(grads, *p, Tensor::new(self.value(*p).shape().to_vec(), dp)?);
                }
            }
        }
        Ok(())
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], n: usize, c: usize, hw: usize) {
    for bi in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            for v in &mut out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                *v += b;
            }
        }
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, hw: usize) -> Result<Tensor<T>, AutodiffError> {
    let mut s = vec![T::zero(); c];
    for bi in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += g[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied().sum();
        }
    }
    Tensor::new(vec![c], s)
}
