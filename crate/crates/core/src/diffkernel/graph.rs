//! The computation tape: forward primitives and reverse-mode backward.
//!
//! A [`Graph`] is a Wengert list. Operations append nodes whose inputs always
//! have smaller ids, so creation order is a topological order and a single
//! reverse sweep propagates gradients. Gradients accumulate additively into
//! each node's slot; leaves keep theirs for the caller to harvest.
//!
//! Only the primitives the plantation-line networks need exist here; there is
//! no general broadcasting, fusion, or graph rewriting.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Probability clamp for the binary cross-entropy loss.
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) u32);

impl TensorId {
    #[inline]
    fn index(self) -> usize {
        self.0 as usize
    }
}

enum Op<S> {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    Conv1d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    MaxPool2 {
        input: TensorId,
        argmax: Vec<u32>,
    },
    UpsampleBilinear2 {
        input: TensorId,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    ConcatChannels {
        inputs: Vec<TensorId>,
    },
    Dense {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    MseLoss {
        pred: TensorId,
        target: TensorId,
    },
    BceLoss {
        pred: TensorId,
        label: u8,
        clamped: bool,
    },
    SumScalars {
        inputs: Vec<TensorId>,
    },
}

struct Node<S> {
    tensor: Tensor<S>,
    op: Op<S>,
}

/// A reverse-mode computation tape.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    record_signature: bool,
    signature: Vec<u8>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record_signature: false,
            signature: Vec::new(),
        }
    }

    /// Turns on recording of the piecewise-linear branch signature (ReLU
    /// signs, pooling argmaxes, loss clamps). The gradient checker compares
    /// signatures between perturbed evaluations to detect kink crossings.
    pub fn record_signature(&mut self, on: bool) {
        self.record_signature = on;
        self.signature.clear();
    }

    /// The branch signature recorded since the last toggle.
    pub fn signature(&self) -> &[u8] {
        &self.signature
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Adds a leaf carrying the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&mut self, mut tensor: Tensor<S>) -> TensorId {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf)
    }

    /// Adds a differentiable leaf.
    pub fn variable(&mut self, mut tensor: Tensor<S>) -> TensorId {
        tensor.set_requires_grad(true);
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.index()].tensor
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.index()].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op<S>) -> TensorId {
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node { tensor, op });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.index()].tensor.requires_grad()
    }

    fn push_op(&mut self, mut tensor: Tensor<S>, op: Op<S>, inputs: &[TensorId]) -> TensorId {
        let req = inputs.iter().any(|&i| self.requires(i));
        tensor.set_requires_grad(req);
        self.push(tensor, op)
    }

    fn sig_bits<I: Iterator<Item = bool>>(&mut self, bits: I) {
        if !self.record_signature {
            return;
        }
        let mut byte = 0u8;
        let mut n = 0u8;
        for b in bits {
            byte = (byte << 1) | (b as u8);
            n += 1;
            if n == 8 {
                self.signature.push(byte);
                byte = 0;
                n = 0;
            }
        }
        if n > 0 {
            self.signature.push(byte);
        }
    }

    // ----- primitives -------------------------------------------------

    /// Same-padding 2-D cross-correlation plus bias.
    ///
    /// `input` is `[C_in, H, W]`, `weight` is `[C_out, C_in, k, k]` with odd
    /// `k`, `bias` is `[C_out]`; the output keeps the spatial extents.
    pub fn conv2d(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let ishape = self.value(input).shape();
        let wshape = self.value(weight).shape();
        let bshape = self.value(bias).shape();
        if ishape.len() != 3 || wshape.len() != 4 || bshape.len() != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d expects input [C,H,W], weight [Co,Ci,k,k], bias [Co]; got {ishape:?}, {wshape:?}, {bshape:?}"
            )));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, wc_in, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wc_in != c_in {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if kh != kw || kh % 2 == 0 || kh > kernels::MAX_K {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d kernel must be square and odd (≤ {}), got {kh}x{kw}",
                kernels::MAX_K
            )));
        }
        if bshape[0] != c_out {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d bias has {} entries for {c_out} filters",
                bshape[0]
            )));
        }
        let mut out = vec![S::zero(); c_out * h * w];
        kernels::conv2d_fwd(
            self.value(input).data(),
            c_in,
            h,
            w,
            self.value(weight).data(),
            c_out,
            kh,
            self.value(bias).data(),
            &mut out,
        );
        let t = Tensor::new(&[c_out, h, w], out)?;
        Ok(self.push_op(t, Op::Conv2d { input, weight, bias }, &[input, weight, bias]))
    }

    /// Same-padding 1-D cross-correlation plus bias over `[C, L]`.
    pub fn conv1d(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let ishape = self.value(input).shape();
        let wshape = self.value(weight).shape();
        let bshape = self.value(bias).shape();
        if ishape.len() != 2 || wshape.len() != 3 || bshape.len() != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "conv1d expects input [C,L], weight [Co,Ci,k], bias [Co]; got {ishape:?}, {wshape:?}, {bshape:?}"
            )));
        }
        let (c_in, l) = (ishape[0], ishape[1]);
        let (c_out, wc_in, k) = (wshape[0], wshape[1], wshape[2]);
        if wc_in != c_in {
            return Err(CoreError::ShapeMismatch(format!(
                "conv1d input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if k % 2 == 0 || k > kernels::MAX_K {
            return Err(CoreError::ShapeMismatch(format!(
                "conv1d kernel must be odd (≤ {}), got {k}",
                kernels::MAX_K
            )));
        }
        if bshape[0] != c_out {
            return Err(CoreError::ShapeMismatch(format!(
                "conv1d bias has {} entries for {c_out} filters",
                bshape[0]
            )));
        }
        let mut out = vec![S::zero(); c_out * l];
        kernels::conv1d_fwd(
            self.value(input).data(),
            c_in,
            l,
            self.value(weight).data(),
            c_out,
            k,
            self.value(bias).data(),
            &mut out,
        );
        let t = Tensor::new(&[c_out, l], out)?;
        Ok(self.push_op(t, Op::Conv1d { input, weight, bias }, &[input, weight, bias]))
    }

    /// 2×2 max pooling; gradients route to the first maximum in row-major
    /// block order on ties.
    pub fn maxpool2(&mut self, input: TensorId) -> Result<TensorId> {
        let ishape = self.value(input).shape();
        if ishape.len() != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "maxpool2 expects [C,H,W], got {ishape:?}"
            )));
        }
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "maxpool2 needs even extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(input).data();
        let mut out = vec![S::zero(); c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for cc in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (cc * h + 2 * oy) * w + 2 * ox;
                    let mut best = data[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = (cc * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (cc * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        if self.record_signature {
            let bytes: Vec<u8> = argmax.iter().flat_map(|v| v.to_le_bytes()).collect();
            self.signature.extend_from_slice(&bytes);
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push_op(t, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Bilinear ×2 upsampling, sampling at output pixel centers
    /// (align-corners-false), which preserves constants exactly.
    pub fn upsample_bilinear2(&mut self, input: TensorId) -> Result<TensorId> {
        let ishape = self.value(input).shape();
        if ishape.len() != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "upsample_bilinear2 expects [C,H,W], got {ishape:?}"
            )));
        }
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let data = self.value(input).data();
        let mut out = vec![S::zero(); c * oh * ow];
        let xtaps = upsample_taps(w);
        let ytaps = upsample_taps(h);
        for cc in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy) = ytaps[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = xtaps[ox];
                    let v00 = data[(cc * h + y0) * w + x0].as_f64();
                    let v01 = data[(cc * h + y0) * w + x1].as_f64();
                    let v10 = data[(cc * h + y1) * w + x0].as_f64();
                    let v11 = data[(cc * h + y1) * w + x1].as_f64();
                    let top = v00 * (1.0 - wx) + v01 * wx;
                    let bot = v10 * (1.0 - wx) + v11 * wx;
                    out[(cc * oh + oy) * ow + ox] = S::cast(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push_op(t, Op::UpsampleBilinear2 { input }, &[input]))
    }

    /// Elementwise `max(0, x)`; subgradient 0 at the kink.
    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let src = self.value(input);
        let shape = src.shape().to_vec();
        let out: Vec<S> = src
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let positives: Vec<bool> = self.nodes[input.index()]
            .tensor
            .data()
            .iter()
            .map(|&v| v > S::zero())
            .collect();
        self.sig_bits(positives.into_iter());
        let t = Tensor::new(&shape, out).expect("relu preserves shape");
        self.push_op(t, Op::Relu { input }, &[input])
    }

    /// Elementwise logistic function.
    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        let src = self.value(input);
        let shape = src.shape().to_vec();
        let out: Vec<S> = src
            .data()
            .iter()
            .map(|&v| S::one() / (S::one() + (-v).exp()))
            .collect();
        let t = Tensor::new(&shape, out).expect("sigmoid preserves shape");
        self.push_op(t, Op::Sigmoid { input }, &[input])
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(CoreError::InvalidInput("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape();
        if first.len() != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "concat_channels expects [C,H,W], got {first:?}"
            )));
        }
        let (h, w) = (first[1], first[2]);
        let mut c_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(CoreError::ShapeMismatch(format!(
                    "concat_channels spatial extents differ: {first:?} vs {s:?}"
                )));
            }
            c_total += s[0];
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for &id in inputs {
            out.extend_from_slice(self.value(id).data());
        }
        let t = Tensor::new(&[c_total, h, w], out)?;
        Ok(self.push_op(
            t,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// Affine map: flattens the input row-major and applies `W·x + b`.
    pub fn dense(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let n = self.value(input).numel();
        let wshape = self.value(weight).shape();
        let bshape = self.value(bias).shape();
        if wshape.len() != 2 || wshape[1] != n {
            return Err(CoreError::ShapeMismatch(format!(
                "dense weight {wshape:?} does not match input of {n} values"
            )));
        }
        let m = wshape[0];
        if bshape != [m] {
            return Err(CoreError::ShapeMismatch(format!(
                "dense bias {bshape:?} does not match {m} outputs"
            )));
        }
        let x = self.value(input).data();
        let wdata = self.value(weight).data();
        let bdata = self.value(bias).data();
        let out: Vec<S> = (0..m)
            .map(|r| bdata[r] + kernels::dot(&wdata[r * n..(r + 1) * n], x))
            .collect();
        let t = Tensor::new(&[m], out)?;
        Ok(self.push_op(t, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    /// Sum of squared differences over all positions (sum reduction).
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "mse_loss shapes differ: {:?} vs {:?}",
                self.value(pred).shape(),
                self.value(target).shape()
            )));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let diff: Vec<S> = p.iter().zip(t).map(|(&a, &b)| a - b).collect();
        let loss = kernels::dot(&diff, &diff);
        let out = Tensor::scalar(loss);
        Ok(self.push_op(out, Op::MseLoss { pred, target }, &[pred, target]))
    }

    /// Binary cross-entropy of a scalar probability against a 0/1 label.
    ///
    /// The prediction is clamped to `[ε, 1−ε]`; outside that range the
    /// gradient is zero (true clamp subgradient).
    pub fn bce_loss(&mut self, pred: TensorId, label: u8) -> Result<TensorId> {
        if label > 1 {
            return Err(CoreError::InvalidInput(format!(
                "bce_loss label must be 0 or 1, got {label}"
            )));
        }
        if self.value(pred).numel() != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "bce_loss expects a scalar prediction, got {:?}",
                self.value(pred).shape()
            )));
        }
        let raw = self.value(pred).data()[0].as_f64();
        let clamped = !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&raw);
        let y = raw.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let loss = if label == 1 {
            -y.ln()
        } else {
            -(1.0 - y).ln()
        };
        self.sig_bits([clamped].into_iter());
        let out = Tensor::scalar(S::cast(loss));
        Ok(self.push_op(out, Op::BceLoss { pred, label, clamped }, &[pred]))
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(CoreError::InvalidInput("sum of zero scalars".into()));
        }
        let mut acc = S::zero();
        for &id in inputs {
            if self.value(id).numel() != 1 {
                return Err(CoreError::ShapeMismatch(format!(
                    "sum_scalars expects scalars, got {:?}",
                    self.value(id).shape()
                )));
            }
            acc = acc + self.value(id).data()[0];
        }
        let out = Tensor::scalar(acc);
        Ok(self.push_op(
            out,
            Op::SumScalars {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse sweep from a scalar node, accumulating gradients into every
    /// node that requires them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "backward needs a scalar root, got {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires(loss) {
            return Err(CoreError::MissingGradient(
                "backward root does not depend on any differentiable leaf".into(),
            ));
        }
        self.nodes[loss.index()].tensor.accumulate_grad(&[S::one()]);
        for i in (0..=loss.index()).rev() {
            if !self.nodes[i].tensor.requires_grad()
                || self.nodes[i].tensor.grad().is_none()
                || matches!(self.nodes[i].op, Op::Leaf)
            {
                continue;
            }
            let contribs = self.node_backward(i);
            for (id, delta) in contribs {
                self.nodes[id.index()].tensor.accumulate_grad(&delta);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize) -> Vec<(TensorId, Vec<S>)> {
        let gout = self.nodes[i].tensor.grad().expect("grad present");
        let mut contribs: Vec<(TensorId, Vec<S>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias } => {
                let ishape = self.value(*input).shape();
                let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
                let wshape = self.value(*weight).shape();
                let (c_out, k) = (wshape[0], wshape[2]);
                if self.requires(*input) {
                    let mut din = vec![S::zero(); c_in * h * w];
                    kernels::conv2d_bwd_input(
                        gout,
                        c_out,
                        h,
                        w,
                        self.value(*weight).data(),
                        c_in,
                        k,
                        &mut din,
                    );
                    contribs.push((*input, din));
                }
                if self.requires(*weight) {
                    let mut dw = vec![S::zero(); c_out * c_in * k * k];
                    kernels::conv2d_bwd_weight(
                        gout,
                        c_out,
                        h,
                        w,
                        self.value(*input).data(),
                        c_in,
                        k,
                        &mut dw,
                    );
                    contribs.push((*weight, dw));
                }
                if self.requires(*bias) {
                    let mut db = vec![S::zero(); c_out];
                    kernels::conv2d_bwd_bias(gout, c_out, h * w, &mut db);
                    contribs.push((*bias, db));
                }
            }
            Op::Conv1d { input, weight, bias } => {
                let ishape = self.value(*input).shape();
                let (c_in, l) = (ishape[0], ishape[1]);
                let wshape = self.value(*weight).shape();
                let (c_out, k) = (wshape[0], wshape[2]);
                if self.requires(*input) {
                    let mut din = vec![S::zero(); c_in * l];
                    kernels::conv1d_bwd_input(
                        gout,
                        c_out,
                        l,
                        self.value(*weight).data(),
                        c_in,
                        k,
                        &mut din,
                    );
                    contribs.push((*input, din));
                }
                if self.requires(*weight) {
                    let mut dw = vec![S::zero(); c_out * c_in * k];
                    kernels::conv1d_bwd_weight(
                        gout,
                        c_out,
                        l,
                        self.value(*input).data(),
                        c_in,
                        k,
                        &mut dw,
                    );
                    contribs.push((*weight, dw));
                }
                if self.requires(*bias) {
                    let mut db = vec![S::zero(); c_out];
                    kernels::conv1d_bwd_bias(gout, c_out, l, &mut db);
                    contribs.push((*bias, db));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.requires(*input) {
                    let mut din = vec![S::zero(); self.value(*input).numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        din[src as usize] = din[src as usize] + gout[o];
                    }
                    contribs.push((*input, din));
                }
            }
            Op::UpsampleBilinear2 { input } => {
                if self.requires(*input) {
                    let ishape = self.value(*input).shape();
                    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let xtaps = upsample_taps(w);
                    let ytaps = upsample_taps(h);
                    let mut din = vec![S::zero(); c * h * w];
                    for cc in 0..c {
                        for oy in 0..oh {
                            let (y0, y1, wy) = ytaps[oy];
                            for ox in 0..ow {
                                let (x0, x1, wx) = xtaps[ox];
                                let g = gout[(cc * oh + oy) * ow + ox].as_f64();
                                let w00 = (1.0 - wy) * (1.0 - wx);
                                let w01 = (1.0 - wy) * wx;
                                let w10 = wy * (1.0 - wx);
                                let w11 = wy * wx;
                                let base = cc * h;
                                din[(base + y0) * w + x0] =
                                    din[(base + y0) * w + x0] + S::cast(g * w00);
                                din[(base + y0) * w + x1] =
                                    din[(base + y0) * w + x1] + S::cast(g * w01);
                                din[(base + y1) * w + x0] =
                                    din[(base + y1) * w + x0] + S::cast(g * w10);
                                din[(base + y1) * w + x1] =
                                    din[(base + y1) * w + x1] + S::cast(g * w11);
                            }
                        }
                    }
                    contribs.push((*input, din));
                }
            }
            Op::Relu { input } => {
                if self.requires(*input) {
                    let x = self.value(*input).data();
                    let din: Vec<S> = x
                        .iter()
                        .zip(gout)
                        .map(|(&xi, &g)| if xi > S::zero() { g } else { S::zero() })
                        .collect();
                    contribs.push((*input, din));
                }
            }
            Op::Sigmoid { input } => {
                if self.requires(*input) {
                    let y = self.nodes[i].tensor.data();
                    let din: Vec<S> = y
                        .iter()
                        .zip(gout)
                        .map(|(&yi, &g)| g * yi * (S::one() - yi))
                        .collect();
                    contribs.push((*input, din));
                }
            }
            Op::ConcatChannels { inputs } => {
                let mut offset = 0;
                for &id in inputs {
                    let n = self.value(id).numel();
                    if self.requires(id) {
                        contribs.push((id, gout[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Dense { input, weight, bias } => {
                let n = self.value(*input).numel();
                let m = self.value(*weight).shape()[0];
                let wdata = self.value(*weight).data();
                if self.requires(*input) {
                    let mut din = vec![S::zero(); n];
                    for r in 0..m {
                        kernels::axpy(&mut din, gout[r], &wdata[r * n..(r + 1) * n]);
                    }
                    contribs.push((*input, din));
                }
                if self.requires(*weight) {
                    let x = self.value(*input).data();
                    let mut dw = vec![S::zero(); m * n];
                    for r in 0..m {
                        kernels::axpy(&mut dw[r * n..(r + 1) * n], gout[r], x);
                    }
                    contribs.push((*weight, dw));
                }
                if self.requires(*bias) {
                    contribs.push((*bias, gout.to_vec()));
                }
            }
            Op::MseLoss { pred, target } => {
                let g = gout[0];
                if pred == target {
                    // d/dp Σ(p−p)² = 0
                } else {
                    let p = self.value(*pred).data();
                    let t = self.value(*target).data();
                    let two = S::cast(2.0);
                    if self.requires(*pred) {
                        let d: Vec<S> =
                            p.iter().zip(t).map(|(&a, &b)| two * (a - b) * g).collect();
                        contribs.push((*pred, d));
                    }
                    if self.requires(*target) {
                        let d: Vec<S> =
                            p.iter().zip(t).map(|(&a, &b)| -two * (a - b) * g).collect();
                        contribs.push((*target, d));
                    }
                }
            }
            Op::BceLoss {
                pred,
                label,
                clamped,
            } => {
                if self.requires(*pred) {
                    let d = if *clamped {
                        S::zero()
                    } else {
                        let y = self.value(*pred).data()[0].as_f64();
                        let dl = if *label == 1 { -1.0 / y } else { 1.0 / (1.0 - y) };
                        S::cast(dl) * gout[0]
                    };
                    contribs.push((*pred, vec![d]));
                }
            }
            Op::SumScalars { inputs } => {
                for &id in inputs {
                    if self.requires(id) {
                        contribs.push((id, vec![gout[0]]));
                    }
                }
            }
        }
        contribs
    }
}

/// Source taps for ×2 align-corners-false bilinear sampling: for each output
/// index, the two source indices and the interpolation weight of the second.
fn upsample_taps(extent: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * extent)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let clamped = src.clamp(0.0, (extent - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, clamped - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_one_by_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            g.conv2d(x, w, b),
            Err(CoreError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv1d_hand_summed_window() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn maxpool_block_max_and_tie_routing() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        // Constant block: gradient goes to exactly one cell (the first).
        let mut g = Graph::new();
        let x = g.variable(t(&[1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
        let y = g.maxpool2(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extents() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[1, 3, 4]));
        assert!(g.maxpool2(x).is_err());
    }

    #[test]
    fn upsample_constant_and_gradient_ramp() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 1], 7.5f64));
        let y = g.upsample_bilinear2(x).unwrap();
        assert_eq!(g.value(y).data(), &[7.5; 4]);

        // 2×2 ramp [0,1;0,1] → each row [0, 0.25, 0.75, 1]
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = g.upsample_bilinear2(x).unwrap();
        let d = g.value(y).data();
        for row in 0..4 {
            assert_eq!(&d[row * 4..(row + 1) * 4], &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-2.0, 0.0, 3.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 3.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn concat_preserves_channel_order() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 2, 2], 1.0f64));
        let b = g.constant(Tensor::full(&[3, 2, 2], 2.0f64));
        let y = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 2, 2]);
        assert_eq!(g.value(y).data()[0..8], [1.0; 8]);
        assert_eq!(g.value(y).data()[8..20], [2.0; 12]);

        let c = g.constant(Tensor::full(&[1, 3, 2], 0.0f64));
        assert!(g.concat_channels(&[a, c]).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let p = g.variable(t(&[2], &[1.0, 2.0]));
        let tt = g.constant(t(&[2], &[0.0, 0.0]));
        let l = g.mse_loss(p, tt).unwrap();
        assert_eq!(g.value(l).data(), &[5.0]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::scalar(0.5f64));
        let l = g.bce_loss(p, 1).unwrap();
        assert!((g.value(l).data()[0] - core::f64::consts::LN_2).abs() < 1e-12);

        let p9 = g.constant(Tensor::scalar(0.9f64));
        let l0 = g.bce_loss(p9, 0).unwrap();
        assert!((g.value(l0).data()[0] - 2.302585092994046).abs() < 1e-12);

        assert!(g.bce_loss(p9, 2).is_err());
    }

    #[test]
    fn backward_accumulates_over_multiple_uses() {
        // loss = mse(x, 0) + mse(x, 0) → grad = 2·2x
        let mut g = Graph::new();
        let x = g.variable(t(&[1], &[3.0]));
        let zero = g.constant(t(&[1], &[0.0]));
        let l1 = g.mse_loss(x, zero).unwrap();
        let l2 = g.mse_loss(x, zero).unwrap();
        let l = g.sum_scalars(&[l1, l2]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
    }
}
