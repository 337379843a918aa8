//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is a Wengert list rebuilt for every forward pass: each op
//! executes eagerly, records its inputs, and returns a [`Value`] handle.
//! [`Tape::backward`] walks the list once in reverse, accumulating gradients
//! only through nodes that (transitively) depend on a trainable leaf, so
//! constant branches — e.g. the raw positive/negative images in a triplet —
//! cost nothing extra.
//!
//! All reductions run in a fixed sequential order; combined with the fixed
//! kernel blocking in `gemm`, forward values and gradients are bit-identical
//! for identical inputs.

use super::gemm;
use super::{broadcast_shapes, strides_of, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Spatial padding mode for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Zero-pad so the output spatial size is `ceil(in / stride)`.
    Same,
    /// No padding; the kernel must fit.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Sigmoid,
    Relu,
    Exp,
    Ln,
    Square,
    Sqrt,
    Neg,
}

enum Op {
    Leaf,
    Matmul { a: Value, b: Value },
    Conv2d { x: Value, k: Value, stride: usize, pad: Pad },
    /// Depthwise separable blur over H and W with the given 1-D taps, valid
    /// extent (output shrinks by `taps.len() - 1` per axis).
    Blur { x: Value, taps: Vec<f64> },
    AvgPool2 { x: Value },
    Upsample2 { x: Value },
    Bin { op: BinOp, a: Value, b: Value },
    Un { op: UnOp, x: Value },
    /// Elementwise `x * mul + add`; only the slope matters to backward.
    Affine { x: Value, mul: f64 },
    Reduce { x: Value, axes: Vec<usize>, mean: bool },
    Reshape { x: Value },
    /// Zero-pad bottom/right of the H, W axes of an NHWC tensor.
    PadBr { x: Value },
    /// Keep the top-left `h x w` window of the H, W axes of an NHWC tensor.
    CropTl { x: Value, h: usize, w: usize },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    g: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` participated in the graph.
    pub fn wrt(&self, v: Value) -> Option<&[f64]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }

    pub fn take(&mut self, v: Value) -> Option<Vec<f64>> {
        self.g.get_mut(v.0).and_then(|o| o.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shape + values of a recorded node.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Value {
        self.push(t, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Value {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `v`'s current value as a constant leaf (cuts the graph).
    pub fn detach(&mut self, v: Value) -> Value {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Value {
        self.nodes.push(Node { value, needs_grad, op });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m x k] * [k x n]` matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!("matmul needs rank-2 operands, got {sa:?} x {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul inner dims differ: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm::matmul_slices(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, needs, Op::Matmul { a, b }))
    }

    // ---- convolution and spatial ops ---------------------------------------

    /// 2-D cross-correlation: `x` is NHWC, `k` is `[kh, kw, c_in, c_out]`.
    pub fn conv2d(&mut self, x: Value, k: Value, stride: usize, pad: Pad) -> Result<Value> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(format!("conv2d needs NHWC x and khkwio kernel, got {sx:?}, {sk:?}")));
        }
        if sx[3] != sk[2] {
            return Err(Error::shape(format!("conv2d channel mismatch: input {sx:?} vs kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1".to_string()));
        }
        let geo = conv_geometry(sx[1], sx[2], sk[0], sk[1], stride, pad)?;
        let out = conv2d_forward(tx, tk, stride, &geo);
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(out, needs, Op::Conv2d { x, k, stride, pad }))
    }

    /// Depthwise separable blur with 1-D `taps` applied along H then W,
    /// valid extent. Taps are a fixed constant (not differentiated).
    pub fn blur_hw(&mut self, x: Value, taps: &[f64]) -> Result<Value> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("blur needs NHWC, got {s:?}")));
        }
        let t = taps.len();
        if t == 0 || t % 2 == 0 {
            return Err(Error::config(format!("blur taps must have odd length, got {t}")));
        }
        if s[1] < t || s[2] < t {
            return Err(Error::shape(format!("blur window {t} larger than spatial dims of {s:?}")));
        }
        let out = blur_forward(tx, taps);
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Blur { x, taps: taps.to_vec() }))
    }

    /// 2x2 mean pooling with stride 2; an odd trailing row/column is dropped.
    pub fn avg_pool2(&mut self, x: Value) -> Result<Value> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("avg_pool2 needs NHWC, got {s:?}")));
        }
        if s[1] < 2 || s[2] < 2 {
            return Err(Error::shape(format!("avg_pool2 needs spatial dims >= 2, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = tx.data();
        let mut out = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let o = ((b * oh + i) * ow + j) * c;
                    let p00 = ((b * h + 2 * i) * w + 2 * j) * c;
                    let p01 = p00 + c;
                    let p10 = ((b * h + 2 * i + 1) * w + 2 * j) * c;
                    let p11 = p10 + c;
                    for ch in 0..c {
                        out[o + ch] =
                            0.25 * (xd[p00 + ch] + xd[p01 + ch] + xd[p10 + ch] + xd[p11 + ch]);
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, oh, ow, c], out)?, needs, Op::AvgPool2 { x }))
    }

    /// Nearest-neighbor 2x upsampling of an NHWC tensor.
    pub fn upsample2(&mut self, x: Value) -> Result<Value> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("upsample2 needs NHWC, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xd = tx.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let src = ((b * h + i) * w + j) * c;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let dst = ((b * oh + 2 * i + di) * ow + 2 * j + dj) * c;
                        out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, oh, ow, c], out)?, needs, Op::Upsample2 { x }))
    }

    /// Zero-pad the bottom/right of the spatial axes.
    pub fn pad_bottom_right(&mut self, x: Value, ph: usize, pw: usize) -> Result<Value> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("pad needs NHWC, got {s:?}")));
        }
        if ph == 0 && pw == 0 {
            return Ok(x);
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h + ph, w + pw);
        let xd = tx.data();
        let mut out = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for i in 0..h {
                let src = ((b * h + i) * w) * c;
                let dst = ((b * oh + i) * ow) * c;
                out[dst..dst + w * c].copy_from_slice(&xd[src..src + w * c]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, oh, ow, c], out)?, needs, Op::PadBr { x }))
    }

    /// Keep the top-left `h x w` spatial window.
    pub fn crop_top_left(&mut self, x: Value, h: usize, w: usize) -> Result<Value> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("crop needs NHWC, got {s:?}")));
        }
        if h > s[1] || w > s[2] {
            return Err(Error::shape(format!("crop {h}x{w} larger than input {s:?}")));
        }
        if h == s[1] && w == s[2] {
            return Ok(x);
        }
        let (n, ih, iw, c) = (s[0], s[1], s[2], s[3]);
        let xd = tx.data();
        let mut out = vec![0.0; n * h * w * c];
        for b in 0..n {
            for i in 0..h {
                let src = ((b * ih + i) * iw) * c;
                let dst = ((b * h + i) * w) * c;
                out[dst..dst + w * c].copy_from_slice(&xd[src..src + w * c]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, h, w, c], out)?, needs, Op::CropTl { x, h, w }))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, op: BinOp, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shapes(ta.shape(), tb.shape())?;
        let out = bin_forward(op, ta, tb, &shape);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, needs, Op::Bin { op, a, b }))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnOp, x: Value) -> Value {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = match op {
            UnOp::Sigmoid => tx.data().iter().map(|&v| sigmoid(v)).collect(),
            UnOp::Relu => tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            UnOp::Exp => tx.data().iter().map(|&v| v.exp()).collect(),
            UnOp::Ln => tx.data().iter().map(|&v| v.ln()).collect(),
            UnOp::Square => tx.data().iter().map(|&v| v * v).collect(),
            UnOp::Sqrt => tx.data().iter().map(|&v| v.sqrt()).collect(),
            UnOp::Neg => tx.data().iter().map(|&v| -v).collect(),
        };
        let shape = tx.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor { shape, data }, needs, Op::Un { op, x })
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        self.unary(UnOp::Sigmoid, x)
    }
    pub fn relu(&mut self, x: Value) -> Value {
        self.unary(UnOp::Relu, x)
    }
    pub fn exp(&mut self, x: Value) -> Value {
        self.unary(UnOp::Exp, x)
    }
    pub fn ln(&mut self, x: Value) -> Value {
        self.unary(UnOp::Ln, x)
    }
    pub fn square(&mut self, x: Value) -> Value {
        self.unary(UnOp::Square, x)
    }
    /// Elementwise square root. The derivative blows up at 0 — callers are
    /// expected to add a small positive floor first.
    pub fn sqrt(&mut self, x: Value) -> Value {
        self.unary(UnOp::Sqrt, x)
    }
    pub fn neg(&mut self, x: Value) -> Value {
        self.unary(UnOp::Neg, x)
    }

    /// `x * mul + add` with f64 constants.
    pub fn affine(&mut self, x: Value, mul: f64, add: f64) -> Value {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.data().iter().map(|&v| v.mul_add(mul, add)).collect();
        let shape = tx.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor { shape, data }, needs, Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        self.affine(x, c, 0.0)
    }

    pub fn add_scalar(&mut self, x: Value, c: f64) -> Value {
        self.affine(x, 1.0, c)
    }

    // ---- reductions and shape ----------------------------------------------

    /// Sum or mean over `axes` (dropped from the output shape).
    pub fn reduce(&mut self, x: Value, axes: &[usize], mean: bool) -> Result<Value> {
        let tx = &self.nodes[x.0].value;
        let rank = tx.rank();
        let mut ax: Vec<usize> = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        if ax.len() != axes.len() {
            return Err(Error::shape(format!("duplicate reduction axes {axes:?}")));
        }
        if ax.iter().any(|&a| a >= rank) {
            return Err(Error::shape(format!("reduction axis out of range: {axes:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = tx
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !ax.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let count: usize = ax.iter().map(|&a| tx.shape()[a]).product();
        let map = reduce_index_map(tx.shape(), &ax);
        let mut out = vec![0.0; out_shape.iter().product::<usize>().max(1)];
        for (i, &v) in tx.data().iter().enumerate() {
            out[map.out_index(i)] += v;
        }
        if mean {
            let inv = 1.0 / count as f64;
            for o in &mut out {
                *o *= inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, out)?, needs, Op::Reduce { x, axes: ax, mean }))
    }

    pub fn reduce_sum(&mut self, x: Value, axes: &[usize]) -> Result<Value> {
        self.reduce(x, axes, false)
    }

    pub fn reduce_mean(&mut self, x: Value, axes: &[usize]) -> Result<Value> {
        self.reduce(x, axes, true)
    }

    /// Mean over all elements (rank-0 result).
    pub fn mean_all(&mut self, x: Value) -> Result<Value> {
        let axes: Vec<usize> = (0..self.nodes[x.0].value.rank()).collect();
        self.reduce(x, &axes, true)
    }

    /// Sum over all elements (rank-0 result).
    pub fn sum_all(&mut self, x: Value) -> Result<Value> {
        let axes: Vec<usize> = (0..self.nodes[x.0].value.rank()).collect();
        self.reduce(x, &axes, false)
    }

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let tx = &self.nodes[x.0].value;
        let n: usize = shape.iter().product();
        if n != tx.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                tx.shape()
            )));
        }
        let t = Tensor::new(shape.to_vec(), tx.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Reshape { x }))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a one-element `root`. Returns per-node gradients.
    pub fn backward(&self, root: Value) -> Result<Gradients> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { g });
        }
        g[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if g[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let gout = g[id].take().expect("checked above");
            self.backprop_node(id, &gout, &mut g);
            g[id] = Some(gout);
        }
        Ok(Gradients { g })
    }

    fn backprop_node(&self, id: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = G * B^T, computed as (B * G^T)^T to keep the big
                    // operand (B) untransposed.
                    let gt = gemm::transpose(gout, m, n);
                    let dat = gemm::matmul_slices(tb.data(), &gt, k, n, m);
                    accumulate(g, a.0, &gemm::transpose(&dat, k, m));
                }
                if self.needs(*b) {
                    // dB = A^T * G; A is the small batch-rows operand.
                    let at = gemm::transpose(ta.data(), m, k);
                    let db = gemm::matmul_slices(&at, gout, k, m, n);
                    accumulate(g, b.0, &db);
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
                let geo = conv_geometry(
                    tx.shape()[1],
                    tx.shape()[2],
                    tk.shape()[0],
                    tk.shape()[1],
                    *stride,
                    *pad,
                )
                .expect("geometry validated at forward");
                if self.needs(*x) {
                    let dx = conv2d_backward_x(tx.shape(), tk, gout, *stride, &geo);
                    accumulate(g, x.0, &dx);
                }
                if self.needs(*k) {
                    let dk = conv2d_backward_k(tx, tk.shape(), gout, *stride, &geo);
                    accumulate(g, k.0, &dk);
                }
            }
            Op::Blur { x, taps } => {
                if self.needs(*x) {
                    let tx = &self.nodes[x.0].value;
                    let dx = blur_backward(tx.shape(), taps, gout);
                    accumulate(g, x.0, &dx);
                }
            }
            Op::AvgPool2 { x } => {
                if self.needs(*x) {
                    let s = self.nodes[x.0].value.shape();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0; n * h * w * c];
                    for b in 0..n {
                        for i in 0..oh {
                            for j in 0..ow {
                                let o = ((b * oh + i) * ow + j) * c;
                                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let p = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                                    for ch in 0..c {
                                        dx[p + ch] += 0.25 * gout[o + ch];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(g, x.0, &dx);
                }
            }
            Op::Upsample2 { x } => {
                if self.needs(*x) {
                    let s = self.nodes[x.0].value.shape();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = vec![0.0; n * h * w * c];
                    for b in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                let d = ((b * h + i) * w + j) * c;
                                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let p = ((b * oh + 2 * i + di) * ow + 2 * j + dj) * c;
                                    for ch in 0..c {
                                        dx[d + ch] += gout[p + ch];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(g, x.0, &dx);
                }
            }
            Op::PadBr { x } => {
                if self.needs(*x) {
                    let s = self.nodes[x.0].value.shape();
                    let os = self.nodes[id].value.shape();
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let ow = os[2];
                    let mut dx = vec![0.0; n * h * w * c];
                    for b in 0..n {
                        for i in 0..h {
                            let src = ((b * os[1] + i) * ow) * c;
                            let dst = ((b * h + i) * w) * c;
                            dx[dst..dst + w * c].copy_from_slice(&gout[src..src + w * c]);
                        }
                    }
                    accumulate(g, x.0, &dx);
                }
            }
            Op::CropTl { x, h, w } => {
                if self.needs(*x) {
                    let s = self.nodes[x.0].value.shape();
                    let (n, ih, iw, c) = (s[0], s[1], s[2], s[3]);
                    let mut dx = vec![0.0; n * ih * iw * c];
                    for b in 0..n {
                        for i in 0..*h {
                            let src = ((b * h + i) * w) * c;
                            let dst = ((b * ih + i) * iw) * c;
                            dx[dst..dst + w * c].copy_from_slice(&gout[src..src + w * c]);
                        }
                    }
                    accumulate(g, x.0, &dx);
                }
            }
            Op::Bin { op, a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let out_shape = self.nodes[id].value.shape();
                let mut ga = if self.needs(*a) { Some(vec![0.0; ta.numel()]) } else { None };
                let mut gb = if self.needs(*b) { Some(vec![0.0; tb.numel()]) } else { None };
                bin_backward(*op, ta, tb, out_shape, gout, ga.as_mut(), gb.as_mut());
                // Sequential accumulation also handles a == b (e.g. mul(x, x)).
                if let Some(ga) = ga {
                    accumulate(g, a.0, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(g, b.0, &gb);
                }
            }
            Op::Un { op, x } => {
                if self.needs(*x) {
                    let tx = &self.nodes[x.0].value;
                    let tout = &self.nodes[id].value;
                    let dx = get_or_zero(g, x.0, tx.numel());
                    match op {
                        UnOp::Sigmoid => {
                            for (i, d) in dx.iter_mut().enumerate() {
                                let s = tout.data()[i];
                                *d += gout[i] * s * (1.0 - s);
                            }
                        }
                        UnOp::Relu => {
                            for (i, d) in dx.iter_mut().enumerate() {
                                if tx.data()[i] > 0.0 {
                                    *d += gout[i];
                                }
                            }
                        }
                        UnOp::Exp => {
                            for (i, d) in dx.iter_mut().enumerate() {
                                *d += gout[i] * tout.data()[i];
                            }
                        }
                        UnOp::Ln => {
                            for (i, d) in dx.iter_mut().enumerate() {
                                *d += gout[i] / tx.data()[i];
                            }
                        }
                        UnOp::Square => {
                            for (i, d) in dx.iter_mut().enumerate() {
                                *d += gout[i] * 2.0 * tx.data()[i];
                            }
                        }
                        UnOp::Sqrt => {
                            for (i, d) in dx.iter_mut().enumerate() {
                                *d += gout[i] * 0.5 / tout.data()[i];
                            }
                        }
                        UnOp::Neg => {
                            for (i, d) in dx.iter_mut().enumerate() {
                                *d -= gout[i];
                            }
                        }
                    }
                }
            }
            Op::Affine { x, mul } => {
                if self.needs(*x) {
                    let dx = get_or_zero(g, x.0, gout.len());
                    for (d, &go) in dx.iter_mut().zip(gout) {
                        *d += go * mul;
                    }
                }
            }
            Op::Reduce { x, axes, mean } => {
                if self.needs(*x) {
                    let tx = &self.nodes[x.0].value;
                    let count: usize = axes.iter().map(|&a| tx.shape()[a]).product();
                    let scale = if *mean { 1.0 / count as f64 } else { 1.0 };
                    let map = reduce_index_map(tx.shape(), axes);
                    let dx = get_or_zero(g, x.0, tx.numel());
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += gout[map.out_index(i)] * scale;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    accumulate(g, x.0, gout);
                }
            }
        }
    }
}

fn get_or_zero(g: &mut [Option<Vec<f64>>], idx: usize, n: usize) -> &mut Vec<f64> {
    let slot = &mut g[idx];
    if slot.is_none() {
        *slot = Some(vec![0.0; n]);
    }
    slot.as_mut().expect("just filled")
}

fn accumulate(g: &mut [Option<Vec<f64>>], idx: usize, contrib: &[f64]) {
    match &mut g[idx] {
        Some(buf) => {
            for (b, &c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// ---- convolution kernels ----------------------------------------------------

pub(crate) struct ConvGeometry {
    pub oh: usize,
    pub ow: usize,
    pub pt: isize,
    pub pl: isize,
}

pub(crate) fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
) -> Result<ConvGeometry> {
    match pad {
        Pad::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let ph = ((oh - 1) * stride + kh).saturating_sub(h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(w);
            Ok(ConvGeometry { oh, ow, pt: (ph / 2) as isize, pl: (pw / 2) as isize })
        }
        Pad::Valid => {
            if h < kh || w < kw {
                return Err(Error::shape(format!(
                    "valid conv kernel {kh}x{kw} exceeds input {h}x{w}"
                )));
            }
            Ok(ConvGeometry { oh: (h - kh) / stride + 1, ow: (w - kw) / stride + 1, pt: 0, pl: 0 })
        }
    }
}

/// Lowers one image's convolution to a patch matrix: row `(oy, ox)` holds
/// the receptive field laid out as `(ky, kx, ci)`, zeros where the window
/// hangs over the padded border. Fills `cols[oh*ow, kh*kw*ci]` in place.
///
/// Working per image keeps the scratch buffer small enough for the
/// allocator to recycle; a whole-batch patch matrix would be tens of
/// megabytes re-faulted on every call.
#[allow(clippy::too_many_arguments)]
fn im2col_image(
    img: &[f64],
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geo: &ConvGeometry,
    cols: &mut [f64],
) {
    let (oh, ow) = (geo.oh, geo.ow);
    let row_len = kh * kw * ci;
    cols.fill(0.0);
    for oy in 0..oh {
        let iy0 = (oy * stride) as isize - geo.pt;
        for ox in 0..ow {
            let ix0 = (ox * stride) as isize - geo.pl;
            let row = (oy * ow + ox) * row_len;
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * ci;
                    let dst = row + (ky * kw + kx) * ci;
                    cols[dst..dst + ci].copy_from_slice(&img[src..src + ci]);
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, geo: &ConvGeometry) -> Tensor {
    let (sx, sk) = (x.shape(), k.shape());
    let (n, h, w, ci) = (sx[0], sx[1], sx[2], sx[3]);
    let (kh, kw, _, co) = (sk[0], sk[1], sk[2], sk[3]);
    let (oh, ow) = (geo.oh, geo.ow);
    let xd = x.data();
    // The kernel's (kh, kw, ci, co) layout flattens directly to the
    // [kh*kw*ci, co] matrix im2col rows expect, so each image is one GEMM.
    let row_len = kh * kw * ci;
    let mut cols = vec![0.0; oh * ow * row_len];
    let mut out = vec![0.0; n * oh * ow * co];
    for b in 0..n {
        im2col_image(&xd[b * h * w * ci..(b + 1) * h * w * ci], h, w, ci, kh, kw, stride, geo, &mut cols);
        let dst = &mut out[b * oh * ow * co..(b + 1) * oh * ow * co];
        super::gemm::matmul_acc(&cols, k.data(), dst, oh * ow, row_len, co);
    }
    Tensor { shape: vec![n, oh, ow, co], data: out }
}

fn conv2d_backward_x(
    xshape: &[usize],
    k: &Tensor,
    gout: &[f64],
    stride: usize,
    geo: &ConvGeometry,
) -> Vec<f64> {
    let (n, h, w, ci) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let sk = k.shape();
    let (kh, kw, _, co) = (sk[0], sk[1], sk[2], sk[3]);
    let (oh, ow) = (geo.oh, geo.ow);
    // Per image: dcols = gout · kᵀ, then scatter-add patch rows back onto
    // the image (the transpose of im2col), skipping taps that fell on
    // padding.
    let row_len = kh * kw * ci;
    let kt = super::gemm::transpose(k.data(), row_len, co);
    let mut dcols = vec![0.0; oh * ow * row_len];
    let mut dx = vec![0.0; n * h * w * ci];
    for b in 0..n {
        dcols.fill(0.0);
        let gslice = &gout[b * oh * ow * co..(b + 1) * oh * ow * co];
        super::gemm::matmul_acc(gslice, &kt, &mut dcols, oh * ow, co, row_len);
        let dimg = &mut dx[b * h * w * ci..(b + 1) * h * w * ci];
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - geo.pt;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - geo.pl;
                let row = (oy * ow + ox) * row_len;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((iy as usize) * w + ix as usize) * ci;
                        let src = row + (ky * kw + kx) * ci;
                        for c_in in 0..ci {
                            dimg[dst + c_in] += dcols[src + c_in];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_k(
    x: &Tensor,
    kshape: &[usize],
    gout: &[f64],
    stride: usize,
    geo: &ConvGeometry,
) -> Vec<f64> {
    let sx = x.shape();
    let (n, h, w, ci) = (sx[0], sx[1], sx[2], sx[3]);
    let (kh, kw, _, co) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    let (oh, ow) = (geo.oh, geo.ow);
    let xd = x.data();
    // dk = Σ over images of colsᵀ · gout, accumulated image by image.
    let row_len = kh * kw * ci;
    let rows = oh * ow;
    let mut cols = vec![0.0; rows * row_len];
    let mut dk = vec![0.0; row_len * co];
    for b in 0..n {
        im2col_image(&xd[b * h * w * ci..(b + 1) * h * w * ci], h, w, ci, kh, kw, stride, geo, &mut cols);
        let colst = super::gemm::transpose(&cols, rows, row_len);
        let gslice = &gout[b * rows * co..(b + 1) * rows * co];
        super::gemm::matmul_acc(&colst, gslice, &mut dk, row_len, rows, co);
    }
    dk
}

// ---- separable blur ----------------------------------------------------------

fn blur_forward(x: &Tensor, taps: &[f64]) -> Tensor {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let t = taps.len();
    let (oh, ow) = (h - t + 1, w - t + 1);
    let xd = x.data();
    // horizontal pass: [n, h, ow, c]
    let mut tmp = vec![0.0; n * h * ow * c];
    for b in 0..n {
        for i in 0..h {
            for j in 0..ow {
                let dst = ((b * h + i) * ow + j) * c;
                for (dt, &tv) in taps.iter().enumerate() {
                    let src = ((b * h + i) * w + j + dt) * c;
                    for ch in 0..c {
                        tmp[dst + ch] = tv.mul_add(xd[src + ch], tmp[dst + ch]);
                    }
                }
            }
        }
    }
    // vertical pass: [n, oh, ow, c]
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let dst = ((b * oh + i) * ow + j) * c;
                for (dt, &tv) in taps.iter().enumerate() {
                    let src = ((b * h + i + dt) * ow + j) * c;
                    for ch in 0..c {
                        out[dst + ch] = tv.mul_add(tmp[src + ch], out[dst + ch]);
                    }
                }
            }
        }
    }
    Tensor { shape: vec![n, oh, ow, c], data: out }
}

fn blur_backward(xshape: &[usize], taps: &[f64], gout: &[f64]) -> Vec<f64> {
    let (n, h, w, c) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let t = taps.len();
    let (oh, ow) = (h - t + 1, w - t + 1);
    // adjoint of the vertical pass: dtmp[n, h, ow, c]
    let mut dtmp = vec![0.0; n * h * ow * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let src = ((b * oh + i) * ow + j) * c;
                for (dt, &tv) in taps.iter().enumerate() {
                    let dst = ((b * h + i + dt) * ow + j) * c;
                    for ch in 0..c {
                        dtmp[dst + ch] = tv.mul_add(gout[src + ch], dtmp[dst + ch]);
                    }
                }
            }
        }
    }
    // adjoint of the horizontal pass
    let mut dx = vec![0.0; n * h * w * c];
    for b in 0..n {
        for i in 0..h {
            for j in 0..ow {
                let src = ((b * h + i) * ow + j) * c;
                for (dt, &tv) in taps.iter().enumerate() {
                    let dst = ((b * h + i) * w + j + dt) * c;
                    for ch in 0..c {
                        dx[dst + ch] = tv.mul_add(dtmp[src + ch], dx[dst + ch]);
                    }
                }
            }
        }
    }
    dx
}

// ---- broadcast elementwise -----------------------------------------------------

/// Precomputed mapping from an operand's flat index to a broadcast flat index.
struct BcastMap {
    /// For each output axis: (output stride in elements, operand stride or 0).
    dims: Vec<(usize, usize, usize)>, // (extent, out_stride, op_stride)
}

fn bcast_map(out_shape: &[usize], op_shape: &[usize]) -> BcastMap {
    let rank = out_shape.len();
    let shift = rank - op_shape.len();
    let op_strides = strides_of(op_shape);
    let out_strides = strides_of(out_shape);
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let (extent, op_stride) = if i < shift {
            (out_shape[i], 0)
        } else if op_shape[i - shift] == 1 && out_shape[i] != 1 {
            (out_shape[i], 0)
        } else {
            (out_shape[i], op_strides[i - shift])
        };
        dims.push((extent, out_strides[i], op_stride));
    }
    BcastMap { dims }
}

impl BcastMap {
    /// Operand flat index for an output flat index.
    #[inline]
    fn op_index(&self, out_idx: usize) -> usize {
        let mut idx = 0;
        for &(extent, out_stride, op_stride) in &self.dims {
            let pos = out_idx / out_stride % extent;
            idx += pos * op_stride;
        }
        idx
    }
}

fn bin_apply(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
    }
}

fn bin_forward(op: BinOp, a: &Tensor, b: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let n: usize = out_shape.iter().product::<usize>().max(1);
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return ad.iter().zip(bd).map(|(&x, &y)| bin_apply(op, x, y)).collect();
    }
    if b.numel() == 1 {
        let y = bd[0];
        return ad.iter().map(|&x| bin_apply(op, x, y)).collect();
    }
    if a.numel() == 1 {
        let x = ad[0];
        return bd.iter().map(|&y| bin_apply(op, x, y)).collect();
    }
    let ma = bcast_map(out_shape, a.shape());
    let mb = bcast_map(out_shape, b.shape());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(bin_apply(op, ad[ma.op_index(i)], bd[mb.op_index(i)]));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn bin_backward(
    op: BinOp,
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    gout: &[f64],
    mut ga: Option<&mut Vec<f64>>,
    mut gb: Option<&mut Vec<f64>>,
) {
    let n: usize = out_shape.iter().product::<usize>().max(1);
    let (ad, bd) = (a.data(), b.data());
    let ma = bcast_map(out_shape, a.shape());
    let mb = bcast_map(out_shape, b.shape());
    let same = a.shape() == b.shape();
    for i in 0..n {
        let (ia, ib) = if same { (i, i) } else { (ma.op_index(i), mb.op_index(i)) };
        let go = gout[i];
        match op {
            BinOp::Add => {
                if let Some(ga) = ga.as_deref_mut() {
                    ga[ia] += go;
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb[ib] += go;
                }
            }
            BinOp::Sub => {
                if let Some(ga) = ga.as_deref_mut() {
                    ga[ia] += go;
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb[ib] -= go;
                }
            }
            BinOp::Mul => {
                if let Some(ga) = ga.as_deref_mut() {
                    ga[ia] += go * bd[ib];
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb[ib] += go * ad[ia];
                }
            }
            BinOp::Div => {
                let bv = bd[ib];
                if let Some(ga) = ga.as_deref_mut() {
                    ga[ia] += go / bv;
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb[ib] -= go * ad[ia] / (bv * bv);
                }
            }
        }
    }
}

// ---- reduction index mapping ----------------------------------------------------

struct ReduceMap {
    /// (extent, in_stride, out_stride) per input axis; out_stride 0 for
    /// reduced axes.
    dims: Vec<(usize, usize, usize)>,
}

fn reduce_index_map(in_shape: &[usize], axes: &[usize]) -> ReduceMap {
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = in_shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides_of(&out_shape);
    let mut dims = Vec::with_capacity(in_shape.len());
    let mut oi = 0;
    for i in 0..in_shape.len() {
        if axes.contains(&i) {
            dims.push((in_shape[i], in_strides[i], 0));
        } else {
            dims.push((in_shape[i], in_strides[i], out_strides[oi]));
            oi += 1;
        }
    }
    ReduceMap { dims }
}

impl ReduceMap {
    #[inline]
    fn out_index(&self, flat: usize) -> usize {
        let mut out = 0;
        for &(extent, in_stride, out_stride) in &self.dims {
            let pos = flat / in_stride % extent;
            out += pos * out_stride;
        }
        out
    }
}
