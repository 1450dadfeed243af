//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as a node appended after its operands, so
//! node order is already a topological order and backward is a single
//! reverse sweep. A graph supports exactly one backward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, dim, Result};
use crate::kernels::{self, Window};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Pooling window placement at the trailing border.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolMode {
    /// Drop windows that do not fit.
    #[default]
    Floor,
    /// Keep partial windows.
    Ceil,
}

impl PoolMode {
    pub fn extent(self, input: usize, k: usize, stride: usize) -> Option<usize> {
        if input < k {
            return None;
        }
        Some(match self {
            PoolMode::Floor => (input - k) / stride + 1,
            PoolMode::Ceil => (input - k).div_ceil(stride) + 1,
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        win: Window,
    },
    Deconv2d {
        x: Var,
        k: Var,
        win: Window,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Relu(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Fit {
        x: Var,
        off_y: isize,
        off_x: isize,
    },
    Softmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Sum(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<Real>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<Real>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

pub fn smooth_l1(x: Real) -> Real {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: Real) -> Real {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is kept and readable through
    /// [`Graph::grad`] after backward.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Parameter snapshot that is treated as a constant (frozen inference).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf, false)
    }

    /// [`Graph::param`] when `trainable`, otherwise [`Graph::frozen_param`].
    pub fn bind(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if trainable {
            self.param(store, id)
        } else {
            self.frozen_param(store, id)
        }
    }

    /// Gradient of a [`Graph::variable`] leaf after backward.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(contract!("conv2d stride must be positive"));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let (co, ci, kh, kw) = self.value(k).dims4()?;
        if ci != c {
            return Err(dim(OP, "input channels", ci, c));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != co {
                return Err(dim(OP, "bias length", co, bs.iter().product()));
            }
        }
        let out_h = kernels::conv_extent(h, kh, stride, pad).ok_or(dim(OP, "height", kh, h + 2 * pad))?;
        let out_w = kernels::conv_extent(w, kw, stride, pad).ok_or(dim(OP, "width", kw, w + 2 * pad))?;
        let win = Window {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let mut out = vec![0.0; n * co * out_h * out_w];
        {
            let xs = self.value(x).data();
            let ks = self.value(k).data();
            let kdim = win.col_rows();
            let plane = win.col_cols();
            let mut col = if win.is_pointwise() { Vec::new() } else { vec![0.0; kdim * plane] };
            for i in 0..n {
                let xi = &xs[i * c * h * w..(i + 1) * c * h * w];
                let src: &[Real] = if win.is_pointwise() {
                    xi
                } else {
                    kernels::im2col(xi, &win, &mut col);
                    &col
                };
                let yi = &mut out[i * co * plane..(i + 1) * co * plane];
                if let Some(b) = b {
                    let bias = self.value(b).data();
                    for (o, row) in yi.chunks_mut(plane).enumerate() {
                        row.fill(bias[o]);
                    }
                }
                kernels::gemm(co, kdim, plane, ks, false, src, false, 1.0, yi);
            }
        }
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[n, co, out_h, out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, b, win }, rg))
    }

    /// Transposed convolution; the kernel is laid out
    /// `(in_channels, out_channels, kh, kw)`.
    pub fn deconv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "deconv2d";
        if stride == 0 {
            return Err(contract!("deconv2d stride must be positive"));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ci, co, kh, kw) = self.value(k).dims4()?;
        if ci != c {
            return Err(dim(OP, "input channels", ci, c));
        }
        let out_h = kernels::deconv_extent(h, kh, stride, pad).ok_or(dim(OP, "height", 2 * pad + 1, h))?;
        let out_w = kernels::deconv_extent(w, kw, stride, pad).ok_or(dim(OP, "width", 2 * pad + 1, w))?;
        // Geometry of the forward convolution this op is the adjoint of.
        let win = Window {
            channels: co,
            height: out_h,
            width: out_w,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        };
        let mut out = vec![0.0; n * co * out_h * out_w];
        {
            let xs = self.value(x).data();
            let ks = self.value(k).data();
            let kdim = win.col_rows();
            let plane = h * w;
            let mut col = vec![0.0; kdim * plane];
            for i in 0..n {
                let xi = &xs[i * c * plane..(i + 1) * c * plane];
                kernels::gemm(kdim, c, plane, ks, true, xi, false, 0.0, &mut col);
                let yi = &mut out[i * co * out_h * out_w..(i + 1) * co * out_h * out_w];
                kernels::col2im(&col, &win, yi);
            }
        }
        let rg = self.rg(x) || self.rg(k);
        let value = Tensor::new(&[n, co, out_h, out_w], out)?;
        Ok(self.push(value, Op::Deconv2d { x, k, win }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        self.maxpool2d_mode(x, k, stride, PoolMode::Floor)
    }

    /// Windowed max; ties route to the first (row-major lowest) position.
    pub fn maxpool2d_mode(&mut self, x: Var, k: usize, stride: usize, mode: PoolMode) -> Result<Var> {
        const OP: &str = "maxpool2d";
        if k == 0 || stride == 0 {
            return Err(contract!("maxpool2d window and stride must be positive"));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let out_h = mode.extent(h, k, stride).ok_or(dim(OP, "height", k, h))?;
        let out_w = mode.extent(w, k, stride).ok_or(dim(OP, "width", k, w))?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        let mut argmax = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..out_h {
                let y0 = oy * stride;
                let y1 = (y0 + k).min(h);
                for ox in 0..out_w {
                    let x0 = ox * stride;
                    let x1 = (x0 + k).min(w);
                    let mut best = base + y0 * w + x0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let idx = base + yy * w + xx;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *xs.first().ok_or_else(|| contract!("concat of zero tensors"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let (ni, ci, hi, wi) = self.value(v).dims4()?;
            if ni != n {
                return Err(dim(OP, "batch", n, ni));
            }
            if hi != h {
                return Err(dim(OP, "height", h, hi));
            }
            if wi != w {
                return Err(dim(OP, "width", w, wi));
            }
            total_c += ci;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for i in 0..n {
            for &v in xs {
                let t = self.value(v);
                let ci = t.shape()[1];
                out.extend_from_slice(&t.data()[i * ci * plane..(i + 1) * ci * plane]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return Err(dim("slice_channels", "channels", c, start + len));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + start) * plane..(i * c + start + len) * plane]);
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, len, h, w], out)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    /// Inverse of [`Graph::concat_channels`] given the channel counts.
    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.value(x).dims4()?.1;
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(dim("split_channels", "channels", c, total));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Resizes the spatial extent to `(h, w)`: larger axes are center
    /// cropped, smaller axes are zero padded at the trailing edge.
    pub fn fit_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, hi, wi) = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(contract!("fit_spatial target must be non-empty"));
        }
        if hi == h && wi == w {
            return Ok(x);
        }
        let off_y = if hi > h { ((hi - h) / 2) as isize } else { 0 };
        let off_x = if wi > w { ((wi - w) / 2) as isize } else { 0 };
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            for y in 0..h {
                let sy = y as isize + off_y;
                if sy >= hi as isize {
                    break;
                }
                for xx in 0..w {
                    let sx = xx as isize + off_x;
                    if sx >= wi as isize {
                        break;
                    }
                    out[(p * h + y) * w + xx] = src[(p * hi + sy as usize) * wi + sx as usize];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::Fit { x, off_y, off_x }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let k = *t.shape().last().expect("rank >= 1");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let (ea, eb) = (self.value(a).len(), self.value(b).len());
            return Err(dim(op, "shape", ea, eb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Sum of a list of scalars (or equally shaped tensors).
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = *xs.first().ok_or_else(|| contract!("add_all of zero terms"))?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Picks flat elements of `x` into a new tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(dim("gather", "index", src.len(), bad + 1));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Summed softmax cross-entropy over the rows of a `[rows, classes]`
    /// logit matrix against integer targets.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let t = self.value(logits);
        let (rows, k) = match *t.shape() {
            [r, k] => (r, k),
            _ => return Err(dim("cross_entropy_sum", "rank", 2, t.rank())),
        };
        if targets.len() != rows {
            return Err(dim("cross_entropy_sum", "rows", rows, targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(dim("cross_entropy_sum", "class", k, bad + 1));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, (p, &target)) in t.data().chunks(k).zip(probs.chunks_mut(k).zip(&targets)) {
            loss += log_sum_exp(row) - row[target];
            softmax_in_place(p);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// Summed smooth-L1 of `x - target`.
    pub fn smooth_l1_sum(&mut self, x: Var, target: Vec<Real>) -> Result<Var> {
        let src = self.value(x).data();
        if src.len() != target.len() {
            return Err(dim("smooth_l1_sum", "element count", src.len(), target.len()));
        }
        let loss = src.iter().zip(&target).map(|(a, b)| smooth_l1(a - b)).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothL1 { x, target }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store`; gradients of [`Graph::variable`] leaves stay on the graph.
    /// A second call on the same graph is a contract error.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(contract!("backward already ran on this graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.backward_done = true;
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<Real>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        self.leaf_grads = (0..count).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    self.leaf_grads[idx] = Some(Tensor::new(node.value.shape(), gy)?);
                }
                Op::Param(id) => store.accumulate_grad(*id, &gy),
                Op::Conv2d { x, k, b, win } => {
                    let (x, k, b, win) = (*x, *k, *b, *win);
                    self.conv_backward(&mut grads, &gy, x, k, b, &win);
                }
                Op::Deconv2d { x, k, win } => {
                    let (x, k, win) = (*x, *k, *win);
                    self.deconv_backward(&mut grads, &gy, x, k, &win);
                }
                Op::MaxPool { x, argmax } => {
                    if self.rg(*x) {
                        let gx = slot(&mut grads, *x, self.value(*x).len());
                        for (&src, g) in argmax.iter().zip(&gy) {
                            gx[src as usize] += g;
                        }
                    }
                }
                Op::Relu(x) => {
                    if self.rg(*x) {
                        let out = node.value.data();
                        let gx = slot(&mut grads, *x, out.len());
                        for ((a, &o), g) in gx.iter_mut().zip(out).zip(&gy) {
                            if o > 0.0 {
                                *a += g;
                            }
                        }
                    }
                }
                Op::Concat(xs) => {
                    let (n, total_c, h, w) = node.value.dims4()?;
                    let plane = h * w;
                    let mut c0 = 0;
                    for &v in xs {
                        let ci = self.shape(v)[1];
                        if self.rg(v) {
                            let gx = slot(&mut grads, v, n * ci * plane);
                            for i in 0..n {
                                let src = &gy[(i * total_c + c0) * plane..(i * total_c + c0 + ci) * plane];
                                let dst = &mut gx[i * ci * plane..(i + 1) * ci * plane];
                                add_into(dst, src);
                            }
                        }
                        c0 += ci;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let (n, len, h, w) = node.value.dims4()?;
                    let c = self.shape(*x)[1];
                    let plane = h * w;
                    if self.rg(*x) {
                        let gx = slot(&mut grads, *x, n * c * plane);
                        for i in 0..n {
                            let dst = &mut gx[(i * c + start) * plane..(i * c + start + len) * plane];
                            add_into(dst, &gy[i * len * plane..(i + 1) * len * plane]);
                        }
                    }
                }
                Op::Fit { x, off_y, off_x } => {
                    let (n, c, h, w) = node.value.dims4()?;
                    let (_, _, hi, wi) = self.value(*x).dims4()?;
                    if self.rg(*x) {
                        let gx = slot(&mut grads, *x, n * c * hi * wi);
                        for p in 0..n * c {
                            for y in 0..h {
                                let sy = y as isize + off_y;
                                if sy >= hi as isize {
                                    break;
                                }
                                for xx in 0..w {
                                    let sx = xx as isize + off_x;
                                    if sx >= wi as isize {
                                        break;
                                    }
                                    gx[(p * hi + sy as usize) * wi + sx as usize] += gy[(p * h + y) * w + xx];
                                }
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    if self.rg(*x) {
                        let out = node.value.data();
                        let k = *node.value.shape().last().expect("rank >= 1");
                        let gx = slot(&mut grads, *x, out.len());
                        for ((s, g), dst) in out.chunks(k).zip(gy.chunks(k)).zip(gx.chunks_mut(k)) {
                            let dot: Real = s.iter().zip(g).map(|(a, b)| a * b).sum();
                            for j in 0..k {
                                dst[j] += s[j] * (g[j] - dot);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.rg(v) {
                            add_into(slot(&mut grads, v, gy.len()), &gy);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        let other = self.nodes[b.0].value.data();
                        let ga = slot(&mut grads, a, gy.len());
                        for ((d, g), o) in ga.iter_mut().zip(&gy).zip(other) {
                            *d += g * o;
                        }
                    }
                    if self.rg(b) {
                        let other = self.nodes[a.0].value.data();
                        let gb = slot(&mut grads, b, gy.len());
                        for ((d, g), o) in gb.iter_mut().zip(&gy).zip(other) {
                            *d += g * o;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if self.rg(*x) {
                        let gx = slot(&mut grads, *x, gy.len());
                        for (d, g) in gx.iter_mut().zip(&gy) {
                            *d += g * s;
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.rg(*x) {
                        let len = self.value(*x).len();
                        for d in slot(&mut grads, *x, len) {
                            *d += gy[0];
                        }
                    }
                }
                Op::Gather { x, index } => {
                    if self.rg(*x) {
                        let gx = slot(&mut grads, *x, self.value(*x).len());
                        for (&i, g) in index.iter().zip(&gy) {
                            gx[i] += g;
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    if self.rg(*logits) {
                        let k = probs.len() / targets.len().max(1);
                        let gx = slot(&mut grads, *logits, probs.len());
                        for (r, &t) in targets.iter().enumerate() {
                            for j in 0..k {
                                let ind = if j == t { 1.0 } else { 0.0 };
                                gx[r * k + j] += gy[0] * (probs[r * k + j] - ind);
                            }
                        }
                    }
                }
                Op::SmoothL1 { x, target } => {
                    if self.rg(*x) {
                        let src = self.nodes[x.0].value.data();
                        let gx = slot(&mut grads, *x, src.len());
                        for ((d, a), b) in gx.iter_mut().zip(src).zip(target) {
                            *d += gy[0] * smooth_l1_grad(a - b);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        grads: &mut [Option<Vec<Real>>],
        gy: &[Real],
        x: Var,
        k: Var,
        b: Option<Var>,
        win: &Window,
    ) {
        let xt = self.value(x);
        let kt = self.value(k);
        let n = xt.shape()[0];
        let co = kt.shape()[0];
        let kdim = win.col_rows();
        let plane = win.col_cols();
        let in_len = win.channels * win.height * win.width;
        let pointwise = win.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * plane] };

        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let gb = slot(grads, b, co);
            for i in 0..n {
                for (o, row) in gy[i * co * plane..(i + 1) * co * plane].chunks(plane).enumerate() {
                    gb[o] += row.iter().sum::<Real>();
                }
            }
        }
        if self.rg(k) {
            let mut gk = grads[k.0].take().unwrap_or_else(|| vec![0.0; kt.len()]);
            for i in 0..n {
                let xi = &xt.data()[i * in_len..(i + 1) * in_len];
                let src: &[Real] = if pointwise {
                    xi
                } else {
                    kernels::im2col(xi, win, &mut col);
                    &col
                };
                let gyi = &gy[i * co * plane..(i + 1) * co * plane];
                kernels::gemm(co, plane, kdim, gyi, false, src, true, 1.0, &mut gk);
            }
            grads[k.0] = Some(gk);
        }
        if self.rg(x) {
            let mut gx = grads[x.0].take().unwrap_or_else(|| vec![0.0; xt.len()]);
            if col.is_empty() && !pointwise {
                col = vec![0.0; kdim * plane];
            }
            for i in 0..n {
                let gyi = &gy[i * co * plane..(i + 1) * co * plane];
                let gxi = &mut gx[i * in_len..(i + 1) * in_len];
                if pointwise {
                    kernels::gemm(kdim, co, plane, kt.data(), true, gyi, false, 1.0, gxi);
                } else {
                    kernels::gemm(kdim, co, plane, kt.data(), true, gyi, false, 0.0, &mut col);
                    kernels::col2im(&col, win, gxi);
                }
            }
            grads[x.0] = Some(gx);
        }
    }

    fn deconv_backward(&self, grads: &mut [Option<Vec<Real>>], gy: &[Real], x: Var, k: Var, win: &Window) {
        let xt = self.value(x);
        let kt = self.value(k);
        let n = xt.shape()[0];
        let ci = xt.shape()[1];
        let kdim = win.col_rows();
        let plane = win.col_cols();
        let out_len = win.channels * win.height * win.width;
        let mut col = vec![0.0; kdim * plane];
        let mut gk = if self.rg(k) {
            Some(grads[k.0].take().unwrap_or_else(|| vec![0.0; kt.len()]))
        } else {
            None
        };
        let mut gx = if self.rg(x) {
            Some(grads[x.0].take().unwrap_or_else(|| vec![0.0; xt.len()]))
        } else {
            None
        };
        for i in 0..n {
            kernels::im2col(&gy[i * out_len..(i + 1) * out_len], win, &mut col);
            if let Some(gk) = gk.as_mut() {
                let xi = &xt.data()[i * ci * plane..(i + 1) * ci * plane];
                kernels::gemm(ci, plane, kdim, xi, false, &col, true, 1.0, gk);
            }
            if let Some(gx) = gx.as_mut() {
                let gxi = &mut gx[i * ci * plane..(i + 1) * ci * plane];
                kernels::gemm(ci, kdim, plane, kt.data(), false, &col, false, 1.0, gxi);
            }
        }
        if let Some(gk) = gk {
            grads[k.0] = Some(gk);
        }
        if let Some(gx) = gx {
            grads[x.0] = Some(gx);
        }
    }
}

fn slot(grads: &mut [Option<Vec<Real>>], v: Var, len: usize) -> &mut Vec<Real> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [Real], src: &[Real]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn log_sum_exp(row: &[Real]) -> Real {
    let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<Real>())
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - m);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
