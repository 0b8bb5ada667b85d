//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every tensor produced by a differentiable operation keeps a [`Node`]
//! pointing at its parents and a closure mapping the upstream gradient to
//! per-parent gradients. [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates into the `grad` slot of every leaf that
//! was created with `requires_grad`.
//!
//! Layout is row-major NCHW. There is no broadcasting beyond tensor-vs-scalar
//! constants: binary operations demand identical shapes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

type BackwardFn = dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: Box<BackwardFn>,
}

struct Inner {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// A reference-counted, immutable tensor. Cloning is cheap and shares both
/// values and the gradient accumulator.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

/// Elementwise single-input operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Square,
    Relu,
    Sigmoid,
    Scale(f64),
    AddScalar(f64),
    /// `max(x, c)`, the clamp-below operation.
    MaxWith(f64),
}

/// Elementwise two-input operations on identically shaped tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape { op: "tensor", msg: format!("dimensions must be positive, got {shape:?}") });
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidShape {
            op: "tensor",
            msg: format!("shape {shape:?} holds {numel} values, got {len}"),
        });
    }
    Ok(())
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, node: Option<Node>) -> Self {
        Tensor { inner: Arc::new(Inner { shape, data, requires_grad, grad: Mutex::new(None), node }) }
    }

    /// A constant tensor that takes no part in gradient flow.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    /// A leaf tensor whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], Arc::new(vec![value]), false, None)
    }

    /// Derives the output of an operation. A node is only recorded when at
    /// least one parent participates in gradient flow.
    fn derived(
        shape: Vec<usize>,
        data: Vec<f64>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: Box<BackwardFn>,
    ) -> Tensor {
        let tracked = parents.iter().any(Tensor::requires_grad);
        let node = tracked.then(|| Node { op, parents, backward });
        Self::from_parts(shape, Arc::new(data), tracked, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when this tensor was produced by a recorded operation.
    pub fn has_node(&self) -> bool {
        self.inner.node.is_some()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Same values, no gradient flow through the result.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.inner.shape.clone(), Arc::clone(&self.inner.data), false, None)
    }

    /// A fresh leaf with the same values that accumulates its own gradient.
    pub fn to_param(&self) -> Tensor {
        Self::from_parts(self.inner.shape.clone(), Arc::clone(&self.inner.data), true, None)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.numel())?;
        Ok(Self::derived(
            shape.to_vec(),
            self.values().to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    fn ptr(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Backpropagates from a one-element tensor with upstream gradient 1.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("expected a scalar, got shape {:?}", self.shape()),
            });
        }
        self.backward_with(&[1.0])
    }

    /// Backpropagates an explicit upstream gradient of this tensor's shape.
    pub fn backward_with(&self, upstream: &[f64]) -> Result<()> {
        if upstream.len() != self.numel() {
            return Err(Error::shape("backward", self.shape(), &[upstream.len()]));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.inner.node.is_none() {
            self.accumulate(upstream);
            return Ok(());
        }

        // Iterative post-order DFS; reversing it yields a topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((t, child)) = stack.pop() {
            let node = t.inner.node.as_ref().expect("only interior nodes are pushed");
            if child < node.parents.len() {
                let p = node.parents[child].clone();
                stack.push((t, child + 1));
                if p.inner.node.is_some() && p.requires_grad() && !visited.contains(&p.ptr()) {
                    visited.insert(p.ptr());
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.ptr(), upstream.to_vec());
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.ptr()) else { continue };
            let node = t.inner.node.as_ref().unwrap();
            let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
            let parent_grads = (node.backward)(&g, &needs);
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                debug_assert_eq!(pg.len(), p.numel(), "gradient size for parent of {}", node.op);
                if p.inner.node.is_some() {
                    match grads.get_mut(&p.ptr()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(p.ptr(), pg);
                        }
                    }
                } else {
                    p.accumulate(&pg);
                }
            }
        }
        Ok(())
    }

    // ----- elementwise -------------------------------------------------

    pub fn unary(&self, op: Unary) -> Tensor {
        let x = Arc::clone(&self.inner.data);
        let out: Vec<f64> = match op {
            Unary::Square => x.iter().map(|v| v * v).collect(),
            Unary::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Scale(c) => x.iter().map(|v| v * c).collect(),
            Unary::AddScalar(c) => x.iter().map(|v| v + c).collect(),
            Unary::MaxWith(c) => x.iter().map(|&v| v.max(c)).collect(),
        };
        let y = Arc::new(out.clone());
        let name = match op {
            Unary::Square => "square",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::MaxWith(_) => "max_with",
        };
        Self::derived(
            self.shape().to_vec(),
            out,
            name,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx: Vec<f64> = match op {
                    Unary::Square => g.iter().zip(x.iter()).map(|(g, v)| 2.0 * v * g).collect(),
                    Unary::Relu => g.iter().zip(x.iter()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Sigmoid => g.iter().zip(y.iter()).map(|(g, s)| g * s * (1.0 - s)).collect(),
                    Unary::Scale(c) => g.iter().map(|g| g * c).collect(),
                    Unary::AddScalar(_) => g.to_vec(),
                    Unary::MaxWith(c) => g.iter().zip(x.iter()).map(|(g, &v)| if v > c { *g } else { 0.0 }).collect(),
                };
                vec![Some(gx)]
            }),
        )
    }

    /// Elementwise map with a caller-supplied derivative `df(x)`.
    pub fn map(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let x = Arc::clone(&self.inner.data);
        let out = x.iter().map(|&v| f(v)).collect();
        Self::derived(
            self.shape().to_vec(),
            out,
            op,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().zip(x.iter()).map(|(g, &v)| g * df(v)).collect())]),
        )
    }

    pub fn binary(&self, op: Binary, other: &Tensor) -> Result<Tensor> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        if self.shape() != other.shape() {
            return Err(Error::shape(name, self.shape(), other.shape()));
        }
        let a = Arc::clone(&self.inner.data);
        let b = Arc::clone(&other.inner.data);
        let out = match op {
            Binary::Add => a.iter().zip(b.iter()).map(|(x, y)| x + y).collect(),
            Binary::Sub => a.iter().zip(b.iter()).map(|(x, y)| x - y).collect(),
            Binary::Mul => a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
        };
        Ok(Self::derived(
            self.shape().to_vec(),
            out,
            name,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| match op {
                Binary::Add => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
                Binary::Sub => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|v| -v).collect())],
                Binary::Mul => vec![
                    needs[0].then(|| g.iter().zip(b.iter()).map(|(g, y)| g * y).collect()),
                    needs[1].then(|| g.iter().zip(a.iter()).map(|(g, x)| g * x).collect()),
                ],
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Mul, other)
    }

    pub fn square(&self) -> Tensor {
        self.unary(Unary::Square)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Unary::Sigmoid)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Unary::AddScalar(c))
    }

    pub fn max_with(&self, c: f64) -> Tensor {
        self.unary(Unary::MaxWith(c))
    }

    // ----- reductions --------------------------------------------------

    pub fn reduce(&self, op: Reduce) -> Tensor {
        let n = self.numel();
        let total: f64 = self.values().iter().sum();
        let (value, each) = match op {
            Reduce::Sum => (total, 1.0),
            Reduce::Mean => (total / n as f64, 1.0 / n as f64),
        };
        Self::derived(
            vec![1],
            vec![value],
            if op == Reduce::Sum { "sum" } else { "mean" },
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] * each; n])]),
        )
    }

    pub fn sum(&self) -> Tensor {
        self.reduce(Reduce::Sum)
    }

    pub fn mean(&self) -> Tensor {
        self.reduce(Reduce::Mean)
    }

    // ----- layout ------------------------------------------------------

    fn nchw(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape() {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::InvalidShape { op, msg: format!("expected NCHW, got {:?}", self.shape()) }),
        }
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
        let [n, _, h, w] = first.nchw("concat")?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let [pn, pc, ph, pw] = p.nchw("concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            channels.push(pc);
        }
        let total_c: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&p.values()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let chans = channels.clone();
        Ok(Self::derived(
            vec![n, total_c, h, w],
            out,
            "concat",
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut grads: Vec<Option<Vec<f64>>> = chans
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| need.then(|| Vec::with_capacity(n * c * plane)))
                    .collect();
                for b in 0..n {
                    let mut offset = b * total_c * plane;
                    for (slot, &c) in grads.iter_mut().zip(&chans) {
                        if let Some(v) = slot {
                            v.extend_from_slice(&g[offset..offset + c * plane]);
                        }
                        offset += c * plane;
                    }
                }
                grads
            }),
        ))
    }

    /// Nearest-neighbour upsampling of both spatial axes by `factor`.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let [n, c, h, w] = self.nchw("upsample")?;
        let (oh, ow) = (h * factor, w * factor);
        let x = self.values();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / factor) * w + ox / factor];
                }
            }
        }
        Ok(Self::derived(
            vec![n, c, oh, ow],
            out,
            "upsample",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gx[plane * h * w + (oy / factor) * w + ox / factor] += g[plane * oh * ow + oy * ow + ox];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ----- spatial -----------------------------------------------------

    /// 2-D cross-correlation. `kernel` is `[out, in, kh, kw]`, `bias` is `[out]`.
    pub fn conv2d(&self, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.nchw("conv2d")?;
        let [o, kc, kh, kw] = kernel.nchw("conv2d")?;
        if kc != c {
            return Err(Error::shape("conv2d", self.shape(), kernel.shape()));
        }
        if bias.shape() != [o] {
            return Err(Error::shape("conv2d", kernel.shape(), bias.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            });
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let rows = c * kh * kw;
        let cols_n = geom.oh * geom.ow;
        let x = Arc::clone(&self.inner.data);
        let k = Arc::clone(&kernel.inner.data);
        let bias_v = bias.values();

        let mut out = vec![0.0; n * o * cols_n];
        let mut cols_all: Vec<Arc<Vec<f64>>> = Vec::with_capacity(n);
        for b in 0..n {
            let xb = &x[b * c * h * w..(b + 1) * c * h * w];
            let cols = Arc::new(if geom.is_pointwise() { xb.to_vec() } else { geom.im2col(xb) });
            let ob = &mut out[b * o * cols_n..(b + 1) * o * cols_n];
            for (oc, row) in ob.chunks_mut(cols_n).enumerate() {
                row.fill(bias_v[oc]);
            }
            gemm(o, rows, cols_n, &k, Layout::RowMajor, &cols, Layout::RowMajor, ob, 1.0);
            cols_all.push(cols);
        }

        Ok(Self::derived(
            vec![n, o, geom.oh, geom.ow],
            out,
            "conv2d",
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; n * c * h * w]);
                let mut gk = needs[1].then(|| vec![0.0; o * rows]);
                let mut gb = needs[2].then(|| vec![0.0; o]);
                let mut gcols = vec![0.0; rows * cols_n];
                for b in 0..n {
                    let gout = &g[b * o * cols_n..(b + 1) * o * cols_n];
                    if let Some(gk) = gk.as_mut() {
                        // gK += gout · colsᵀ
                        gemm(
                            o,
                            cols_n,
                            rows,
                            gout,
                            Layout::RowMajor,
                            &cols_all[b],
                            Layout::Transposed(cols_n),
                            gk,
                            1.0,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        for (oc, row) in gout.chunks(cols_n).enumerate() {
                            gb[oc] += row.iter().sum::<f64>();
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // gcols = Kᵀ · gout
                        gcols.fill(0.0);
                        gemm(rows, o, cols_n, &k, Layout::Transposed(rows), gout, Layout::RowMajor, &mut gcols, 0.0);
                        let gxb = &mut gx[b * c * h * w..(b + 1) * c * h * w];
                        if geom.is_pointwise() {
                            gxb.iter_mut().zip(&gcols).for_each(|(a, v)| *a += v);
                        } else {
                            geom.col2im(&gcols, gxb);
                        }
                    }
                }
                vec![gx, gk, gb]
            }),
        ))
    }

    /// Max pooling without padding. Gradient routes to the first maximum of
    /// each window in row-major scan order.
    pub fn max_pool2d(&self, k: usize, stride: usize) -> Result<Tensor> {
        self.max_pool2d_padded(k, stride, 0)
    }

    /// Max pooling where out-of-image window cells never win. `padding` must
    /// be smaller than `k` so every window touches the image.
    pub fn max_pool2d_padded(&self, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.nchw("max_pool2d")?;
        if k == 0 || stride == 0 || padding >= k {
            return Err(Error::invalid("max_pool2d needs k > padding and a positive stride"));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::InvalidShape {
                op: "max_pool2d",
                msg: format!("window {k} exceeds input {h}x{w} with padding {padding}"),
            });
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let x = self.values();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let y0 = (oy * stride).saturating_sub(padding);
                let y1 = (oy * stride + k - padding).min(h);
                for ox in 0..ow {
                    let x0 = (ox * stride).saturating_sub(padding);
                    let x1 = (ox * stride + k - padding).min(w);
                    let mut best = base + y0 * w + x0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let idx = base + iy * w + ix;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let numel = self.numel();
        Ok(Self::derived(
            vec![n, c, oh, ow],
            out,
            "max_pool2d",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; numel];
                for (&i, gv) in argmax.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .finish()
    }
}

#[derive(Clone, Copy)]
enum Layout {
    RowMajor,
    /// Stored row-major with the given row length, used as its transpose.
    Transposed(usize),
}

/// `c = beta * c + a · b` for an `m × k` times `k × n` product.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], beta: f64) {
    let (rsa, csa) = match la {
        Layout::RowMajor => (k as isize, 1),
        Layout::Transposed(row) => (1, row as isize),
    };
    let (rsb, csb) = match lb {
        Layout::RowMajor => (n as isize, 1),
        Layout::Transposed(row) => (1, row as isize),
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // regions whose lengths were checked by the assertion.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `koff`.
    fn valid(&self, koff: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // in = o*stride + koff - padding must lie in [0, in_len)
        let lo = if koff >= self.padding { 0 } else { (self.padding - koff).div_ceil(self.stride) };
        let hi = if in_len + self.padding > koff {
            ((in_len + self.padding - koff - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols_n = self.oh * self.ow;
        let mut cols = vec![0.0; self.c * self.kh * self.kw * cols_n];
        for ch in 0..self.c {
            let plane = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y0, y1) = self.valid(ky, self.oh, self.h);
                for kx in 0..self.kw {
                    let (x0, x1) = self.valid(kx, self.ow, self.w);
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ky - self.padding;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 {
                            let ix0 = x0 + kx - self.padding;
                            drow[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                drow[ox] = src[ox * self.stride + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let cols_n = self.oh * self.ow;
        for ch in 0..self.c {
            let plane = &mut gx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y0, y1) = self.valid(ky, self.oh, self.h);
                for kx in 0..self.kw {
                    let (x0, x1) = self.valid(kx, self.ow, self.w);
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ky - self.padding;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let srow = &src[oy * self.ow..(oy + 1) * self.ow];
                        for ox in x0..x1 {
                            dst[ox * self.stride + kx - self.padding] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}
