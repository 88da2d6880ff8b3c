//! Recorded computations and reverse-mode differentiation.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, GroupNormCache};
use super::{Gradients, ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<R: Real> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Clamp { x: Var, lo: R, hi: R },
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, cache: GroupNormCache<R> },
    GlobalAvgPool(Var),
    Upsample { x: Var, factor: usize },
}

impl<R: Real> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool2 { .. } => "max_pool2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Upsample { .. } => "upsample_nearest",
        }
    }
}

#[derive(Debug)]
struct Node<R: Real> {
    value: Arc<Tensor<R>>,
    op: Op<R>,
    requires_grad: bool,
}

/// A tape of operations recorded in one execution context.
///
/// Every operation validates its inputs and checks that its output is finite;
/// [`Graph::backward`] replays the tape in reverse.
#[derive(Debug, Default)]
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(op.name(), "forward produced a non-finite value"));
        }
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        assert!(value.is_finite(), "constant must be finite");
        self.nodes.push(Node { value: Arc::new(value), op: Op::Constant, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.get(id).shared_value();
        self.nodes.push(Node { value, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn unary(&mut self, x: Var, op: Op<R>, f: impl Fn(R) -> R) -> Result<Var> {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| mismatch("add", self, a, b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y).map_err(|_| mismatch("sub", self, a, b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).map_err(|_| mismatch("mul", self, a, b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = R::lit(s);
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = R::lit(s);
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > R::zero() { v } else { R::zero() })
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::contract("clamp", format!("empty range [{lo}, {hi}]")));
        }
        let (lo, hi) = (R::lit(lo), R::lit(hi));
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        self.clamp(x, lo, f64::INFINITY)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor<R>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&tensors, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(x);
        self.push(out, Op::Narrow { x, axis, start }, rg)
    }

    /// Split `x` into `n` equal chunks along `axis`.
    pub fn chunk(&mut self, x: Var, n: usize, axis: usize) -> Result<Vec<Var>> {
        let dim = self.shape(x).get(axis).copied().unwrap_or(0);
        if n == 0 || dim % n != 0 {
            return Err(Error::contract("chunk", format!("cannot split {dim} into {n} equal parts")));
        }
        let len = dim / n;
        (0..n).map(|i| self.narrow(x, axis, i * len, len)).collect()
    }

    /// 2-D cross-correlation with zero padding.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (_, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::contract("conv2d", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::contract("conv2d", format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let (oh, ow) = match (kernels::conv_out(h, kh, stride, pad), kernels::conv_out(wd, kw, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::contract(
                    "conv2d",
                    format!("degenerate output for {h}x{wd} input, {kh}x{kw} kernel, stride {stride}, pad {pad}"),
                ))
            }
        };
        let geom = ConvGeom { c: cin, h, w: wd, kh, kw, stride, pad, oh, ow };
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] in its input).
    /// `x: [B, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`, `b: [Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (_, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::contract("conv_transpose2d", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::contract("conv_transpose2d", format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let geom = kernels::transposed_geom(cout, h, wd, (kh, kw), stride, pad).ok_or_else(|| {
            Error::contract("conv_transpose2d", format!("degenerate output for {h}x{wd} input"))
        })?;
        let out = kernels::conv_transpose2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::ConvTranspose2d { x, w, b, geom }, rg)
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract("max_pool2d", format!("spatial size {h}x{w} is not even")));
        }
        let (out, argmax) = kernels::max_pool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Group normalization with per-channel scale `gamma` and shift `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::contract("group_norm", format!("expected [B, C, ...], got {shape:?}")));
        }
        let c = shape[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::contract("group_norm", format!("{groups} groups do not divide {c} channels")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::contract("group_norm", format!("affine parameters must have shape [{c}]")));
        }
        let (out, cache) =
            kernels::group_norm_forward(self.value(x), self.value(gamma).data(), self.value(beta).data(), groups, eps);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, cache }, rg)
    }

    /// Mean over the spatial extent: `[B, C, H, W] -> [B, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let p = h * w;
        let d = self.value(x).data();
        let out: Vec<R> = (0..b * c).map(|i| d[i * p..(i + 1) * p].iter().copied().sum::<R>() / R::lit(p as f64)).collect();
        let out = Tensor::new(&[b, c, 1, 1], out)?;
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::contract("upsample_nearest", "factor must be positive"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            for i in 0..oh {
                let row = &d[plane * h * w + (i / factor) * w..plane * h * w + (i / factor + 1) * w];
                for j in 0..ow {
                    out.push(row[j / factor]);
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x, factor }, rg)
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// Returns `d loss / d value` for every parameter that participated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![R::one()])?);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(id) = node.op {
                out.map.insert(id, g);
                continue;
            }
            let mut acc = Accumulator { graph: self, grads: &mut grads, op: node.op.name() };
            self.backprop(&node.op, &node.value, &g, &mut acc)?;
        }
        Ok(out)
    }

    /// [`Graph::backward`] followed by accumulation into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<R>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }

    fn backprop(&self, op: &Op<R>, y: &Tensor<R>, g: &Tensor<R>, acc: &mut Accumulator<'_, R>) -> Result<()> {
        match op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc.add(*a, || g.clone())?;
                acc.add(*b, || g.clone())?;
            }
            Op::Sub(a, b) => {
                acc.add(*a, || g.clone())?;
                acc.add(*b, || g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                acc.add(*a, || g.zip_map(self.value(*b), |gv, bv| gv * bv).expect("shape"))?;
                acc.add(*b, || g.zip_map(self.value(*a), |gv, av| gv * av).expect("shape"))?;
            }
            Op::Scale(x, s) => acc.add(*x, || g.map(|v| v * *s))?,
            Op::AddScalar(x) => acc.add(*x, || g.clone())?,
            Op::Square(x) => {
                let two = R::lit(2.0);
                acc.add(*x, || g.zip_map(self.value(*x), |gv, xv| gv * two * xv).expect("shape"))?
            }
            Op::Exp(x) => acc.add(*x, || g.zip_map(y, |gv, yv| gv * yv).expect("shape"))?,
            Op::Sigmoid(x) => acc.add(*x, || g.zip_map(y, |gv, yv| gv * yv * (R::one() - yv)).expect("shape"))?,
            Op::Tanh(x) => acc.add(*x, || g.zip_map(y, |gv, yv| gv * (R::one() - yv * yv)).expect("shape"))?,
            Op::Relu(x) => acc.add(*x, || {
                g.zip_map(self.value(*x), |gv, xv| if xv > R::zero() { gv } else { R::zero() }).expect("shape")
            })?,
            Op::Clamp { x, lo, hi } => acc.add(*x, || {
                g.zip_map(self.value(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { R::zero() })
                    .expect("shape")
            })?,
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc.add(*x, || Tensor::full(self.shape(*x), gv))?
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc.add(p, || g.narrow(*axis, start, len).expect("concat slice"))?;
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => acc.add(*x, || {
                let shape = self.shape(*x);
                let mut full = Tensor::zeros(shape);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let dim = shape[*axis];
                let len = g.shape()[*axis];
                let dst = full.data_mut();
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    dst[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                full
            })?,
            Op::Conv2d { x, w, b, geom } => {
                let grads = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.is_some(),
                    g,
                    geom,
                    self.rg(*x),
                );
                acc.put(*w, grads.dw)?;
                if let (Some(b), Some(db)) = (b, grads.db) {
                    acc.put(*b, db)?;
                }
                if let Some(dx) = grads.dx {
                    acc.put(*x, dx)?;
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let grads = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.is_some(),
                    g,
                    geom,
                    self.rg(*x),
                );
                acc.put(*w, grads.dw)?;
                if let (Some(b), Some(db)) = (b, grads.db) {
                    acc.put(*b, db)?;
                }
                if let Some(dx) = grads.dx {
                    acc.put(*x, dx)?;
                }
            }
            Op::MaxPool2 { x, argmax } => acc.add(*x, || {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    d[i] += gv;
                }
                dx
            })?,
            Op::GroupNorm { x, gamma, beta, groups, cache } => {
                let gr = kernels::group_norm_backward(
                    self.shape(*x),
                    self.value(*gamma).data(),
                    *groups,
                    cache,
                    g.data(),
                    self.rg(*x),
                );
                let c = self.shape(*gamma).to_vec();
                acc.put(*gamma, Tensor::new(&c, gr.dgamma)?)?;
                acc.put(*beta, Tensor::new(&c, gr.dbeta)?)?;
                if let Some(dx) = gr.dx {
                    acc.put(*x, Tensor::new(self.shape(*x), dx)?)?;
                }
            }
            Op::GlobalAvgPool(x) => acc.add(*x, || {
                let shape = self.shape(*x);
                let p = shape[2] * shape[3];
                let inv = R::lit(1.0 / p as f64);
                let mut dx = Tensor::zeros(shape);
                for (plane, chunk) in dx.data_mut().chunks_mut(p).enumerate() {
                    let v = g.data()[plane] * inv;
                    chunk.iter_mut().for_each(|d| *d = v);
                }
                dx
            })?,
            Op::Upsample { x, factor } => acc.add(*x, || {
                let (b, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for plane in 0..b * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            d[plane * h * w + (i / factor) * w + j / factor] += g.data()[plane * oh * ow + i * ow + j];
                        }
                    }
                }
                dx
            })?,
        }
        Ok(())
    }
}

fn mismatch<R: Real>(op: &'static str, g: &Graph<R>, a: Var, b: Var) -> Error {
    Error::contract(op, format!("shape mismatch {:?} vs {:?}", g.shape(a), g.shape(b)))
}

#[inline]
fn sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

struct Accumulator<'a, R: Real> {
    graph: &'a Graph<R>,
    grads: &'a mut Vec<Option<Tensor<R>>>,
    op: &'static str,
}

impl<R: Real> Accumulator<'_, R> {
    /// Accumulate a lazily computed gradient for `v` (skipped if `v` needs none).
    fn add(&mut self, v: Var, f: impl FnOnce() -> Tensor<R>) -> Result<()> {
        if !self.graph.nodes[v.0].requires_grad {
            return Ok(());
        }
        self.put(v, f())
    }

    fn put(&mut self, v: Var, g: Tensor<R>) -> Result<()> {
        if !self.graph.nodes[v.0].requires_grad {
            return Ok(());
        }
        if !g.is_finite() {
            return Err(Error::numeric(self.op, "backward produced a non-finite gradient"));
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
        Ok(())
    }
}
