use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::error::{GraphError, Result};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{Shape, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary<T> {
    LeakyRelu(T),
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Square,
    /// Identity inside `[lo, hi]`, saturating outside with zero gradient.
    Clamp(T, T),
}

impl<T: Real> Unary<T> {
    fn apply(&self, x: T) -> T {
        match *self {
            Unary::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * s
                }
            }
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(&self, x: T, y: T) -> T {
        let one = T::one();
        match *self {
            Unary::LeakyRelu(s) => {
                if x > T::zero() {
                    one
                } else {
                    s
                }
            }
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Tanh => one - y * y,
            Unary::Abs => {
                if x > T::zero() {
                    one
                } else if x < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            Unary::Square => x + x,
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    one
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Unary(Var, Unary<T>),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat(Vec<Var>),
    Upsample2x(Var),
    AvgPool2(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialMean(Var),
    MeanAll(Var),
    SumAll(Var),
    Gram(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for one reverse sweep.
///
/// Nodes are appended in evaluation order, so the tape index order is a
/// valid topological order for the backward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every recorded node that needs them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownVar(v.0))
        }
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = broadcast_map(self.value(a), self.value(b), f)?;
        Ok(self.record(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.check(x)?;
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        Ok(self.record(out, Op::Scale(x, s), &[x]))
    }

    /// `x + c` for a constant scalar `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let c = T::of(c);
        let out = self.value(x).map(|v| v + c);
        Ok(self.record(out, Op::Offset(x), &[x]))
    }

    pub fn unary(&mut self, x: Var, f: Unary<T>) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| f.apply(v));
        Ok(self.record(out, Op::Unary(x, f), &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(T::of(slope)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Unary::Clamp(T::of(lo), T::of(hi)))
    }

    // ---- convolution and normalization --------------------------------

    /// 2D cross-correlation. `w` is (cout, cin, kh, kw); `b` holds `cout` values.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(out, Op::Conv { x, w, b, spec }, &inputs))
    }

    /// Per-sample, per-channel normalization over the spatial axes with an
    /// affine (1, C, 1, 1) scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x);
        let c = xs.c();
        for p in [gamma, beta] {
            self.check(p)?;
            if self.value(p).numel() != c {
                return Err(GraphError::Shape(format!(
                    "instance norm affine {:?} for {c} channels",
                    self.shape(p)
                )));
            }
        }
        let plane = xs.plane();
        let inv_len = T::of(1.0 / plane as f64);
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(xs.n() * c);
        let mut inv_stds = Vec::with_capacity(xs.n() * c);
        for (i, (src, dst)) in xv.chunks(plane).zip(out.chunks_mut(plane)).enumerate() {
            let ch = i % c;
            let mean = src.iter().copied().sum::<T>() * inv_len;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
            let inv_std = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = g[ch] * (s - mean) * inv_std + bt[ch];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let out = Tensor::from_vec(xs, out)?;
        Ok(self.record(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- layout ------------------------------------------------------

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| GraphError::Shape("concat of zero tensors".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let s0 = self.shape(first);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w() {
                return Err(GraphError::Shape(format!(
                    "channel concat of {s0:?} with {s:?}"
                )));
            }
            c_total += s.c();
        }
        let shape = Shape([s0.n(), c_total, s0.h(), s0.w()]);
        let mut out = Vec::with_capacity(shape.numel());
        for n in 0..s0.n() {
            for &p in parts {
                let t = self.value(p);
                let item = t.shape().c() * t.shape().plane();
                out.extend_from_slice(&t.data()[n * item..(n + 1) * item]);
            }
        }
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.record(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(out, Op::Reshape(x), &[x]))
    }

    /// Nearest-neighbour upsampling by a factor of two on both spatial axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let [n, c, h, w] = self.shape(x).0;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * h * w * 4];
        let (ho, wo) = (2 * h, 2 * w);
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_vec([n, c, ho, wo], out)?;
        Ok(self.record(out, Op::Upsample2x(x), &[x]))
    }

    /// Mean over non-overlapping 2x2 windows; spatial sizes must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = avg_pool2(self.value(x))?;
        Ok(self.record(out, Op::AvgPool2(x), &[x]))
    }

    /// Max over non-overlapping 2x2 windows; ties route the gradient to the
    /// first maximum in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let [n, c, h, w] = self.shape(x).0;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(GraphError::Shape(format!(
                "max pool needs even spatial size, got {:?}",
                self.shape(x)
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_vec([n, c, ho, wo], out)?;
        Ok(self.record(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Per-pixel mean over channels: (N, C, H, W) -> (N, 1, H, W).
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let [n, c, h, w] = self.shape(x).0;
        let p = h * w;
        let src = self.value(x).data();
        let inv = T::of(1.0 / c as f64);
        let mut out = vec![T::zero(); n * p];
        for b in 0..n {
            // shifted by channel 0 so constant vectors average exactly
            let first = &src[b * c * p..][..p];
            let dst = &mut out[b * p..(b + 1) * p];
            for ch in 1..c {
                for ((d, &s), &f) in dst.iter_mut().zip(&src[(b * c + ch) * p..][..p]).zip(first) {
                    *d += s - f;
                }
            }
            for (d, &f) in dst.iter_mut().zip(first) {
                *d = f + *d * inv;
            }
        }
        let out = Tensor::from_vec([n, 1, h, w], out)?;
        Ok(self.record(out, Op::ChannelMean(x), &[x]))
    }

    /// Per-pixel max over channels; ties route the gradient to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let [n, c, h, w] = self.shape(x).0;
        let p = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * p);
        let mut argmax = Vec::with_capacity(n * p);
        for b in 0..n {
            for i in 0..p {
                let mut best = (b * c) * p + i;
                for ch in 1..c {
                    let j = (b * c + ch) * p + i;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::from_vec([n, 1, h, w], out)?;
        Ok(self.record(out, Op::ChannelMax { x, argmax }, &[x]))
    }

    /// Global average pool over the spatial axes: (N, C, H, W) -> (N, C, 1, 1).
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        let inv = T::of(1.0 / s.plane() as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(s.plane())
            .map(|p| p[0] + p.iter().map(|&v| v - p[0]).sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec([s.n(), s.c(), 1, 1], out)?;
        Ok(self.record(out, Op::SpatialMean(x), &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).mean());
        Ok(self.record(out, Op::MeanAll(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.record(out, Op::SumAll(x), &[x]))
    }

    /// Normalized Gram matrix `F F^T / (C H W)` per batch item, as (N, 1, C, C).
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = gram(self.value(x));
        Ok(self.record(out, Op::Gram(x), &[x]))
    }

    // ---- reverse sweep -----------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(GraphError::NonScalarLoss(format!("{s:?}")));
        }
        self.backward_from(loss, Tensor::full(s, T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at node `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.check(out)?;
        if seed.shape() != self.shape(out) {
            return Err(GraphError::Shape(format!(
                "seed {:?} for node of shape {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs_grad(a) {
                    self.accumulate(grads, a, reduce_to(g, self.shape(a)));
                }
                if self.needs_grad(b) {
                    self.accumulate(grads, b, reduce_to(g, self.shape(b)));
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs_grad(a) {
                    self.accumulate(grads, a, reduce_to(g, self.shape(a)));
                }
                if self.needs_grad(b) {
                    let neg = reduce_to(g, self.shape(b)).map(|v| -v);
                    self.accumulate(grads, b, neg);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs_grad(a) {
                    let ga = broadcast_grad(g, bv, av.shape(), |gi, other| gi * other);
                    self.accumulate(grads, a, ga);
                }
                if self.needs_grad(b) {
                    let gb = broadcast_grad(g, av, bv.shape(), |gi, other| gi * other);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs_grad(a) {
                    let ga = broadcast_grad(g, bv, av.shape(), |gi, den| gi / den);
                    self.accumulate(grads, a, ga);
                }
                if self.needs_grad(b) {
                    // d(a/b)/db = -(a/b)/b = -y/b, with y already broadcast to the output shape.
                    let gy = g.zip_map(y, |gi, yi| -gi * yi)?;
                    let gb = broadcast_grad(&gy, bv, bv.shape(), |gi, den| gi / den);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Unary(x, f) => {
                let xv = self.value(*x);
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(y.data())
                    .map(|((&gi, &xi), &yi)| gi * f.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), data)?);
            }
            Op::Conv { x, w, b, spec } => {
                let want = [
                    self.needs_grad(*x),
                    self.needs_grad(*w),
                    b.map(|b| self.needs_grad(b)).unwrap_or(false),
                ];
                let cg = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.map(|b| self.shape(b)),
                    *spec,
                    g,
                    want,
                )?;
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let c = s.c();
                let plane = s.plane();
                let inv_len = T::of(1.0 / plane as f64);
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (p, ((xs, gs), dxs)) in xv
                    .data()
                    .chunks(plane)
                    .zip(g.data().chunks(plane))
                    .zip(dx.chunks_mut(plane))
                    .enumerate()
                {
                    let ch = p % c;
                    let (mu, r) = (mean[p], inv_std[p]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&xi, &gi) in xs.iter().zip(gs) {
                        let xhat = (xi - mu) * r;
                        sum_g += gi;
                        sum_gx += gi * xhat;
                    }
                    dgamma[ch] += sum_gx;
                    dbeta[ch] += sum_g;
                    let mean_dxhat = sum_g * gam[ch] * inv_len;
                    let mean_dxhat_xhat = sum_gx * gam[ch] * inv_len;
                    for ((&xi, &gi), d) in xs.iter().zip(gs).zip(dxs.iter_mut()) {
                        let xhat = (xi - mu) * r;
                        *d = r * (gi * gam[ch] - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, dx)?);
                let gs = self.shape(*gamma);
                self.accumulate(grads, *gamma, Tensor::from_vec(gs, dgamma)?);
                let bs = self.shape(*beta);
                self.accumulate(grads, *beta, Tensor::from_vec(bs, dbeta)?);
            }
            Op::Concat(parts) => {
                let s = y.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    if self.needs_grad(p) {
                        let item = ps.c() * ps.plane();
                        let mut part = Vec::with_capacity(ps.numel());
                        for n in 0..s.n() {
                            let start = n * s.c() * s.plane() + offset * s.plane();
                            part.extend_from_slice(&g.data()[start..start + item]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(ps, part)?);
                    }
                    offset += ps.c();
                }
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s.h(), s.w());
                let mut dx = vec![T::zero(); s.numel()];
                for (plane, dst) in g.data().chunks(4 * h * w).zip(dx.chunks_mut(h * w)) {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(yy / 2) * w + xx / 2] += plane[yy * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, dx)?);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s.h(), s.w());
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); s.numel()];
                for (plane, dst) in g.data().chunks(h * w / 4).zip(dx.chunks_mut(h * w)) {
                    for yy in 0..h {
                        for xx in 0..w {
                            dst[yy * w + xx] = plane[(yy / 2) * (w / 2) + xx / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, dx)?);
            }
            Op::MaxPool2 { x, argmax } | Op::ChannelMax { x, argmax } => {
                let s = self.shape(*x);
                let mut dx = vec![T::zero(); s.numel()];
                for (&gi, &j) in g.data().iter().zip(argmax) {
                    dx[j] += gi;
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, dx)?);
            }
            Op::ChannelMean(x) => {
                let s = self.shape(*x);
                let (c, p) = (s.c(), s.plane());
                let inv = T::of(1.0 / c as f64);
                let mut dx = vec![T::zero(); s.numel()];
                for (b, gp) in g.data().chunks(p).enumerate() {
                    for ch in 0..c {
                        for (d, &gi) in dx[(b * c + ch) * p..][..p].iter_mut().zip(gp) {
                            *d = gi * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, dx)?);
            }
            Op::SpatialMean(x) => {
                let s = self.shape(*x);
                let p = s.plane();
                let inv = T::of(1.0 / p as f64);
                let mut dx = Vec::with_capacity(s.numel());
                for &gi in g.data() {
                    dx.extend(std::iter::repeat(gi * inv).take(p));
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, dx)?);
            }
            Op::MeanAll(x) => {
                let s = self.shape(*x);
                let v = g.item() / T::of(s.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(s, v));
            }
            Op::SumAll(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(s, g.item()));
            }
            Op::Gram(x) => {
                let xv = self.value(*x);
                let s = xv.shape();
                let (c, p) = (s.c(), s.plane());
                let norm = T::of(1.0 / (c * p) as f64);
                let mut dx = vec![T::zero(); s.numel()];
                for b in 0..s.n() {
                    let gb = &g.data()[b * c * c..(b + 1) * c * c];
                    let sym: Vec<T> = (0..c * c)
                        .map(|k| (gb[k] + gb[(k % c) * c + k / c]) * norm)
                        .collect();
                    let f = &xv.data()[b * c * p..(b + 1) * c * p];
                    gemm(
                        MatRef::new(&sym, c, c),
                        MatRef::new(f, c, p),
                        T::zero(),
                        &mut dx[b * c * p..(b + 1) * c * p],
                    );
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, dx)?);
            }
        }
        Ok(())
    }
}

/// Elementwise map over two tensors under rank-4 broadcasting.
pub fn broadcast_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return a.zip_map(b, f);
    }
    let out = sa.broadcast(sb).ok_or_else(|| {
        GraphError::Shape(format!("cannot broadcast {sa:?} with {sb:?}"))
    })?;
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.numel());
    for_each_broadcast(out, sa, sb, |_, ia, ib| data.push(f(ad[ia], bd[ib])));
    Tensor::from_vec(out, data)
}

/// Calls `f(out_index, a_index, b_index)` for every output element in order.
fn for_each_broadcast(out: Shape, sa: Shape, sb: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let ta = sa.broadcast_strides(out);
    let tb = sb.broadcast_strides(out);
    let [n, c, h, w] = out.0;
    let mut o = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let ba = i0 * ta[0] + i1 * ta[1] + i2 * ta[2];
                let bb = i0 * tb[0] + i1 * tb[1] + i2 * tb[2];
                for i3 in 0..w {
                    f(o, ba + i3 * ta[3], bb + i3 * tb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Sum a gradient over the axes along which `target` was broadcast.
fn reduce_to<T: Real>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = vec![T::zero(); target.numel()];
    let gd = g.data();
    for_each_broadcast(g.shape(), target, g.shape(), |o, it, _| out[it] += gd[o]);
    Tensor::from_vec(target, out).expect("reduced shape is valid")
}

/// `sum over broadcast axes of f(g, other)` reduced to `target`, where `other`
/// is broadcast to the shape of `g`.
fn broadcast_grad<T: Real>(
    g: &Tensor<T>,
    other: &Tensor<T>,
    target: Shape,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let gd = g.data();
    let od = other.data();
    if g.shape() == target && other.shape() == target {
        let data = gd.iter().zip(od).map(|(&a, &b)| f(a, b)).collect();
        return Tensor::from_vec(target, data).expect("same shape");
    }
    let mut out = vec![T::zero(); target.numel()];
    let out_shape = g.shape();
    let tt = target.broadcast_strides(out_shape);
    let to = other.shape().broadcast_strides(out_shape);
    let [n, c, h, w] = out_shape.0;
    let mut o = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                for i3 in 0..w {
                    let it = i0 * tt[0] + i1 * tt[1] + i2 * tt[2] + i3 * tt[3];
                    let io = i0 * to[0] + i1 * to[1] + i2 * to[2] + i3 * to[3];
                    out[it] += f(gd[o], od[io]);
                    o += 1;
                }
            }
        }
    }
    Tensor::from_vec(target, out).expect("target shape is valid")
}

/// 2x2 mean pooling of a tensor (no graph).
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(GraphError::Shape(format!(
            "average pool needs even spatial size, got {:?}",
            x.shape()
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec([n, c, ho, wo], out)
}

/// `F F^T / (C H W)` per batch item (no graph).
pub fn gram<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (c, p) = (s.c(), s.plane());
    let mut out = vec![T::zero(); s.n() * c * c];
    for b in 0..s.n() {
        let f = &x.data()[b * c * p..(b + 1) * c * p];
        gemm(
            MatRef::new(f, c, p),
            MatRef::t(f, c, p),
            T::zero(),
            &mut out[b * c * c..(b + 1) * c * c],
        );
    }
    let norm = T::of(1.0 / (c * p) as f64);
    for v in &mut out {
        *v *= norm;
    }
    Tensor::from_vec([s.n(), 1, c, c], out).expect("gram shape is valid")
}
