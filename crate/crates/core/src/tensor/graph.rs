use super::kernels::{self, ConvGeom};
use super::{Real, Result, Shape, Tensor, TensorError};

/// Batch-norm variance guard.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the previous running statistic at each train-mode call.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride 1 with the padding that keeps spatial extents for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub const fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            pad: (kernel - 1) / 2,
            dilation: 1,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::same(1, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and fold them into the running estimate.
    Train,
    /// Normalize with the running estimate.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `running ← momentum·running + (1 − momentum)·batch`
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let k = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + k * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + k * b;
        }
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Backward rule for an operator defined outside the core (e.g. losses).
pub trait CustomBackward<T: Real>: Send {
    /// Gradients for each input, in the order they were recorded. `None`
    /// means the input is treated as a constant.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>)
        -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Scale(usize, T),
    Upsample(usize),
    Mul {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Add {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
    Sum(usize),
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Eager computation record. Node ids are assigned in creation order, so
/// every input precedes its consumer and the record is acyclic by construction.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    flip_conv_input_grad: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, extent: &'static str, expected: usize, actual: usize) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        extent,
        expected,
        actual,
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flip_conv_input_grad: false,
        }
    }

    /// Test hook: negates the input gradient of every convolution.
    #[doc(hidden)]
    pub fn inject_conv_sign_flip(&mut self) {
        self.flip_conv_input_grad = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// A differentiable leaf (parameter or checked input).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(TensorError::Invalid {
                op: OP,
                reason: "stride and dilation must be positive".into(),
            });
        }
        if ws.c != xs.c {
            return Err(mismatch(OP, "input channel", ws.c, xs.c));
        }
        if ws.h == 0 || ws.w == 0 || ws.n == 0 {
            return Err(TensorError::EmptyOutput { op: OP, extent: "kernel" });
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.len() != ws.n {
                return Err(mismatch(OP, "bias length", ws.n, bs.len()));
            }
        }
        let oh = kernels::conv_out_extent(xs.h, ws.h, spec)
            .ok_or(TensorError::EmptyOutput { op: OP, extent: "height" })?;
        let ow = kernels::conv_out_extent(xs.w, ws.w, spec)
            .ok_or(TensorError::EmptyOutput { op: OP, extent: "width" })?;
        let geom = ConvGeom {
            c: xs.c,
            h: xs.h,
            w: xs.w,
            kh: ws.h,
            kw: ws.w,
            oh,
            ow,
            spec,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(weight).data(),
            ws.n,
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(Shape::new(xs.n, ws.n, oh, ow), out)?;
        let mut inputs = vec![x.0, weight.0];
        inputs.extend(bias.map(|b| b.0));
        Ok(self.push(
            value,
            Op::Conv {
                x: x.0,
                w: weight.0,
                b: bias.map(|b| b.0),
                spec,
            },
            &inputs,
        ))
    }

    /// Per-channel normalization. `scale`/`shift` are `1×C×1×1` vectors.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let s = self.shape(x);
        for (v, extent) in [(scale, "scale length"), (shift, "shift length")] {
            if self.shape(v).len() != s.c {
                return Err(mismatch(OP, extent, s.c, self.shape(v).len()));
            }
        }
        if stats.channels() != s.c {
            return Err(mismatch(OP, "running stats length", s.c, stats.channels()));
        }
        let eps = T::from_f64_lossy(BN_EPSILON);
        let (mean, var) = match mode {
            BnMode::Train => {
                let (m, v) = kernels::channel_moments(self.value(x).data(), s);
                stats.update(&m, &v);
                (m, v)
            }
            BnMode::Infer => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        kernels::for_each_plane(s, |c, r| {
            for i in r {
                let h = (xv[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        });
        let value = Tensor::from_vec(s, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            &[x.0, scale.0, shift.0],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(v, Op::Relu(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(stable_sigmoid);
        self.push(v, Op::Sigmoid(x.0), &[x.0])
    }

    /// Clamped one ulp-scale step inside `(-1, 1)` so scaled outputs stay open-interval.
    pub fn tanh(&mut self, x: Var) -> Var {
        let top = T::one() - T::epsilon();
        let v = self.value(x).map(|v| v.tanh().max(-top).min(top));
        self.push(v, Op::Tanh(x.0), &[x.0])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|v| v * factor);
        self.push(v, Op::Scale(x.0, factor), &[x.0])
    }

    /// Align-corners bilinear resize to a larger (or equal) extent.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "bilinear_upsample";
        let s = self.shape(x);
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::EmptyOutput { op: OP, extent: "spatial" });
        }
        if out_h < s.h || out_w < s.w {
            return Err(TensorError::Invalid {
                op: OP,
                reason: format!("downsampling {}x{} to {}x{} is not supported", s.h, s.w, out_h, out_w),
            });
        }
        let out = kernels::upsample_forward(self.value(x).data(), s, out_h, out_w);
        let value = Tensor::from_vec(Shape::new(s.n, s.c, out_h, out_w), out)?;
        Ok(self.push(value, Op::Upsample(x.0), &[x.0]))
    }

    fn check_binary(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        if sb.c == 1 && (sa.n, sa.h, sa.w) == (sb.n, sb.h, sb.w) {
            return Ok(true);
        }
        let extent = if sa.n != sb.n {
            ("batch", sa.n, sb.n)
        } else if sa.h != sb.h {
            ("height", sa.h, sb.h)
        } else if sa.w != sb.w {
            ("width", sa.w, sb.w)
        } else {
            ("channel", sa.c, sb.c)
        };
        Err(mismatch(op, extent.0, extent.1, extent.2))
    }

    fn binary(&self, a: Var, b: Var, broadcast: bool, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let tb = self.value(b);
        let s = ta.shape();
        let mut out = ta.clone();
        if broadcast {
            let bd = tb.data();
            kernels::for_each_plane(s, |_, r| {
                let n = r.start / (s.c * s.plane());
                let off = n * s.plane();
                for (k, i) in r.enumerate() {
                    out.data_mut()[i] = f(ta.data()[i], bd[off + k]);
                }
            });
        } else {
            for (o, &bv) in out.data_mut().iter_mut().zip(tb.data()) {
                *o = f(*o, bv);
            }
        }
        out
    }

    /// Elementwise product; a single-channel `b` is broadcast over `a`'s channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.check_binary("combine(mul)", a, b)?;
        let v = self.binary(a, b, broadcast, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a: a.0, b: b.0, broadcast }, &[a.0, b.0]))
    }

    /// Elementwise sum; a single-channel `b` is broadcast over `a`'s channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.check_binary("combine(add)", a, b)?;
        let v = self.binary(a, b, broadcast, |x, y| x + y);
        Ok(self.push(v, Op::Add { a: a.0, b: b.0, broadcast }, &[a.0, b.0]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op: OP,
            reason: "no parts".into(),
        })?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n != s0.n {
                return Err(mismatch(OP, "batch", s0.n, s.n));
            }
            if s.h != s0.h {
                return Err(mismatch(OP, "height", s0.h, s.h));
            }
            if s.w != s0.w {
                return Err(mismatch(OP, "width", s0.w, s.w));
            }
            channels += s.c;
        }
        let out_shape = Shape::new(s0.n, channels, s0.h, s0.w);
        let mut out = Vec::with_capacity(out_shape.len());
        for n in 0..s0.n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape().c * s0.plane();
                out.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(value, Op::Concat(ids.clone()), &ids))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(TensorError::Invalid {
                op: "slice_channels",
                reason: format!("range {start}..{} outside {} channels", start + len, s.c),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s.n * len * s.plane());
        for n in 0..s.n {
            let from = (n * s.c + start) * s.plane();
            out.extend_from_slice(&src[from..from + len * s.plane()]);
        }
        let value = Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), out)?;
        Ok(self.push(value, Op::Slice { x: x.0, start }, &[x.0]))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x.0), &[x.0])
    }

    /// Smallest `|input|` over all recorded ReLUs, i.e. how far the current
    /// point is from the nearest ReLU kink. `None` without ReLUs.
    pub fn relu_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x].value.data().iter().map(|v| v.abs()))
            .reduce(|a, b| a.min(b))
    }

    /// Records an operator whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: Box<dyn CustomBackward<T>>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            value,
            Op::Custom {
                inputs: ids.clone(),
                rule,
            },
            &ids,
        )
    }

    /// Reverse-mode accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.len() != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(ls));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
            } else if !matches!(node.op, Op::Leaf) {
                if let Some(g) = grads[id].take() {
                    self.propagate(id, &g, &mut grads)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let needs = |i: usize| self.nodes[i].needs_grad;
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let xt = self.value(Var(*x));
                let wt = self.value(Var(*w));
                let (xs, ws, os) = (xt.shape(), wt.shape(), out.shape());
                let geom = ConvGeom {
                    c: xs.c,
                    h: xs.h,
                    w: xs.w,
                    kh: ws.h,
                    kw: ws.w,
                    oh: os.h,
                    ow: os.w,
                    spec: *spec,
                };
                let want = (needs(*x), needs(*w), b.is_some_and(needs));
                let r = kernels::conv2d_backward(
                    xt.data(),
                    xs,
                    wt.data(),
                    ws.n,
                    gd,
                    &geom,
                    want,
                    self.flip_conv_input_grad,
                );
                if let Some(gx) = r.input {
                    accumulate(grads, *x, Tensor::from_vec(xs, gx)?);
                }
                if let Some(gw) = r.weight {
                    accumulate(grads, *w, Tensor::from_vec(ws, gw)?);
                }
                if let (Some(b), Some(gb)) = (b, r.bias) {
                    let bs = self.shape(Var(*b));
                    accumulate(grads, *b, Tensor::from_vec(bs, gb)?);
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                // Reductions and the centered combination run in f64: the
                // training-mode input gradient is a difference of
                // nearly equal terms.
                let s = out.shape();
                let gamma = self.value(Var(*scale)).data();
                let mut dgamma = vec![0.0f64; s.c];
                let mut dbeta = vec![0.0f64; s.c];
                kernels::for_each_plane(s, |c, r| {
                    for i in r {
                        dgamma[c] += gd[i].as_f64() * xhat[i].as_f64();
                        dbeta[c] += gd[i].as_f64();
                    }
                });
                if needs(*x) {
                    let mut dx = vec![T::zero(); s.len()];
                    if *train {
                        let m = (s.n * s.plane()) as f64;
                        kernels::for_each_plane(s, |c, r| {
                            let k = gamma[c].as_f64() * inv_std[c].as_f64() / m;
                            for i in r {
                                let v = k * (m * gd[i].as_f64() - dbeta[c] - xhat[i].as_f64() * dgamma[c]);
                                dx[i] = T::from_f64_lossy(v);
                            }
                        });
                    } else {
                        kernels::for_each_plane(s, |c, r| {
                            for i in r {
                                dx[i] = gd[i] * gamma[c] * inv_std[c];
                            }
                        });
                    }
                    accumulate(grads, *x, Tensor::from_vec(s, dx)?);
                }
                let dgamma: Vec<T> = dgamma.into_iter().map(T::from_f64_lossy).collect();
                let dbeta: Vec<T> = dbeta.into_iter().map(T::from_f64_lossy).collect();
                if needs(*scale) {
                    let ss = self.shape(Var(*scale));
                    accumulate(grads, *scale, Tensor::from_vec(ss, dgamma)?);
                }
                if needs(*shift) {
                    let ss = self.shape(Var(*shift));
                    accumulate(grads, *shift, Tensor::from_vec(ss, dbeta)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(Var(*x)).data();
                let d = zip_map(gd, xv, |g, v| if v > T::zero() { g } else { T::zero() });
                accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(gd, out.data(), |g, y| g * y * (T::one() - y));
                accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Tanh(x) => {
                let d = zip_map(gd, out.data(), |g, y| g * (T::one() - y * y));
                accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, g.map(|v| v * *f));
            }
            Op::Upsample(x) => {
                let xs = self.shape(Var(*x));
                let os = out.shape();
                let d = kernels::upsample_backward(gd, xs, os.h, os.w);
                accumulate(grads, *x, Tensor::from_vec(xs, d)?);
            }
            Op::Mul { a, b, broadcast } => {
                let (ta, tb) = (self.value(Var(*a)), self.value(Var(*b)));
                self.binary_backward(grads, g, (*a, ta), (*b, tb), *broadcast, true)?;
            }
            Op::Add { a, b, broadcast } => {
                let (ta, tb) = (self.value(Var(*a)), self.value(Var(*b)));
                self.binary_backward(grads, g, (*a, ta), (*b, tb), *broadcast, false)?;
            }
            Op::Concat(parts) => {
                let os = out.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(Var(p));
                    if needs(p) {
                        let mut d = Vec::with_capacity(ps.len());
                        for n in 0..os.n {
                            let from = (n * os.c + offset) * os.plane();
                            d.extend_from_slice(&gd[from..from + ps.c * os.plane()]);
                        }
                        accumulate(grads, p, Tensor::from_vec(ps, d)?);
                    }
                    offset += ps.c;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(Var(*x));
                let os = out.shape();
                let mut d = vec![T::zero(); xs.len()];
                for n in 0..xs.n {
                    let to = (n * xs.c + start) * xs.plane();
                    let from = n * os.c * os.plane();
                    d[to..to + os.c * os.plane()].copy_from_slice(&gd[from..from + os.c * os.plane()]);
                }
                accumulate(grads, *x, Tensor::from_vec(xs, d)?);
            }
            Op::Sum(x) => {
                let xs = self.shape(Var(*x));
                accumulate(grads, *x, Tensor::full(xs, gd[0]));
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let gs = rule.backward(&ins, out, g);
                for (&i, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if needs(i) {
                            if gi.shape() != self.shape(Var(i)) {
                                return Err(mismatch(
                                    "custom backward",
                                    "gradient element count",
                                    self.shape(Var(i)).len(),
                                    gi.len(),
                                ));
                            }
                            accumulate(grads, i, gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn binary_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        (a, ta): (usize, &Tensor<T>),
        (b, tb): (usize, &Tensor<T>),
        broadcast: bool,
        product: bool,
    ) -> Result<()> {
        let s = ta.shape();
        let gd = g.data();
        if self.nodes[a].needs_grad {
            let da = if !product {
                g.clone()
            } else if broadcast {
                let mut d = vec![T::zero(); s.len()];
                kernels::for_each_plane(s, |_, r| {
                    let off = (r.start / (s.c * s.plane())) * s.plane();
                    for (k, i) in r.enumerate() {
                        d[i] = gd[i] * tb.data()[off + k];
                    }
                });
                Tensor::from_vec(s, d)?
            } else {
                Tensor::from_vec(s, zip_map(gd, tb.data(), |x, y| x * y))?
            };
            accumulate(grads, a, da);
        }
        if self.nodes[b].needs_grad {
            let db = if broadcast {
                let mut d = vec![T::zero(); tb.len()];
                kernels::for_each_plane(s, |_, r| {
                    let off = (r.start / (s.c * s.plane())) * s.plane();
                    for (k, i) in r.enumerate() {
                        let term = if product { gd[i] * ta.data()[i] } else { gd[i] };
                        d[off + k] = d[off + k] + term;
                    }
                });
                Tensor::from_vec(tb.shape(), d)?
            } else if product {
                Tensor::from_vec(s, zip_map(gd, ta.data(), |x, y| x * y))?
            } else {
                g.clone()
            };
            accumulate(grads, b, db);
        }
        Ok(())
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Logistic function kept strictly inside `(0, 1)` at every precision.
pub(crate) fn stable_sigmoid<T: Real>(v: T) -> T {
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / (T::one() + T::one());
    y.max(T::min_positive_value()).min(top)
}

/// Gradients of a loss with respect to the leaves that reach it.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn contains(&self, v: Var) -> bool {
        self.get(v).is_some()
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
