//! Reverse-mode recording of tensor primitives.
//!
//! Every value lives in a node of the [`Tape`]. Leaves are created with
//! [`Tape::leaf`]; every primitive applied to a node that (transitively)
//! depends on a `requires_grad` leaf appends an entry holding the op and its
//! input ids. Nodes are only ever appended, so the tape is topologically
//! ordered by construction and [`Tape::backward`] walks it in reverse.

use super::conv::{self, ConvGeom};
use super::tensor::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How [`Tape::channel_scale`] combines a tensor with a per-channel vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    /// `y = x * s`
    Mul,
    /// `y = x * s`; channels with `s == 0` are discarded: zero output, zero gradient.
    MulMasked,
    /// `y = x / s` where `s > 0`, else zero output and zero gradient.
    DivMasked,
}

#[derive(Clone, Debug)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    Neg,
    MatMul,
    Dense { bias: bool },
    Conv2d { geom: ConvGeom, out: usize, bias: bool },
    ConvTranspose2d { geom: ConvGeom, out: usize, bias: bool },
    Relu,
    GlobalAvgPool,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    Upsample2x,
    AvgPool2x,
    RoundSte,
    Reshape,
    ConcatChannels { sizes: Vec<usize> },
    SliceChannels { start: usize },
    Sum,
    Mean,
    Abs,
    MaxConst(f64),
    Clamp(f64, f64),
    Square,
    ChannelScale(ScaleMode),
    SpaceToDepth(usize),
    DepthToSpace(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Neg => "neg",
            Op::MatMul => "matmul",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Relu => "relu",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Upsample2x => "upsample2x",
            Op::AvgPool2x => "avg_pool2x",
            Op::RoundSte => "round_ste",
            Op::Reshape => "reshape",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Abs => "abs",
            Op::MaxConst(_) => "max_const",
            Op::Clamp(..) => "clamp",
            Op::Square => "square",
            Op::ChannelScale(_) => "channel_scale",
            Op::SpaceToDepth(_) => "space_to_depth",
            Op::DepthToSpace(_) => "depth_to_space",
        }
    }
}

struct Entry {
    op: Op,
    inputs: Vec<Var>,
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    entry: Option<Entry>,
}

/// A recorded primitive application, as exposed by [`Tape::entries`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapeEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rank_err<T>(op: &'static str, want: &str, got: &[usize]) -> Result<T> {
    shape_err(op, format!("expected {want}, got shape {got:?}"))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half away from zero.
    v.round()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => rank_err(op, "[N, C, H, W]", t.shape()),
    }
}

fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    // Sample-center alignment: output o sits at input coordinate (o + 0.5) / 2 - 0.5.
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let clampi = |i: f64| (i.max(0.0) as usize).min(n_in - 1);
            (clampi(i0), clampi(i0 + 1.0), frac)
        })
        .collect()
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

    /// Places a tensor on the tape; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            needs_grad,
            entry: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Recorded primitive applications in recording order.
    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.entry.as_ref().map(|e| TapeEntry {
                    op: e.op.name(),
                    inputs: e.inputs.iter().map(|v| v.0).collect(),
                    output: i,
                })
            })
            .collect()
    }

    fn record(&mut self, op: Op, inputs: &[Var], value: Tensor) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let entry = needs_grad.then(|| Entry {
            op,
            inputs: inputs.to_vec(),
        });
        self.nodes.push(Node {
            value,
            needs_grad,
            entry,
        });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.v(a), self.v(b))?;
        let out = zip_map(self.v(a), self.v(b), |x, y| x + y);
        Ok(self.record(Op::Add, &[a, b], out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.v(a), self.v(b))?;
        let out = zip_map(self.v(a), self.v(b), |x, y| x - y);
        Ok(self.record(Op::Sub, &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.v(a), self.v(b))?;
        let out = zip_map(self.v(a), self.v(b), |x, y| x * y);
        Ok(self.record(Op::Mul, &[a, b], out))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.v(a), self.v(b))?;
        let out = zip_map(self.v(a), self.v(b), |x, y| x / y);
        Ok(self.record(Op::Div, &[a, b], out))
    }

    /// `a + s` where `s` is a single-element tensor broadcast over `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.v(s).len() != 1 {
            return shape_err("add_scalar", format!("scalar operand has shape {:?}", self.shape(s)));
        }
        let sv = self.v(s).item();
        let out = map(self.v(a), |x| x + sv);
        Ok(self.record(Op::AddScalar, &[a, s], out))
    }

    /// Adds a constant; no gradient flows into the constant.
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(c));
        self.add_scalar(a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.v(a), |x| x * c);
        self.record(Op::MulScalar(c), &[a], out)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = map(self.v(a), |x| -x);
        self.record(Op::Neg, &[a], out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.v(a), |x| x.max(0.0));
        self.record(Op::Relu, &[a], out)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = map(self.v(a), f64::abs);
        self.record(Op::Abs, &[a], out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = map(self.v(a), |x| x * x);
        self.record(Op::Square, &[a], out)
    }

    /// `max(a, c)`; gradient passes only where `a > c`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.v(a), |x| x.max(c));
        self.record(Op::MaxConst(c), &[a], out)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = map(self.v(a), |x| x.clamp(lo, hi));
        self.record(Op::Clamp(lo, hi), &[a], out)
    }

    /// Forward rounds half away from zero; backward is the identity.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let out = map(self.v(a), round_half_away);
        self.record(Op::RoundSte, &[a], out)
    }

    // ---- reductions / reshapes ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.v(a).data().iter().sum();
        self.record(Op::Sum, &[a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.v(a);
        if t.is_empty() {
            return shape_err("mean", "empty tensor");
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.record(Op::Mean, &[a], Tensor::scalar(m)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.v(a).clone().with_grad(false).reshaped(shape.to_vec())?;
        Ok(self.record(Op::Reshape, &[a], out))
    }

    /// Concatenates `[N, C_i, ...]` tensors along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| {
            Error::InvalidArgument("concat_channels needs at least one input".into())
        })?);
        if first.len() < 2 {
            return rank_err("concat_channels", "rank >= 2", first);
        }
        let n = first[0];
        let rest: Vec<usize> = first[2..].to_vec();
        let inner = numel(&rest);
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != rest[..] {
                return shape_err(
                    "concat_channels",
                    format!("{:?} incompatible with {:?}", s, first),
                );
            }
            sizes.push(s[1]);
        }
        let total: usize = sizes.iter().sum();
        let mut data = vec![0.0; n * total * inner];
        let mut off = 0;
        for (&p, &c) in parts.iter().zip(&sizes) {
            let src = self.v(p).data();
            for i in 0..n {
                data[(i * total + off) * inner..(i * total + off + c) * inner]
                    .copy_from_slice(&src[i * c * inner..(i + 1) * c * inner]);
            }
            off += c;
        }
        let mut shape = vec![n, total];
        shape.extend_from_slice(&rest);
        Ok(self.record(Op::ConcatChannels { sizes }, parts, Tensor::from_parts(shape, data)))
    }

    /// Channels `[start, start + len)` of a `[N, C, ...]` tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return shape_err(
                "slice_channels",
                format!("channels {start}..{} out of range for {:?}", start + len, s),
            );
        }
        let (n, c) = (s[0], s[1]);
        let inner = numel(&s[2..]);
        let src = self.v(a).data();
        let mut data = Vec::with_capacity(n * len * inner);
        for i in 0..n {
            data.extend_from_slice(&src[(i * c + start) * inner..(i * c + start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        Ok(self.record(Op::SliceChannels { start }, &[a], Tensor::from_parts(shape, data)))
    }

    /// Scales each channel of `x` (`[N, C, ...]`) by `s[c]` (`[C]`).
    pub fn channel_scale(&mut self, x: Var, s: Var, mode: ScaleMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() < 2 || ss.len() != 1 || ss[0] != xs[1] {
            return shape_err("channel_scale", format!("x {:?} with scale {:?}", xs, ss));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner = numel(&xs[2..]);
        let sv = self.v(s).data();
        let xv = self.v(x).data();
        let mut data = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let k = sv[ch];
                let base = (i * c + ch) * inner;
                let f = |v: f64| match mode {
                    ScaleMode::Mul => v * k,
                    ScaleMode::MulMasked => {
                        if k == 0.0 {
                            0.0
                        } else {
                            v * k
                        }
                    }
                    ScaleMode::DivMasked => {
                        if k > 0.0 {
                            v / k
                        } else {
                            0.0
                        }
                    }
                };
                for j in 0..inner {
                    data[base + j] = f(xv[base + j]);
                }
            }
        }
        Ok(self.record(Op::ChannelScale(mode), &[x, s], Tensor::from_parts(xs, data)))
    }

    /// `[N, C, H, W] -> [N, C*b*b, H/b, W/b]`; channel `c*b*b + dy*b + dx` holds
    /// the sample at offset `(dy, dx)` inside each `b × b` tile.
    pub fn space_to_depth(&mut self, a: Var, b: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("space_to_depth", self.v(a))?;
        if b == 0 || h % b != 0 || w % b != 0 {
            return shape_err("space_to_depth", format!("{h}x{w} not divisible by {b}"));
        }
        let (bh, bw) = (h / b, w / b);
        let src = self.v(a).data();
        let mut data = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let oc = ch * b * b + (y % b) * b + x % b;
                        let dst = ((i * c * b * b + oc) * bh + y / b) * bw + x / b;
                        data[dst] = src[((i * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
        Ok(self.record(Op::SpaceToDepth(b), &[a], Tensor::from_parts(vec![n, c * b * b, bh, bw], data)))
    }

    /// Inverse of [`Tape::space_to_depth`].
    pub fn depth_to_space(&mut self, a: Var, b: usize) -> Result<Var> {
        let (n, cc, bh, bw) = dims4("depth_to_space", self.v(a))?;
        if b == 0 || cc % (b * b) != 0 {
            return shape_err("depth_to_space", format!("{cc} channels not divisible by {}", b * b));
        }
        let c = cc / (b * b);
        let (h, w) = (bh * b, bw * b);
        let src = self.v(a).data();
        let mut data = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let ic = ch * b * b + (y % b) * b + x % b;
                        data[((i * c + ch) * h + y) * w + x] = src[((i * cc + ic) * bh + y / b) * bw + x / b];
                    }
                }
            }
        }
        Ok(self.record(Op::DepthToSpace(b), &[a], Tensor::from_parts(vec![n, c, h, w], data)))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return shape_err("matmul", format!("{sa:?} x {sb:?}")),
        };
        let mut out = vec![0.0; m * n];
        conv::gemm(m, k, n, self.v(a).data(), false, self.v(b).data(), false, &mut out, 0.0);
        Ok(self.record(Op::MatMul, &[a, b], Tensor::from_parts(vec![m, n], out)))
    }

    /// Affine map `x · Wᵀ + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, inp, out) = match (&sx[..], &sw[..]) {
            ([n, i], [o, i2]) if i == i2 => (*n, *i, *o),
            _ => return shape_err("dense", format!("input {sx:?} with weight {sw:?}")),
        };
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return shape_err("dense", format!("bias {:?}, expected [{out}]", self.shape(b)));
            }
        }
        let mut y = vec![0.0; n * out];
        conv::gemm(n, inp, out, self.v(x).data(), false, self.v(w).data(), true, &mut y, 0.0);
        if let Some(b) = b {
            let bv = self.v(b).data();
            for row in y.chunks_mut(out.max(1)) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(Op::Dense { bias: b.is_some() }, &inputs, Tensor::from_parts(vec![n, out], y)))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4("conv2d", self.v(x))?;
        let (o, c2, kh, kw) = dims4("conv2d", self.v(w))?;
        if c != c2 || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}, stride {stride}, pad {pad}", self.shape(x), self.shape(w)),
            );
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err("conv2d", format!("bias {:?}, expected [{o}]", self.shape(b)));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, ho, wo };
        let out = conv::conv_forward(self.v(x).data(), n, &geom, self.v(w).data(), o, b.map(|b| self.v(b).data()));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(
            Op::Conv2d { geom, out: o, bias: b.is_some() },
            &inputs,
            Tensor::from_parts(vec![n, o, ho, wo], out),
        ))
    }

    /// Transposed convolution, adjoint of [`Tape::conv2d`] with the same weight.
    ///
    /// `x: [N, O, H, W]`, `w: [O, C, k, k]`, `b: [C]`; output spatial size is
    /// `(H - 1)·stride - 2·pad + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (n, o, h, wd) = dims4("conv_transpose2d", self.v(x))?;
        let (o2, c, kh, kw) = dims4("conv_transpose2d", self.v(w))?;
        let bad = o != o2
            || stride == 0
            || output_padding >= stride
            || h == 0
            || wd == 0
            || (h - 1) * stride + kh + output_padding < 2 * pad + 1
            || (wd - 1) * stride + kw + output_padding < 2 * pad + 1;
        if bad {
            return shape_err(
                "conv_transpose2d",
                format!("input {:?}, weight {:?}, stride {stride}, pad {pad}", self.shape(x), self.shape(w)),
            );
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return shape_err("conv_transpose2d", format!("bias {:?}, expected [{c}]", self.shape(b)));
            }
        }
        let oh = (h - 1) * stride + kh + output_padding - 2 * pad;
        let ow = (wd - 1) * stride + kw + output_padding - 2 * pad;
        let geom = ConvGeom { c, h: oh, w: ow, kh, kw, stride, pad, ho: h, wo: wd };
        let out = conv::conv_transpose_forward(
            self.v(x).data(),
            n,
            &geom,
            self.v(w).data(),
            o,
            b.map(|b| self.v(b).data()),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(
            Op::ConvTranspose2d { geom, out: o, bias: b.is_some() },
            &inputs,
            Tensor::from_parts(vec![n, c, oh, ow], out),
        ))
    }

    // ---- pooling / resampling ----

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.v(x))?;
        let hw = h * w;
        if hw == 0 {
            return shape_err("global_avg_pool", "empty spatial extent");
        }
        let data = self.v(x).data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        Ok(self.record(Op::GlobalAvgPool, &[x], Tensor::from_parts(vec![n, c], data)))
    }

    /// Mean over non-overlapping 2×2 windows.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("avg_pool2x", self.v(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("avg_pool2x", format!("odd dimensions {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.v(x).data();
        let mut data = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    d[y * ow + x] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
                }
            }
        }
        Ok(self.record(Op::AvgPool2x, &[x], Tensor::from_parts(vec![n, c, oh, ow], data)))
    }

    /// Bilinear 2× upsampling with sample-center alignment and edge replication.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("upsample2x", self.v(x))?;
        if h == 0 || w == 0 {
            return shape_err("upsample2x", "empty spatial extent");
        }
        let data = upsample2x_values(self.v(x).data(), n * c, h, w);
        Ok(self.record(Op::Upsample2x, &[x], Tensor::from_parts(vec![n, c, 2 * h, 2 * w], data)))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            _ => return rank_err("softmax_cross_entropy", "[N, K]", self.shape(logits)),
        };
        if labels.len() != n {
            return shape_err("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.v(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * k + j] = e;
                s += e;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= s);
            loss += m + s.ln() - row[labels[i]];
        }
        let loss = if n == 0 { 0.0 } else { loss / n as f64 };
        Ok(self.record(
            Op::SoftmaxCrossEntropy { labels: labels.to_vec(), probs },
            &[logits],
            Tensor::scalar(loss),
        ))
    }

    // ---- backward ----

    /// Propagates gradients from a scalar `loss` to every differentiable node.
    ///
    /// The tape is not modified, so calling this twice yields identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.v(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(entry) = &self.nodes[idx].entry else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.backward_entry(entry, &self.nodes[idx].value, &g)?;
            // Keep the node's own gradient around for inspection.
            grads[idx] = Some(g);
            for (input, contribution) in entry.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_entry(&self, e: &Entry, out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let inp = |i: usize| self.v(e.inputs[i]);
        let want = |i: usize| self.nodes[e.inputs[i].0].needs_grad;
        let shape_of = |i: usize| inp(i).shape().to_vec();
        let res = match &e.op {
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(map(g, |v| -v))],
            Op::Mul => vec![
                want(0).then(|| zip_map(g, inp(1), |g, b| g * b)),
                want(1).then(|| zip_map(g, inp(0), |g, a| g * a)),
            ],
            Op::Div => vec![
                want(0).then(|| zip_map(g, inp(1), |g, b| g / b)),
                want(1).then(|| {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(inp(0).data())
                        .zip(inp(1).data())
                        .map(|((g, a), b)| -g * a / (b * b))
                        .collect();
                    Tensor::from_parts(shape_of(1), d)
                }),
            ],
            Op::AddScalar => vec![
                Some(g.clone()),
                Some(Tensor::from_parts(shape_of(1), vec![g.data().iter().sum()])),
            ],
            Op::MulScalar(c) => vec![Some(map(g, |v| v * c))],
            Op::Neg => vec![Some(map(g, |v| -v))],
            Op::Relu => vec![Some(zip_map(g, inp(0), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Abs => vec![Some(zip_map(g, inp(0), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }))],
            Op::Square => vec![Some(zip_map(g, inp(0), |g, x| 2.0 * x * g))],
            Op::MaxConst(c) => vec![Some(zip_map(g, inp(0), |g, x| if x > *c { g } else { 0.0 }))],
            Op::Clamp(lo, hi) => vec![Some(zip_map(g, inp(0), |g, x| {
                if x > *lo && x < *hi {
                    g
                } else {
                    0.0
                }
            }))],
            Op::RoundSte => vec![Some(g.clone())],
            Op::Sum => vec![Some(Tensor::full(shape_of(0), g.item()))],
            Op::Mean => {
                let n = inp(0).len() as f64;
                vec![Some(Tensor::full(shape_of(0), g.item() / n))]
            }
            Op::Reshape => vec![Some(g.clone().reshaped(shape_of(0))?)],
            Op::ConcatChannels { sizes } => {
                let s = g.shape();
                let (n, total) = (s[0], s[1]);
                let inner = numel(&s[2..]);
                let mut off = 0;
                let mut outs = Vec::with_capacity(sizes.len());
                for (i, &c) in sizes.iter().enumerate() {
                    if want(i) {
                        let mut d = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            d.extend_from_slice(&g.data()[(b * total + off) * inner..(b * total + off + c) * inner]);
                        }
                        outs.push(Some(Tensor::from_parts(shape_of(i), d)));
                    } else {
                        outs.push(None);
                    }
                    off += c;
                }
                outs
            }
            Op::SliceChannels { start } => {
                let src = shape_of(0);
                let (n, c) = (src[0], src[1]);
                let inner = numel(&src[2..]);
                let len = g.shape()[1];
                let mut d = vec![0.0; numel(&src)];
                for b in 0..n {
                    d[(b * c + start) * inner..(b * c + start + len) * inner]
                        .copy_from_slice(&g.data()[b * len * inner..(b + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(src, d))]
            }
            Op::ChannelScale(mode) => {
                let xs = shape_of(0);
                let (n, c) = (xs[0], xs[1]);
                let inner = numel(&xs[2..]);
                let (xv, sv, gv) = (inp(0).data(), inp(1).data(), g.data());
                let mut dx = want(0).then(|| vec![0.0; xv.len()]);
                let mut ds = want(1).then(|| vec![0.0; c]);
                for b in 0..n {
                    for ch in 0..c {
                        let k = sv[ch];
                        let active = match mode {
                            ScaleMode::Mul => true,
                            ScaleMode::MulMasked => k != 0.0,
                            ScaleMode::DivMasked => k > 0.0,
                        };
                        if !active {
                            continue;
                        }
                        let base = (b * c + ch) * inner;
                        let gs = &gv[base..base + inner];
                        let xsl = &xv[base..base + inner];
                        match mode {
                            ScaleMode::Mul | ScaleMode::MulMasked => {
                                if let Some(dx) = dx.as_mut() {
                                    dx[base..base + inner].iter_mut().zip(gs).for_each(|(d, g)| *d = g * k);
                                }
                                if let Some(ds) = ds.as_mut() {
                                    ds[ch] += gs.iter().zip(xsl).map(|(g, x)| g * x).sum::<f64>();
                                }
                            }
                            ScaleMode::DivMasked => {
                                if let Some(dx) = dx.as_mut() {
                                    dx[base..base + inner].iter_mut().zip(gs).for_each(|(d, g)| *d = g / k);
                                }
                                if let Some(ds) = ds.as_mut() {
                                    ds[ch] -= gs.iter().zip(xsl).map(|(g, x)| g * x).sum::<f64>() / (k * k);
                                }
                            }
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_parts(xs.clone(), d)),
                    ds.map(|d| Tensor::from_parts(vec![c], d)),
                ]
            }
            Op::SpaceToDepth(b) => {
                let mut t = Tape::new();
                let gv = t.constant(g.clone());
                let r = t.depth_to_space(gv, *b)?;
                vec![Some(t.value(r).clone())]
            }
            Op::DepthToSpace(b) => {
                let mut t = Tape::new();
                let gv = t.constant(g.clone());
                let r = t.space_to_depth(gv, *b)?;
                vec![Some(t.value(r).clone())]
            }
            Op::MatMul => {
                let (sa, sb) = (shape_of(0), shape_of(1));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = want(0).then(|| {
                    let mut d = vec![0.0; m * k];
                    conv::gemm(m, n, k, g.data(), false, inp(1).data(), true, &mut d, 0.0);
                    Tensor::from_parts(sa.clone(), d)
                });
                let db = want(1).then(|| {
                    let mut d = vec![0.0; k * n];
                    conv::gemm(k, m, n, inp(0).data(), true, g.data(), false, &mut d, 0.0);
                    Tensor::from_parts(sb.clone(), d)
                });
                vec![da, db]
            }
            Op::Dense { bias } => {
                let (sx, sw) = (shape_of(0), shape_of(1));
                let (n, i, o) = (sx[0], sx[1], sw[0]);
                let dx = want(0).then(|| {
                    let mut d = vec![0.0; n * i];
                    conv::gemm(n, o, i, g.data(), false, inp(1).data(), false, &mut d, 0.0);
                    Tensor::from_parts(sx.clone(), d)
                });
                let dw = want(1).then(|| {
                    let mut d = vec![0.0; o * i];
                    conv::gemm(o, n, i, g.data(), true, inp(0).data(), false, &mut d, 0.0);
                    Tensor::from_parts(sw.clone(), d)
                });
                let mut v = vec![dx, dw];
                if *bias {
                    v.push(want(2).then(|| {
                        let mut d = vec![0.0; o];
                        for row in g.data().chunks(o.max(1)) {
                            d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        Tensor::from_parts(vec![o], d)
                    }));
                }
                v
            }
            Op::Conv2d { geom, out: o, bias } => {
                let n = inp(0).shape()[0];
                let (dx, dw) = conv::conv_backward(
                    inp(0).data(),
                    n,
                    geom,
                    inp(1).data(),
                    *o,
                    g.data(),
                    want(0),
                    want(1),
                );
                let mut v = vec![
                    dx.map(|d| Tensor::from_parts(shape_of(0), d)),
                    dw.map(|d| Tensor::from_parts(shape_of(1), d)),
                ];
                if *bias {
                    v.push(want(2).then(|| channel_sums(g.data(), n, *o, geom.out_hw())));
                }
                v
            }
            Op::ConvTranspose2d { geom, out: o, bias } => {
                let n = inp(0).shape()[0];
                let (dx, dw) = conv::conv_transpose_backward(
                    inp(0).data(),
                    n,
                    geom,
                    inp(1).data(),
                    *o,
                    g.data(),
                    want(0),
                    want(1),
                );
                let mut v = vec![
                    dx.map(|d| Tensor::from_parts(shape_of(0), d)),
                    dw.map(|d| Tensor::from_parts(shape_of(1), d)),
                ];
                if *bias {
                    v.push(want(2).then(|| channel_sums(g.data(), n, geom.c, geom.h * geom.w)));
                }
                v
            }
            Op::GlobalAvgPool => {
                let s = shape_of(0);
                let hw = s[2] * s[3];
                let mut d = Vec::with_capacity(numel(&s));
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv / hw as f64).take(hw));
                }
                vec![Some(Tensor::from_parts(s, d))]
            }
            Op::AvgPool2x => {
                let s = shape_of(0);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; numel(&s)];
                for p in 0..s[0] * s[1] {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            let v = 0.25 * gp[y * ow + x];
                            let i = 2 * y * w + 2 * x;
                            dp[i] = v;
                            dp[i + 1] = v;
                            dp[i + w] = v;
                            dp[i + w + 1] = v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(s, d))]
            }
            Op::Upsample2x => {
                let s = shape_of(0);
                let d = upsample2x_adjoint(g.data(), s[0] * s[1], s[2], s[3]);
                vec![Some(Tensor::from_parts(s, d))]
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let s = shape_of(0);
                let (n, k) = (s[0], s[1]);
                let scale = if n == 0 { 0.0 } else { g.item() / n as f64 };
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::from_parts(s, d))]
            }
        };
        let _ = out;
        Ok(res)
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, hw: usize) -> Tensor {
    let mut d = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in d.iter_mut().enumerate() {
            *acc += g[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(vec![c], d)
}

/// Bilinear 2× upsampling of `planes` stacked `h × w` planes.
pub(crate) fn upsample2x_values(src: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, 2 * h);
    let tx = bilinear_taps(w, 2 * w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                d[y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn upsample2x_adjoint(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, 2 * h);
    let tx = bilinear_taps(w, 2 * w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut out[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = gp[y * ow + x];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_and_relu() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[2.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).item(), 6.0);
        let r = tape.constant(t(&[1], &[-1.5]));
        let r = tape.relu(r);
        assert_eq!(tape.value(r).item(), 0.0);
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![2, 2, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.starts_with("conv2d"), "{err}");
    }

    #[test]
    fn round_ste_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.49, 0.5, -0.5]));
        let r = tape.round_ste(x);
        assert_eq!(tape.value(r).data(), &[0.0, 1.0, -1.0]);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.7));
        let r = tape.round_ste(x);
        let y = tape.mul_scalar(r, 10.0);
        assert_eq!(tape.value(y).item(), 30.0);
        assert_eq!(tape.backward(y).unwrap().get(x).item(), 10.0);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.square(x);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.param(Tensor::scalar(5.0));
        let l = tape.mul_scalar(c, 1.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn upsample_slice_matches_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[0.0, 2.0]));
        let y = tape.upsample2x(x).unwrap();
        let row = &tape.value(y).data()[..4];
        assert_eq!(row, &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn entries_are_topological() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -2.0]));
        let a = tape.abs(x);
        let b = tape.square(a);
        let s = tape.sum(b);
        let _ = s;
        let e = tape.entries();
        assert_eq!(e.len(), 3);
        for entry in &e {
            assert!(entry.inputs.iter().all(|&i| i < entry.output));
        }
        assert_eq!(e.iter().map(|e| e.op).collect::<Vec<_>>(), ["abs", "square", "sum"]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1.0]));
        let b = tape.relu(a);
        let _ = b;
        assert!(tape.entries().is_empty());
    }

    #[test]
    fn space_to_depth_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 16 * 8).map(|v| v as f64).collect();
        let x = tape.constant(t(&[1, 2, 16, 8], &data));
        let s = tape.space_to_depth(x, 8).unwrap();
        assert_eq!(tape.shape(s), &[1, 128, 2, 1]);
        // channel 9 = (row 1, col 1) of each block; block (1, 0) of plane 0
        assert_eq!(tape.value(s).data()[9 * 2 + 1], data[9 * 8 + 1]);
        let back = tape.depth_to_space(s, 8).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }
}
