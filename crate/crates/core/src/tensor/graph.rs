use super::kernels::{self, axis_split};
use super::Tensor;
use crate::error::{Error, Result};
use crate::fft;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag plus its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// Multiply by a constant.
    Scale(f64),
    /// Batched matrix product over the last two axes.
    MatMul,
    Reshape(Vec<usize>),
    /// `out.shape[i] = in.shape[perm[i]]`.
    Permute(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Pad {
        axis: usize,
        before: usize,
        after: usize,
    },
    /// Index-select along `axis`.
    Gather {
        axis: usize,
        indices: Vec<usize>,
    },
    /// Places input slice `i` at position `indices[i]` of a zero axis of
    /// length `len`; the indexed generalisation of zero padding.
    Scatter {
        axis: usize,
        indices: Vec<usize>,
        len: usize,
    },
    Concat {
        axis: usize,
    },
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    /// Softmax over the last axis.
    Softmax,
    /// `x / sqrt(mean(x²) + eps)` over the last axis.
    RmsNorm {
        eps: f64,
    },
    Silu,
    Sqrt,
    Ln,
    Abs,
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Rotary rotation of `[L, heads, head_dim]` by per-token positions.
    Rope {
        positions: Vec<usize>,
        base: f64,
    },
    /// Real FFT over the trailing `dims` axes; appends a `(re, im)` axis.
    Rfft {
        dims: usize,
    },
    /// Inverse of [`Op::Rfft`] onto the given spatial extents.
    Irfft {
        extents: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "transpose",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Silu => "silu",
            Op::Sqrt => "sqrt",
            Op::Ln => "ln",
            Op::Abs => "abs",
            Op::Clamp { .. } => "clamp",
            Op::Rope { .. } => "rope",
            Op::Rfft { .. } => "rfft",
            Op::Irfft { .. } => "irfft",
        }
    }
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Var>,
    pub value: Tensor,
    /// Per-op auxiliary values kept for the backward pass.
    pub saved: Vec<f64>,
    pub requires_grad: bool,
}

/// Append-only tape of operations. Inputs of a node always precede it, so
/// reverse append order is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    strict: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// In strict mode every op rejects non-finite inputs.
    pub fn strict() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Vec::new(), value, Vec::new(), requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<Var>,
        value: Tensor,
        saved: Vec<f64>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        if self.strict {
            for &v in inputs {
                if !self.nodes[v.0].value.is_finite() {
                    return Err(Error::NonFinite {
                        op: name,
                        location: None,
                    });
                }
            }
        }
        let (value, saved) = self.evaluate(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, saved, requires_grad))
    }

    fn input(&self, inputs: &[Var], i: usize) -> &Tensor {
        &self.nodes[inputs[i].0].value
    }

    fn expect_arity(op: &Op, inputs: &[Var], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::shape(
                op.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    }

    fn evaluate(&self, op: &Op, inputs: &[Var]) -> Result<(Tensor, Vec<f64>)> {
        let none = Vec::new;
        match op {
            Op::Leaf => Err(Error::shape("leaf", "leaves are created with Graph::leaf")),
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                Self::expect_arity(op, inputs, 2)?;
                let (a, b) = (self.input(inputs, 0), self.input(inputs, 1));
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    Op::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                Ok((broadcast_binary(op.name(), a, b, f)?, none()))
            }
            Op::Scale(c) => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                let data = a.data().iter().map(|v| v * c).collect();
                Ok((Tensor::new(data, a.shape().to_vec())?, none()))
            }
            Op::MatMul => {
                Self::expect_arity(op, inputs, 2)?;
                Ok((matmul(self.input(inputs, 0), self.input(inputs, 1))?, none()))
            }
            Op::Reshape(shape) => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                let n: usize = shape.iter().product();
                if n != a.numel() {
                    return Err(Error::shape(
                        "reshape",
                        format!("{:?} -> {shape:?}", a.shape()),
                    ));
                }
                Ok((Tensor::new(a.data().to_vec(), shape.clone())?, none()))
            }
            Op::Permute(perm) => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                let mut sorted = perm.clone();
                sorted.sort_unstable();
                if sorted != (0..a.ndim()).collect::<Vec<_>>() {
                    return Err(Error::shape(
                        "transpose",
                        format!("permutation {perm:?} invalid for {:?}", a.shape()),
                    ));
                }
                let (data, shape) = kernels::permute(a.data(), a.shape(), perm);
                Ok((Tensor::new(data, shape)?, none()))
            }
            Op::Slice { axis, start, end } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                check_axis("slice", a, *axis)?;
                if start > end || *end > a.shape()[*axis] {
                    return Err(Error::shape(
                        "slice",
                        format!("range {start}..{end} on axis {axis} of {:?}", a.shape()),
                    ));
                }
                let idx: Vec<usize> = (*start..*end).collect();
                Ok((gather(a, *axis, &idx), none()))
            }
            Op::Pad {
                axis,
                before,
                after,
            } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                check_axis("pad", a, *axis)?;
                let len = a.shape()[*axis] + before + after;
                let idx: Vec<usize> = (0..a.shape()[*axis]).map(|i| i + before).collect();
                Ok((scatter(a, *axis, &idx, len), none()))
            }
            Op::Gather { axis, indices } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                check_axis("gather", a, *axis)?;
                if let Some(&bad) = indices.iter().find(|&&i| i >= a.shape()[*axis]) {
                    return Err(Error::shape(
                        "gather",
                        format!("index {bad} out of range for axis {axis} of {:?}", a.shape()),
                    ));
                }
                Ok((gather(a, *axis, indices), none()))
            }
            Op::Scatter { axis, indices, len } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                check_axis("scatter", a, *axis)?;
                if indices.len() != a.shape()[*axis] {
                    return Err(Error::shape(
                        "scatter",
                        format!("{} indices for axis of extent {}", indices.len(), a.shape()[*axis]),
                    ));
                }
                let mut seen = vec![false; *len];
                for &i in indices {
                    if i >= *len || seen[i] {
                        return Err(Error::shape(
                            "scatter",
                            format!("index {i} out of range or repeated (len {len})"),
                        ));
                    }
                    seen[i] = true;
                }
                Ok((scatter(a, *axis, indices, *len), none()))
            }
            Op::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(Error::shape("concat", "no inputs"));
                }
                let first = self.input(inputs, 0);
                check_axis("concat", first, *axis)?;
                let mut total = 0;
                for i in 0..inputs.len() {
                    let t = self.input(inputs, i);
                    let ok = t.ndim() == first.ndim()
                        && t
                            .shape()
                            .iter()
                            .zip(first.shape())
                            .enumerate()
                            .all(|(d, (x, y))| d == *axis || x == y);
                    if !ok {
                        return Err(Error::shape(
                            "concat",
                            format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape()),
                        ));
                    }
                    total += t.shape()[*axis];
                }
                let (outer, _, inner) = axis_split(first.shape(), *axis);
                let mut shape = first.shape().to_vec();
                shape[*axis] = total;
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for i in 0..inputs.len() {
                        let t = self.input(inputs, i);
                        let len = t.shape()[*axis] * inner;
                        data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                    }
                }
                Ok((Tensor::new(data, shape)?, none()))
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                let mean = matches!(op, Op::Mean { .. });
                let out = match axis {
                    None => {
                        let s: f64 = a.data().iter().sum();
                        let n = a.numel().max(1) as f64;
                        Tensor::scalar(if mean { s / n } else { s })
                    }
                    Some(ax) => {
                        check_axis(op.name(), a, *ax)?;
                        let (outer, len, inner) = axis_split(a.shape(), *ax);
                        let mut data = vec![0.0; outer * inner];
                        for o in 0..outer {
                            for k in 0..len {
                                let src = &a.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                                let dst = &mut data[o * inner..(o + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        if mean {
                            let s = 1.0 / len.max(1) as f64;
                            data.iter_mut().for_each(|v| *v *= s);
                        }
                        let mut shape = a.shape().to_vec();
                        shape.remove(*ax);
                        Tensor::new(data, shape)?
                    }
                };
                Ok((out, none()))
            }
            Op::Softmax => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                let d = last_dim("softmax", a)?;
                let mut out = a.data().to_vec();
                for row in out.chunks_exact_mut(d) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    let inv = 1.0 / s;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                Ok((Tensor::new(out, a.shape().to_vec())?, none()))
            }
            Op::RmsNorm { eps } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                let d = last_dim("rms_norm", a)?;
                let mut out = a.data().to_vec();
                let mut inv = Vec::with_capacity(a.numel() / d);
                for row in out.chunks_exact_mut(d) {
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let r = 1.0 / (ms + eps).sqrt();
                    row.iter_mut().for_each(|v| *v *= r);
                    inv.push(r);
                }
                Ok((Tensor::new(out, a.shape().to_vec())?, inv))
            }
            Op::Silu | Op::Sqrt | Op::Ln | Op::Abs | Op::Clamp { .. } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                let data = a
                    .data()
                    .iter()
                    .map(|&x| match op {
                        Op::Silu => x / (1.0 + (-x).exp()),
                        Op::Sqrt => x.sqrt(),
                        Op::Ln => x.ln(),
                        Op::Abs => x.abs(),
                        Op::Clamp { lo, hi } => x.clamp(*lo, *hi),
                        _ => unreachable!(),
                    })
                    .collect();
                Ok((Tensor::new(data, a.shape().to_vec())?, none()))
            }
            Op::Rope { positions, base } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                if a.ndim() != 3 || a.shape()[0] != positions.len() {
                    return Err(Error::shape(
                        "rope",
                        format!("expected [L, heads, head_dim] with L = {}, got {:?}", positions.len(), a.shape()),
                    ));
                }
                if a.shape()[2] % 2 != 0 {
                    return Err(Error::shape(
                        "rope",
                        format!("head_dim {} is odd", a.shape()[2]),
                    ));
                }
                let data = rope(a, positions, *base, false);
                Ok((Tensor::new(data, a.shape().to_vec())?, none()))
            }
            Op::Rfft { dims } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                if *dims == 0 || *dims > a.ndim() {
                    return Err(Error::shape("rfft", format!("{dims} axes of {:?}", a.shape())));
                }
                let split = a.ndim() - dims;
                let extents = &a.shape()[split..];
                fft::check_extents(extents).map_err(|e| Error::shape("rfft", e.to_string()))?;
                let batch: usize = a.shape()[..split].iter().product();
                let data = fft::rfft_batch(a.data(), batch, extents);
                let mut shape = a.shape()[..split].to_vec();
                shape.extend(fft::spectral_shape(extents));
                shape.push(2);
                Ok((Tensor::new(data, shape)?, none()))
            }
            Op::Irfft { extents } => {
                Self::expect_arity(op, inputs, 1)?;
                let a = self.input(inputs, 0);
                fft::check_extents(extents).map_err(|e| Error::shape("irfft", e.to_string()))?;
                let spec = fft::spectral_shape(extents);
                let d = extents.len();
                let ok = a.ndim() >= d + 1
                    && a.shape()[a.ndim() - 1] == 2
                    && a.shape()[a.ndim() - 1 - d..a.ndim() - 1] == spec[..];
                if !ok {
                    return Err(Error::shape(
                        "irfft",
                        format!("{:?} inconsistent with extents {extents:?}", a.shape()),
                    ));
                }
                let lead = &a.shape()[..a.ndim() - 1 - d];
                let batch: usize = lead.iter().product();
                let data = fft::irfft_batch(a.data(), batch, extents);
                let mut shape = lead.to_vec();
                shape.extend_from_slice(extents);
                Ok((Tensor::new(data, shape)?, none()))
            }
        }
    }
}

fn check_axis(op: &'static str, a: &Tensor, axis: usize) -> Result<()> {
    if axis >= a.ndim() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", a.shape())));
    }
    Ok(())
}

fn last_dim(op: &'static str, a: &Tensor) -> Result<usize> {
    match a.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::shape(op, format!("needs a non-empty last axis, got {:?}", a.shape()))),
    }
}

pub(crate) fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(data, a.shape().to_vec());
    }
    if is_suffix(b.shape(), a.shape()) {
        let bl = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % bl]))
            .collect();
        return Tensor::new(data, a.shape().to_vec());
    }
    if is_suffix(a.shape(), b.shape()) {
        let al = a.numel();
        let data = b
            .data()
            .iter()
            .enumerate()
            .map(|(i, &y)| f(a.data()[i % al], y))
            .collect();
        return Tensor::new(data, b.shape().to_vec());
    }
    Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
}

/// Batch bookkeeping for `[..., m, k] @ [..., k, n]`.
pub(crate) struct MatmulDims {
    pub batch_a: usize,
    pub batch_b: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", format!("{a:?} @ {b:?}: need >= 2 axes")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    if k != k2 || !is_suffix(bb, ba) {
        return Err(Error::shape("matmul", format!("{a:?} @ {b:?}")));
    }
    let mut out_shape = ba.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims {
        batch_a: ba.iter().product(),
        batch_b: bb.iter().product(),
        m,
        k,
        n,
        out_shape,
    })
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; d.batch_a * d.m * d.n];
    for ia in 0..d.batch_a {
        let ib = ia % d.batch_b;
        kernels::gemm_nn(
            &a.data()[ia * d.m * d.k..(ia + 1) * d.m * d.k],
            &b.data()[ib * d.k * d.n..(ib + 1) * d.k * d.n],
            &mut out[ia * d.m * d.n..(ia + 1) * d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    Tensor::new(out, d.out_shape)
}

pub(crate) fn gather(a: &Tensor, axis: usize, indices: &[usize]) -> Tensor {
    let (outer, len, inner) = axis_split(a.shape(), axis);
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let s = (o * len + i) * inner;
            data.extend_from_slice(&a.data()[s..s + inner]);
        }
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = indices.len();
    Tensor { data, shape }
}

pub(crate) fn scatter(a: &Tensor, axis: usize, indices: &[usize], len: usize) -> Tensor {
    let (outer, alen, inner) = axis_split(a.shape(), axis);
    let mut data = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for (j, &i) in indices.iter().enumerate() {
            let s = (o * alen + j) * inner;
            let d = (o * len + i) * inner;
            data[d..d + inner].copy_from_slice(&a.data()[s..s + inner]);
        }
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    Tensor { data, shape }
}

/// Rotates consecutive pairs `(x₂ₘ, x₂ₘ₊₁)` by `pos · base^(-2m/head_dim)`;
/// `inverse` rotates by the negated angle.
pub(crate) fn rope(a: &Tensor, positions: &[usize], base: f64, inverse: bool) -> Vec<f64> {
    let (l, h, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|m| base.powf(-2.0 * m as f64 / d as f64))
        .collect();
    let mut out = a.data().to_vec();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (t, &pos) in positions.iter().enumerate().take(l) {
        if pos == 0 {
            continue;
        }
        let rot: Vec<(f64, f64)> = freqs
            .iter()
            .map(|f| {
                let (s, c) = (pos as f64 * f).sin_cos();
                (c, sign * s)
            })
            .collect();
        for hh in 0..h {
            let row = &mut out[(t * h + hh) * d..(t * h + hh + 1) * d];
            for (m, &(c, s)) in rot.iter().enumerate() {
                let (x0, x1) = (row[2 * m], row[2 * m + 1]);
                row[2 * m] = x0 * c - x1 * s;
                row[2 * m + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

// Convenience wrappers. Each records exactly one node.
impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(perm.to_vec()), &[a])
    }
    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        self.apply(Op::Pad { axis, before, after }, &[a])
    }
    pub fn gather(&mut self, a: Var, axis: usize, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::Gather { axis, indices }, &[a])
    }
    pub fn scatter(&mut self, a: Var, axis: usize, indices: Vec<usize>, len: usize) -> Result<Var> {
        self.apply(Op::Scatter { axis, indices, len }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum { axis: None }, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Sum { axis: Some(axis) }, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean { axis: None }, &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis: Some(axis) }, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.apply(Op::RmsNorm { eps }, &[a])
    }
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Silu, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Ln, &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Abs, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }
    pub fn rope(&mut self, a: Var, positions: Vec<usize>, base: f64) -> Result<Var> {
        self.apply(Op::Rope { positions, base }, &[a])
    }
    pub fn rfft(&mut self, a: Var, dims: usize) -> Result<Var> {
        self.apply(Op::Rfft { dims }, &[a])
    }
    pub fn irfft(&mut self, a: Var, extents: &[usize]) -> Result<Var> {
        self.apply(Op::Irfft { extents: extents.to_vec() }, &[a])
    }
}
