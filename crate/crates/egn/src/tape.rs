//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in execution order; since every node's parents
//! precede it, the creation order is a topological order and the backward
//! pass is a single reverse sweep. The tape is consumed by `backward`, so a
//! tape owns exactly one forward/backward episode.

use crate::error::{EgnError, Result};
use crate::tensor::{stable_sum, Tensor};

pub type VarId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    RhsSuffix,
    LhsSuffix,
    RhsScalar,
    LhsScalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Div(Bcast),
    Matmul,
    Transpose,
    Neg,
    Scale(f64),
    AddScalar,
    Relu,
    Sigmoid,
    Softplus,
    Log,
    Exp,
    Sqrt,
    Abs,
    SumAll,
    MeanAll,
    SumAxis(usize),
    MeanAxis(usize),
    MaxAxis(usize),
    SoftmaxLast,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape,
    BroadcastRows(usize),
    ExpandCols(usize),
    LayerNormRow { eps: f64 },
    Im2Patches { patch: usize },
    Conv2d { stride: usize, pad: usize },
    Upsample2x,
    ChannelAffine,
}

struct Node {
    op: Op,
    parents: Vec<VarId>,
    requires: bool,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward sweep. Indexed by the VarIds
/// of the tape that produced it (the tape itself is consumed).
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id]
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id].requires
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> VarId {
        self.push(t, Op::Leaf, vec![], requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.leaf(t, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<VarId>, requires: bool) -> VarId {
        let id = self.values.len();
        self.values.push(value);
        self.nodes.push(Node { op, parents, requires });
        id
    }

    fn push_from(&mut self, value: Tensor, op: Op, parents: Vec<VarId>) -> VarId {
        let requires = parents.iter().any(|&p| self.nodes[p].requires);
        self.push(value, op, parents, requires)
    }

    // ── binary elementwise with trailing-axis broadcasting ──

    fn bcast_kind(&self, op: &str, a: VarId, b: VarId) -> Result<Bcast> {
        let sa = self.values[a].shape();
        let sb = self.values[b].shape();
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if self.values[b].numel() == 1 {
            return Ok(Bcast::RhsScalar);
        }
        if self.values[a].numel() == 1 {
            return Ok(Bcast::LhsScalar);
        }
        if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == *sb {
            return Ok(Bcast::RhsSuffix);
        }
        if sa.len() < sb.len() && sb[sb.len() - sa.len()..] == *sa {
            return Ok(Bcast::LhsSuffix);
        }
        Err(EgnError::shape(op, format!("shapes {:?} and {:?} are not broadcastable", sa, sb)))
    }

    fn binary(&mut self, name: &str, a: VarId, b: VarId, f: fn(f64, f64) -> f64, op: fn(Bcast) -> Op) -> Result<VarId> {
        let kind = self.bcast_kind(name, a, b)?;
        let (va, vb) = (&self.values[a], &self.values[b]);
        let (big, small, rhs_small) = match kind {
            Bcast::Same | Bcast::RhsSuffix | Bcast::RhsScalar => (va, vb, true),
            Bcast::LhsSuffix | Bcast::LhsScalar => (vb, va, false),
        };
        let n_small = small.numel();
        let out: Vec<f64> = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = small.data()[i % n_small];
                if rhs_small {
                    f(x, y)
                } else {
                    f(y, x)
                }
            })
            .collect();
        let shape = big.shape().to_vec();
        Ok(self.push_from(Tensor::new(shape, out)?, op(kind), vec![a, b]))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ── unary elementwise ──

    fn unary(&mut self, a: VarId, f: impl Fn(f64) -> f64, op: Op) -> VarId {
        let v = &self.values[a];
        let out: Vec<f64> = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("unary preserves shape");
        self.push_from(t, op, vec![a])
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        self.unary(a, |x| c * x, Op::Scale(c))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary(a, f64::abs, Op::Abs)
    }

    // ── matmul / transpose ──

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.values[a], &self.values[b]);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(EgnError::shape(
                "matmul",
                format!("incompatible shapes {:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[1];
        let t = Tensor::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n))?;
        Ok(self.push_from(t, Op::Matmul, vec![a, b]))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let v = &self.values[a];
        if v.rank() != 2 {
            return Err(EgnError::shape("transpose", format!("expected rank 2, got {:?}", v.shape())));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let t = Tensor::new(vec![n, m], transpose_raw(v.data(), m, n))?;
        Ok(self.push_from(t, Op::Transpose, vec![a]))
    }

    // ── reductions ──

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.values[a].data().iter().sum();
        self.push_from(Tensor::scalar(s), Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.values[a].numel() as f64;
        let s: f64 = self.values[a].data().iter().sum();
        self.push_from(Tensor::scalar(s / n), Op::MeanAll, vec![a])
    }

    fn axis_reduce(&mut self, name: &str, a: VarId, axis: usize, mean: bool, max: bool) -> Result<VarId> {
        let v = &self.values[a];
        if axis >= v.rank() {
            return Err(EgnError::shape(
                name,
                format!("axis {} out of range for shape {:?}", axis, v.shape()),
            ));
        }
        let shape = v.shape();
        let outer: usize = shape[..axis].iter().product();
        let red = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = vec![0.0; outer * inner];
        let data = v.data();
        let mut buf = vec![0.0; red];
        for o in 0..outer {
            for i in 0..inner {
                for (r, slot) in buf.iter_mut().enumerate() {
                    *slot = data[(o * red + r) * inner + i];
                }
                out[o * inner + i] = if max {
                    buf.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    // Total-order summation keeps reductions invariant to
                    // permutations along the reduced axis (exemplar order).
                    let s = stable_sum(&mut buf);
                    if mean {
                        s / red as f64
                    } else {
                        s
                    }
                };
            }
        }
        let op = if max {
            Op::MaxAxis(axis)
        } else if mean {
            Op::MeanAxis(axis)
        } else {
            Op::SumAxis(axis)
        };
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push_from(t, op, vec![a]))
    }

    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.axis_reduce("sum_axis", a, axis, false, false)
    }

    pub fn mean_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.axis_reduce("mean_axis", a, axis, true, false)
    }

    pub fn max_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        self.axis_reduce("max_axis", a, axis, false, true)
    }

    /// Softmax along the last axis (rows).
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let v = &self.values[a];
        let cols = *v.shape().last().expect("non-empty shape");
        let rows = v.numel() / cols;
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                out[r * cols + j] = e;
                z += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= z;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("softmax preserves shape");
        self.push_from(t, Op::SoftmaxLast, vec![a])
    }

    // ── shape ops ──

    pub fn concat(&mut self, axis: usize, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(EgnError::shape("concat", "no inputs"));
        }
        let base = self.values[parts[0]].shape().to_vec();
        if axis >= base.len() {
            return Err(EgnError::shape("concat", format!("axis {} out of range for {:?}", axis, base)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.values[p].shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(EgnError::shape(
                    "concat",
                    format!("shape {:?} incompatible with {:?} along axis {}", s, base, axis),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let v = &self.values[p];
            let len = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * total + offset) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push_from(t, Op::Concat { axis }, parts.to_vec()))
    }

    pub fn slice(&mut self, a: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let v = &self.values[a];
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(EgnError::shape(
                "slice",
                format!("range {}..{} on axis {} of shape {:?}", start, start + len, axis, v.shape()),
            ));
        }
        let shape = v.shape();
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&v.data()[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push_from(t, Op::Slice { axis, start, len }, vec![a]))
    }

    /// Equal split along `axis` into two halves.
    pub fn chunk(&mut self, a: VarId, axis: usize) -> Result<(VarId, VarId)> {
        let v = &self.values[a];
        if axis >= v.rank() {
            return Err(EgnError::shape("chunk", format!("axis {} out of range for {:?}", axis, v.shape())));
        }
        let n = v.shape()[axis];
        if n % 2 != 0 {
            return Err(EgnError::shape("chunk", format!("axis {} of shape {:?} has odd size {}", axis, v.shape(), n)));
        }
        let half = n / 2;
        Ok((self.slice(a, axis, 0, half)?, self.slice(a, axis, half, half)?))
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let v = &self.values[a];
        let n: usize = shape.iter().product();
        if n != v.numel() {
            return Err(EgnError::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", v.shape(), shape),
            ));
        }
        let t = Tensor::new(shape, v.data().to_vec())?;
        Ok(self.push_from(t, Op::Reshape, vec![a]))
    }

    /// 1-D vector of length d replicated into n rows (n x d).
    pub fn broadcast_rows(&mut self, a: VarId, n: usize) -> Result<VarId> {
        let v = &self.values[a];
        if v.rank() != 1 {
            return Err(EgnError::shape("broadcast_rows", format!("expected rank 1, got {:?}", v.shape())));
        }
        let d = v.numel();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push_from(t, Op::BroadcastRows(n), vec![a]))
    }

    /// n x c -> n x (c*factor): each column repeated `factor` times
    /// consecutively.
    pub fn expand_cols(&mut self, a: VarId, factor: usize) -> Result<VarId> {
        let v = &self.values[a];
        if v.rank() != 2 {
            return Err(EgnError::shape("expand_cols", format!("expected rank 2, got {:?}", v.shape())));
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(n * c * factor);
        for i in 0..n {
            for j in 0..c {
                let x = v.data()[i * c + j];
                out.extend(std::iter::repeat(x).take(factor));
            }
        }
        let t = Tensor::new(vec![n, c * factor], out)?;
        Ok(self.push_from(t, Op::ExpandCols(factor), vec![a]))
    }

    /// Normalizes each row (last axis) to zero mean, unit variance.
    pub fn layer_norm_row(&mut self, a: VarId, eps: f64) -> VarId {
        let v = &self.values[a];
        let cols = *v.shape().last().expect("non-empty shape");
        let rows = v.numel() / cols;
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mu) * inv;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("layernorm preserves shape");
        self.push_from(t, Op::LayerNormRow { eps }, vec![a])
    }

    /// [C, S, S] image -> [L, C*patch*patch] matrix of flattened
    /// non-overlapping patches in row-major grid order.
    pub fn im2patches(&mut self, a: VarId, patch: usize) -> Result<VarId> {
        let v = &self.values[a];
        if v.rank() != 3 {
            return Err(EgnError::shape("im2patches", format!("expected [C,H,W], got {:?}", v.shape())));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        if h % patch != 0 || w % patch != 0 {
            return Err(EgnError::shape(
                "im2patches",
                format!("spatial size {}x{} not divisible by patch {}", h, w, patch),
            ));
        }
        let (gh, gw) = (h / patch, w / patch);
        let feat = c * patch * patch;
        let mut out = Vec::with_capacity(gh * gw * feat);
        for pi in 0..gh {
            for pj in 0..gw {
                for ch in 0..c {
                    for di in 0..patch {
                        for dj in 0..patch {
                            out.push(v.data()[ch * h * w + (pi * patch + di) * w + pj * patch + dj]);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![gh * gw, feat], out)?;
        Ok(self.push_from(t, Op::Im2Patches { patch }, vec![a]))
    }

    /// 2-D convolution on a single [Ci,H,W] image with weight [Co,Ci,K,K]
    /// and bias [Co].
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let (vx, vw, vb) = (&self.values[x], &self.values[w], &self.values[b]);
        if vx.rank() != 3 || vw.rank() != 4 || vb.rank() != 1 {
            return Err(EgnError::shape(
                "conv2d",
                format!("expected x [Ci,H,W], w [Co,Ci,K,K], b [Co]; got {:?} {:?} {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let (ci, h, wid) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (co, ci_w, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        if ci != ci_w || vw.shape()[3] != k || vb.shape()[0] != co {
            return Err(EgnError::shape(
                "conv2d",
                format!("channel mismatch: x {:?}, w {:?}, b {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wid + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = vb.data()[o];
                    for c in 0..ci {
                        for kh in 0..k {
                            let yi = (i * stride + kh) as isize - pad as isize;
                            if yi < 0 || yi as usize >= h {
                                continue;
                            }
                            for kw in 0..k {
                                let xj = (j * stride + kw) as isize - pad as isize;
                                if xj < 0 || xj as usize >= wid {
                                    continue;
                                }
                                acc += vx.data()[c * h * wid + yi as usize * wid + xj as usize]
                                    * vw.data()[((o * ci + c) * k + kh) * k + kw];
                            }
                        }
                    }
                    out[(o * ho + i) * wo + j] = acc;
                }
            }
        }
        let t = Tensor::new(vec![co, ho, wo], out)?;
        Ok(self.push_from(t, Op::Conv2d { stride, pad }, vec![x, w, b]))
    }

    /// Nearest-neighbor 2x upsampling of [C,H,W].
    pub fn upsample2x(&mut self, a: VarId) -> Result<VarId> {
        let v = &self.values[a];
        if v.rank() != 3 {
            return Err(EgnError::shape("upsample2x", format!("expected [C,H,W], got {:?}", v.shape())));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[ch * 4 * h * w + i * 2 * w + j] = v.data()[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        Ok(self.push_from(t, Op::Upsample2x, vec![a]))
    }

    /// Per-channel affine: y[c,:,:] = x[c,:,:] * (1 + s[c]) + b[c].
    pub fn channel_affine(&mut self, x: VarId, s: VarId, b: VarId) -> Result<VarId> {
        let (vx, vs, vb) = (&self.values[x], &self.values[s], &self.values[b]);
        if vx.rank() != 3 || vs.rank() != 1 || vb.rank() != 1 || vs.shape()[0] != vx.shape()[0] || vb.shape()[0] != vx.shape()[0] {
            return Err(EgnError::shape(
                "channel_affine",
                format!("expected x [C,H,W], s [C], b [C]; got {:?} {:?} {:?}", vx.shape(), vs.shape(), vb.shape()),
            ));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let scale = 1.0 + vs.data()[ch];
            let shift = vb.data()[ch];
            for p in 0..h * w {
                out[ch * h * w + p] = vx.data()[ch * h * w + p] * scale + shift;
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push_from(t, Op::ChannelAffine, vec![x, s, b]))
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss. Consumes the tape (one episode per
    /// tape); gradients are returned for every node that requires them.
    pub fn backward(self, loss: VarId) -> Result<Gradients> {
        if !self.values[loss].is_scalar() {
            return Err(EgnError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss].shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..n).rev() {
            if !self.nodes[id].requires {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let parents = node.parents.clone();
            let contributions = self.node_backward(id, &g);
            for (p, contrib) in parents.iter().zip(contributions) {
                if !self.nodes[*p].requires {
                    continue;
                }
                let contrib = match contrib {
                    Some(c) => c,
                    None => continue,
                };
                match &mut grads[*p] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        // Tape cleared: self is dropped here, ending the episode.
        Ok(Gradients { grads })
    }

    fn node_backward(&self, id: VarId, g: &Tensor) -> Vec<Option<Tensor>> {
        let node = &self.nodes[id];
        let p = &node.parents;
        let val = |i: usize| &self.values[p[i]];
        let out = &self.values[id];
        match node.op {
            Op::Leaf => vec![],
            Op::Add(k) => {
                let da = reduce_to(g.data(), val(0).shape(), k, true);
                let db = reduce_to(g.data(), val(1).shape(), k, false);
                vec![Some(da), Some(db)]
            }
            Op::Sub(k) => {
                let da = reduce_to(g.data(), val(0).shape(), k, true);
                let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                let db = reduce_to(&neg, val(1).shape(), k, false);
                vec![Some(da), Some(db)]
            }
            Op::Mul(k) => {
                let (a, b) = (val(0), val(1));
                let ga = bcast_mul(g.data(), b, k, true);
                let gb = bcast_mul(g.data(), a, k, false);
                vec![
                    Some(reduce_to(&ga, a.shape(), k, true)),
                    Some(reduce_to(&gb, b.shape(), k, false)),
                ]
            }
            Op::Div(k) => {
                let (a, b) = (val(0), val(1));
                // da = g/b ; db = -g*a/b^2
                let nb = b.numel();
                let na = a.numel();
                let n = g.numel();
                let lhs_is_big = matches!(k, Bcast::Same | Bcast::RhsSuffix | Bcast::RhsScalar);
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..n {
                    let (ai, bi) = if lhs_is_big { (i, i % nb) } else { (i % na, i) };
                    let (av, bv) = (a.data()[ai], b.data()[bi]);
                    ga[i] = g.data()[i] / bv;
                    gb[i] = -g.data()[i] * av / (bv * bv);
                }
                vec![
                    Some(reduce_to(&ga, a.shape(), k, true)),
                    Some(reduce_to(&gb, b.shape(), k, false)),
                ]
            }
            Op::Matmul => {
                let (a, b) = (val(0), val(1));
                let (m, kk) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let bt = transpose_raw(b.data(), kk, n);
                let at = transpose_raw(a.data(), m, kk);
                let da = matmul_raw(g.data(), &bt, m, n, kk);
                let db = matmul_raw(&at, g.data(), kk, m, n);
                vec![
                    Some(Tensor::new(vec![m, kk], da).expect("matmul grad shape")),
                    Some(Tensor::new(vec![kk, n], db).expect("matmul grad shape")),
                ]
            }
            Op::Transpose => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let da = transpose_raw(g.data(), n, m);
                vec![Some(Tensor::new(vec![m, n], da).expect("transpose grad shape"))]
            }
            Op::Neg => vec![Some(map2(g, |gi, _| -gi, g))],
            Op::Scale(c) => vec![Some(map2(g, |gi, _| c * gi, g))],
            Op::AddScalar => vec![Some(g.clone())],
            Op::Relu => {
                let x = val(0);
                vec![Some(map2(g, |gi, xi| if xi > 0.0 { gi } else { 0.0 }, x))]
            }
            Op::Sigmoid => vec![Some(map2(g, |gi, yi| gi * yi * (1.0 - yi), out))],
            Op::Softplus => {
                let x = val(0);
                vec![Some(map2(g, |gi, xi| gi * sigmoid(xi), x))]
            }
            Op::Log => {
                let x = val(0);
                vec![Some(map2(g, |gi, xi| gi / xi, x))]
            }
            Op::Exp => vec![Some(map2(g, |gi, yi| gi * yi, out))],
            Op::Sqrt => vec![Some(map2(g, |gi, yi| gi / (2.0 * yi), out))],
            Op::Abs => {
                let x = val(0);
                vec![Some(map2(g, |gi, xi| gi * sign(xi), x))]
            }
            Op::SumAll => {
                let a = val(0);
                let s = g.item();
                vec![Some(Tensor::new(a.shape().to_vec(), vec![s; a.numel()]).expect("sum_all grad"))]
            }
            Op::MeanAll => {
                let a = val(0);
                let s = g.item() / a.numel() as f64;
                vec![Some(Tensor::new(a.shape().to_vec(), vec![s; a.numel()]).expect("mean_all grad"))]
            }
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                let a = val(0);
                let shape = a.shape();
                let outer: usize = shape[..axis].iter().product();
                let red = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let scale = if matches!(node.op, Op::MeanAxis(_)) { 1.0 / red as f64 } else { 1.0 };
                let mut da = vec![0.0; a.numel()];
                for o in 0..outer {
                    for r in 0..red {
                        for i in 0..inner {
                            da[(o * red + r) * inner + i] = g.data()[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(Tensor::new(shape.to_vec(), da).expect("axis reduce grad"))]
            }
            Op::MaxAxis(axis) => {
                let a = val(0);
                let shape = a.shape();
                let outer: usize = shape[..axis].iter().product();
                let red = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut da = vec![0.0; a.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        // grad routed to the first argmax
                        let mut best = 0;
                        let mut bestv = f64::NEG_INFINITY;
                        for r in 0..red {
                            let v = a.data()[(o * red + r) * inner + i];
                            if v > bestv {
                                bestv = v;
                                best = r;
                            }
                        }
                        da[(o * red + best) * inner + i] = g.data()[o * inner + i];
                    }
                }
                vec![Some(Tensor::new(shape.to_vec(), da).expect("max grad"))]
            }
            Op::SoftmaxLast => {
                let cols = *out.shape().last().expect("non-empty");
                let rows = out.numel() / cols;
                let mut da = vec![0.0; out.numel()];
                for r in 0..rows {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..cols {
                        da[r * cols + j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(out.shape().to_vec(), da).expect("softmax grad"))]
            }
            Op::Concat { axis } => {
                let base = out.shape();
                let outer: usize = base[..axis].iter().product();
                let total = base[axis];
                let inner: usize = base[axis + 1..].iter().product();
                let mut offset = 0;
                let mut result = Vec::with_capacity(p.len());
                for &pid in p {
                    let v = &self.values[pid];
                    let len = v.shape()[axis];
                    let mut da = vec![0.0; v.numel()];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        da[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    offset += len;
                    result.push(Some(Tensor::new(v.shape().to_vec(), da).expect("concat grad")));
                }
                result
            }
            Op::Slice { axis, start, len } => {
                let a = val(0);
                let shape = a.shape();
                let outer: usize = shape[..axis].iter().product();
                let full = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut da = vec![0.0; a.numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    da[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(shape.to_vec(), da).expect("slice grad"))]
            }
            Op::Reshape => {
                let a = val(0);
                vec![Some(Tensor::new(a.shape().to_vec(), g.data().to_vec()).expect("reshape grad"))]
            }
            Op::BroadcastRows(n) => {
                let d = val(0).numel();
                let mut da = vec![0.0; d];
                let mut buf = vec![0.0; n];
                for j in 0..d {
                    for (i, slot) in buf.iter_mut().enumerate() {
                        *slot = g.data()[i * d + j];
                    }
                    da[j] = stable_sum(&mut buf);
                }
                vec![Some(Tensor::from_vec(da))]
            }
            Op::ExpandCols(f) => {
                let a = val(0);
                let (n, c) = (a.shape()[0], a.shape()[1]);
                let mut da = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let mut s = 0.0;
                        for t in 0..f {
                            s += g.data()[i * c * f + j * f + t];
                        }
                        da[i * c + j] = s;
                    }
                }
                vec![Some(Tensor::new(vec![n, c], da).expect("expand_cols grad"))]
            }
            Op::LayerNormRow { eps } => {
                let x = val(0);
                let cols = *x.shape().last().expect("non-empty");
                let rows = x.numel() / cols;
                let mut da = vec![0.0; x.numel()];
                for r in 0..rows {
                    let xr = &x.data()[r * cols..(r + 1) * cols];
                    let yr = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mu = xr.iter().sum::<f64>() / cols as f64;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gr.iter().sum::<f64>() / cols as f64;
                    let gydot = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        da[r * cols + j] = (gr[j] - gmean - yr[j] * gydot) * inv;
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), da).expect("layernorm grad"))]
            }
            Op::Im2Patches { patch } => {
                let x = val(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (gh, gw) = (h / patch, w / patch);
                let mut da = vec![0.0; x.numel()];
                let mut idx = 0;
                for pi in 0..gh {
                    for pj in 0..gw {
                        for ch in 0..c {
                            for di in 0..patch {
                                for dj in 0..patch {
                                    da[ch * h * w + (pi * patch + di) * w + pj * patch + dj] += g.data()[idx];
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), da).expect("im2patches grad"))]
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (val(0), val(1));
                let (ci, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (co, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let mut dx = vec![0.0; x.numel()];
                let mut dw = vec![0.0; w.numel()];
                let mut db = vec![0.0; co];
                for o in 0..co {
                    for i in 0..ho {
                        for j in 0..wo {
                            let go = g.data()[(o * ho + i) * wo + j];
                            db[o] += go;
                            for c in 0..ci {
                                for kh in 0..k {
                                    let yi = (i * stride + kh) as isize - pad as isize;
                                    if yi < 0 || yi as usize >= h {
                                        continue;
                                    }
                                    for kw in 0..k {
                                        let xj = (j * stride + kw) as isize - pad as isize;
                                        if xj < 0 || xj as usize >= wid {
                                            continue;
                                        }
                                        let xi = c * h * wid + yi as usize * wid + xj as usize;
                                        let wi = ((o * ci + c) * k + kh) * k + kw;
                                        dx[xi] += go * w.data()[wi];
                                        dw[wi] += go * x.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(x.shape().to_vec(), dx).expect("conv grad x")),
                    Some(Tensor::new(w.shape().to_vec(), dw).expect("conv grad w")),
                    Some(Tensor::from_vec(db)),
                ]
            }
            Op::Upsample2x => {
                let x = val(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut da = vec![0.0; x.numel()];
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            da[ch * h * w + (i / 2) * w + j / 2] += g.data()[ch * 4 * h * w + i * 2 * w + j];
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), da).expect("upsample grad"))]
            }
            Op::ChannelAffine => {
                let (x, s) = (val(0), val(1));
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = vec![0.0; x.numel()];
                let mut ds = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    let scale = 1.0 + s.data()[ch];
                    for p in 0..h * w {
                        let gi = g.data()[ch * h * w + p];
                        dx[ch * h * w + p] = gi * scale;
                        ds[ch] += gi * x.data()[ch * h * w + p];
                        db[ch] += gi;
                    }
                }
                vec![
                    Some(Tensor::new(x.shape().to_vec(), dx).expect("affine grad x")),
                    Some(Tensor::from_vec(ds)),
                    Some(Tensor::from_vec(db)),
                ]
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn map2(g: &Tensor, f: impl Fn(f64, f64) -> f64, other: &Tensor) -> Tensor {
    let data: Vec<f64> = g.data().iter().zip(other.data()).map(|(&gi, &oi)| f(gi, oi)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("map2 preserves shape")
}

/// Multiply the full-size gradient by the (possibly broadcast) other operand.
fn bcast_mul(g: &[f64], other: &Tensor, kind: Bcast, grad_for_lhs: bool) -> Vec<f64> {
    let n_other = other.numel();
    // The operand multiplying in is the *other* side; figure out whether it
    // is the broadcast (small) one.
    let other_is_small = match (kind, grad_for_lhs) {
        (Bcast::Same, _) => false,
        (Bcast::RhsSuffix | Bcast::RhsScalar, true) => true,
        (Bcast::RhsSuffix | Bcast::RhsScalar, false) => false,
        (Bcast::LhsSuffix | Bcast::LhsScalar, true) => false,
        (Bcast::LhsSuffix | Bcast::LhsScalar, false) => true,
    };
    g.iter()
        .enumerate()
        .map(|(i, &gi)| gi * other.data()[if other_is_small { i % n_other } else { i }])
        .collect()
}

/// Collapse a full-size gradient onto an operand's shape by summing over the
/// broadcast leading positions.
fn reduce_to(g: &[f64], target_shape: &[usize], kind: Bcast, for_lhs: bool) -> Tensor {
    let target_n: usize = target_shape.iter().product();
    let was_small = match (kind, for_lhs) {
        (Bcast::Same, _) => false,
        (Bcast::RhsSuffix | Bcast::RhsScalar, lhs) => !lhs,
        (Bcast::LhsSuffix | Bcast::LhsScalar, lhs) => lhs,
    };
    if !was_small {
        return Tensor::new(target_shape.to_vec(), g.to_vec()).expect("reduce_to same shape");
    }
    let mut out = vec![0.0; target_n];
    for (i, &gi) in g.iter().enumerate() {
        out[i % target_n] += gi;
    }
    Tensor::new(target_shape.to_vec(), out).expect("reduce_to reduced shape")
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(1, 2, &[1.0, 2.0]));
        let b = tape.constant(t2(2, 1, &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    /// Central finite differences against the recorded adjoint for
    /// grad(sum(a@b)) w.r.t. a.
    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        let b0 = Tensor::uniform(&[4, 2], 2.0, &mut rng);
        let loss = |a: &Tensor, b: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            let y = tape.matmul(av, bv).unwrap();
            let l = tape.sum_all(y);
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let av = tape.leaf(a0.clone(), true);
        let bv = tape.constant(b0.clone());
        let y = tape.matmul(av, bv).unwrap();
        let l = tape.sum_all(y);
        let grads = tape.backward(l).unwrap();
        let ga = grads.get(av).unwrap();
        let h = 1e-6;
        for i in 0..a0.numel() {
            let mut ap = a0.clone();
            ap.data_mut()[i] += h;
            let mut am = a0.clone();
            am.data_mut()[i] -= h;
            let fd = (loss(&ap, &b0) - loss(&am, &b0)) / (2.0 * h);
            let an = ga.data()[i];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "i={i} fd={fd} an={an}");
        }
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-3.0, 3.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn sigmoid_gradient_at_one() {
        // sigma(1)(1 - sigma(1)) ~= 0.19661
        let x0 = 1.0;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(x0), true);
        let y = tape.sigmoid(x);
        let grads = tape.backward(y).unwrap();
        let an = grads.get(x).unwrap().item();
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((an - s * (1.0 - s)).abs() < 1e-12);
        assert!((an - 0.19661).abs() < 1e-5);
        // finite differences, rtol 1e-6
        let h = 1e-6;
        let f = |v: f64| 1.0 / (1.0 + (-v).exp());
        let fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
        assert!((fd - an).abs() <= 1e-6 * an.abs());
    }

    #[test]
    fn mean_and_sum_reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let m = tape.mean_all(x);
        assert_eq!(tape.value(m).item(), 2.0);
        let ones = tape.constant(Tensor::ones(&[4, 3]));
        let s = tape.sum_axis(ones, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 4.0, 4.0]);
        assert_eq!(tape.value(s).shape(), &[3]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn reduce_axis_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.sum_axis(x, 2).is_err());
    }

    #[test]
    fn chunk_and_concat() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let (a, b) = tape.chunk(x, 0).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 2.0]);
        assert_eq!(tape.value(b).data(), &[3.0, 4.0]);
        let c1 = tape.constant(Tensor::from_vec(vec![1.0]));
        let c2 = tape.constant(Tensor::from_vec(vec![2.0]));
        let cat = tape.concat(0, &[c1, c2]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0]);
    }

    #[test]
    fn chunk_rejects_odd_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(tape.chunk(x, 0).is_err());
    }

    #[test]
    fn backward_sum_of_leaf() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones(&[3]), true);
        let l = tape.sum_all(w);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum_all(sq);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones(&[3]), true);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn no_grad_for_untracked_leaf() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones(&[2]), true);
        let c = tape.constant(Tensor::ones(&[2]));
        let y = tape.mul(w, c).unwrap();
        let l = tape.sum_all(y);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn broadcast_bias_add() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = tape.leaf(Tensor::from_vec(vec![10.0, 20.0, 30.0]), true);
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let l = tape.sum_all(y);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_broadcastable_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn mean_axis_is_permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| Tensor::uniform(&[7], 2.0, &mut rng).into_data()).collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let permuted: Vec<f64> = [4, 2, 0, 3, 1].iter().flat_map(|&i: &usize| rows[i].clone()).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![5, 7], flat).unwrap());
        let b = tape.constant(Tensor::new(vec![5, 7], permuted).unwrap());
        let ma = tape.mean_axis(a, 0).unwrap();
        let mb = tape.mean_axis(b, 0).unwrap();
        for (x, y) in tape.value(ma).data().iter().zip(tape.value(mb).data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        let mut tape = Tape::new();
        // 1x2x2 input, 1 output channel, 2x2 kernel, stride 1, no pad
        let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![0.5]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.5]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 4, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]));
        let y = tape.layer_norm_row(x, 1e-6);
        let v = tape.value(y);
        for r in 0..2 {
            let row = &v.data()[r * 4..(r + 1) * 4];
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn chunk_concat_roundtrip(len in 1usize..20, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Tensor::uniform(&[2 * len], 2.0, &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(v.clone());
            let (a, b) = tape.chunk(x, 0).unwrap();
            let back = tape.concat(0, &[a, b]).unwrap();
            proptest::prop_assert_eq!(tape.value(back).data(), v.data());
        }

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Tensor::uniform(&[rows, cols], 5.0, &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(v);
            let y = tape.softmax(x);
            let out = tape.value(y);
            for r in 0..rows {
                let s: f64 = out.data()[r * cols..(r + 1) * cols].iter().sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-12);
                proptest::prop_assert!(out.data()[r * cols..(r + 1) * cols].iter().all(|&p| p >= 0.0));
            }
        }

        /// Central finite differences agree with adjoints for a composite
        /// elementwise chain on inputs in [-2,2], away from the ReLU kink.
        #[test]
        fn elementwise_adjoints_match_fd(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x0 = Tensor::uniform(&[6], 2.0, &mut rng);
            for v in x0.data_mut() {
                if v.abs() < 1e-3 { *v = 1e-3_f64.copysign(*v); } // keep clear of the kink
            }
            let f = |x: &Tensor| -> f64 {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let r = tape.relu(xv);
                let s = tape.sigmoid(r);
                let sp = tape.softplus(s);
                let a = tape.abs(sp);
                let l = tape.mean_all(a);
                tape.value(l).item()
            };
            let mut tape = Tape::new();
            let xv = tape.leaf(x0.clone(), true);
            let r = tape.relu(xv);
            let s = tape.sigmoid(r);
            let sp = tape.softplus(s);
            let a = tape.abs(sp);
            let l = tape.mean_all(a);
            let grads = tape.backward(l).unwrap();
            let ga = grads.get(xv).unwrap();
            let h = 1e-6;
            for i in 0..x0.numel() {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let an = ga.data()[i];
                proptest::prop_assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8),
                    "i={} fd={} an={}", i, fd, an);
            }
        }
    }
}
