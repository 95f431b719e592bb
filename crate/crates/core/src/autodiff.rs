//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass as a node
//! holding its value and the indices of its inputs. Nodes are appended in
//! execution order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep. One tape is built per
//! training step and dropped afterwards.
//!
//! Nodes created from [`Tape::constant`] (and any node whose inputs are all
//! constants) are untracked: they take part in the forward computation but
//! never receive a gradient.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `rep` is how many consecutive elements of `a` share one element of `b`.
    Binary(BinaryKind, Var, Var, usize),
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Reduce {
        kind: ReduceKind,
        input: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    SliceLast {
        input: Var,
        start: usize,
    },
    ConcatLast(Var, Var),
    SelectAxis1 {
        input: Var,
        index: usize,
    },
    StackAxis1(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPool2(Var),
    BmmLeft(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` for untracked nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Broadcast factor for `b` against `a`: equal shapes, a one-element `b`, or a
/// `b` whose trailing dimensions are 1 and whose leading ones match `a`.
fn broadcast_rep(a: &[usize], b: &[usize]) -> Option<usize> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Some(1);
    }
    if nb == 1 {
        return Some(na);
    }
    if a.len() != b.len() {
        return None;
    }
    let k = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    if b[k..].iter().all(|&d| d == 1) {
        Some(a[k..].iter().product())
    } else {
        None
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

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - m).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Images per GEMM in the 2D convolution, so small frames still give the
/// multiply a reasonably wide operand.
fn conv_group(hw: usize) -> usize {
    (4096 / hw.max(1)).max(1)
}

/// Column buffer for a same-padded 2D convolution of one image, written at
/// column offset `off` of a `[cin * k * k, ld]` buffer.
#[allow(clippy::too_many_arguments)]
fn im2col_2d(img: &[f64], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f64], ld: usize, off: usize) {
    let p = k / 2;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + hw];
                // valid output columns for this kernel offset
                let x0 = p.saturating_sub(kx);
                let x1 = (w + p).saturating_sub(kx).min(w);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < p || sy - p >= h || x0 >= x1 {
                        out.fill(0.0);
                        continue;
                    }
                    let src = (c * h + sy - p) * w;
                    out[..x0].fill(0.0);
                    out[x0..x1].copy_from_slice(&img[src + x0 + kx - p..src + x1 + kx - p]);
                    out[x1..].fill(0.0);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_2d(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, img: &mut [f64], ld: usize, off: usize) {
    let p = k / 2;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ld + off..row * ld + off + hw];
                let x0 = p.saturating_sub(kx);
                let x1 = (w + p).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < p || sy - p >= h {
                        continue;
                    }
                    let dst = (c * h + sy - p) * w;
                    let row_in = &src[y * w..(y + 1) * w];
                    for (d, v) in img[dst + x0 + kx - p..dst + x1 + kx - p].iter_mut().zip(&row_in[x0..x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Column buffer for a same-padded 1D convolution over time, channels last.
/// Layout `[n * t, k * cin]`.
fn im2col_1d(x: &[f64], n: usize, t: usize, cin: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let mut cols = vec![0.0; n * t * k * cin];
    for s in 0..n {
        for ti in 0..t {
            let row = &mut cols[(s * t + ti) * k * cin..(s * t + ti + 1) * k * cin];
            for o in 0..k {
                let src = ti as isize + o as isize - p as isize;
                if src >= 0 && src < t as isize {
                    let base = (s * t + src as usize) * cin;
                    row[o * cin..(o + 1) * cin].copy_from_slice(&x[base..base + cin]);
                }
            }
        }
    }
    cols
}

fn col2im_1d(cols: &[f64], n: usize, t: usize, cin: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let mut x = vec![0.0; n * t * cin];
    for s in 0..n {
        for ti in 0..t {
            let row = &cols[(s * t + ti) * k * cin..(s * t + ti + 1) * k * cin];
            for o in 0..k {
                let src = ti as isize + o as isize - p as isize;
                if src >= 0 && src < t as isize {
                    let base = (s * t + src as usize) * cin;
                    for c in 0..cin {
                        x[base + c] += row[o * cin + c];
                    }
                }
            }
        }
    }
    x
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rep = broadcast_rep(sa, sb).ok_or_else(|| mismatch("elementwise", sa, sb))?;
        let av = self.value(a);
        let bd = self.value(b).data();
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i / rep]))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b, rep), tr))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let av = self.value(a);
        if kind == UnaryKind::Log {
            if let Some(&bad) = av.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(TensorError::NonPositiveLog(bad));
            }
        }
        let out = match kind {
            UnaryKind::Exp => av.map(f64::exp),
            UnaryKind::Log => av.map(f64::ln),
            UnaryKind::Tanh => av.map(f64::tanh),
            UnaryKind::Sigmoid => av.map(sigmoid),
            UnaryKind::Relu => av.map(|x| x.max(0.0)),
        };
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::Unary(kind, a), tr))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let tr = self.tracked(&[a]);
        self.push(out, Op::Scale(a, c), tr)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(TensorError::Invalid(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 - rate;
        let shape = self.shape(a).to_vec();
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        let tr = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tr))
    }

    /// `a[.., n] + bias[n]` with the bias repeated over every leading index.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let n = *sa.last().ok_or_else(|| mismatch("add_bias", sa, sb))?;
        if sb != [n] {
            return Err(mismatch("add_bias", sa, sb));
        }
        let bd = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        let tr = self.tracked(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), tr))
    }

    /// `m[j, k] · x[b, k, n] -> [b, j, n]` for every batch index `b`.
    pub fn bmm_left(&mut self, m: Var, x: Var) -> Result<Var> {
        let (sm, sx) = (self.shape(m), self.shape(x));
        if sm.len() != 2 || sx.len() != 3 || sm[1] != sx[1] {
            return Err(mismatch("bmm_left", sm, sx));
        }
        let (j, k, bsz, n) = (sm[0], sm[1], sx[0], sx[2]);
        let mut out = vec![0.0; bsz * j * n];
        let md = self.value(m).data();
        let xd = self.value(x).data();
        for s in 0..bsz {
            gemm(
                j,
                k,
                n,
                md,
                (k, 1),
                &xd[s * k * n..(s + 1) * k * n],
                (n, 1),
                &mut out[s * j * n..(s + 1) * j * n],
                0.0,
            );
        }
        let tr = self.tracked(&[m, x]);
        Ok(self.push(Tensor::new(vec![bsz, j, n], out)?, Op::BmmLeft(m, x), tr))
    }

    // ---- reductions -------------------------------------------------------

    /// Reduce along `axis`, dropping it from the shape.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let ad = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for r in 0..axis_len {
                        let base = (o * axis_len + r) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += ad[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = axis_len as f64;
                    out.iter_mut().for_each(|x| *x /= inv);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = 0;
                        let mut bv = ad[o * axis_len * inner + i];
                        for r in 1..axis_len {
                            let v = ad[(o * axis_len + r) * inner + i];
                            if v > bv {
                                bv = v;
                                best = r;
                            }
                        }
                        out[o * inner + i] = bv;
                        argmax[o * inner + i] = best;
                    }
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let value = Tensor::new(new_shape, out)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(
            value,
            Op::Reduce {
                kind,
                input: a,
                outer,
                axis_len,
                inner,
                argmax,
            },
            tr,
        ))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axis)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tr = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), tr)
    }

    // ---- softmax ----------------------------------------------------------

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.has_nan() {
            return Err(TensorError::NaN("softmax"));
        }
        let n = *av.shape().last().unwrap_or(&1);
        let out = Tensor::new(av.shape().to_vec(), softmax_rows(av.data(), n))?;
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::Softmax(a), tr))
    }

    /// `log(softmax(a))` over the last axis, computed without forming `log(0)`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.has_nan() {
            return Err(TensorError::NaN("log_softmax"));
        }
        let n = *av.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; av.len()];
        for (row, o) in av.data().chunks(n).zip(out.chunks_mut(n)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = xi - lse;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), tr))
    }

    // ---- shape manipulation -----------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::Reshape(a), tr))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or(TensorError::Empty("slice_last"))?;
        if len == 0 || start + len > n {
            return Err(TensorError::Invalid(format!(
                "slice {start}..{} of last axis {n}",
                start + len
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        let out = Tensor::new(new_shape, data)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::SliceLast { input: a, start }, tr))
    }

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat_last", &sa, &sb));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for (ra, rb) in ad.chunks(na).zip(bd.chunks(nb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let out = Tensor::new(shape, data)?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::ConcatLast(a, b), tr))
    }

    /// `a[:, index, ..]` for a tensor of rank ≥ 2.
    pub fn select_axis1(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || index >= shape[1] {
            return Err(TensorError::Invalid(format!(
                "select index {index} on shape {shape:?}"
            )));
        }
        let (outer, t) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let ad = self.value(a).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * t + index) * inner;
            data.extend_from_slice(&ad[base..base + inner]);
        }
        let mut new_shape = vec![outer];
        new_shape.extend_from_slice(&shape[2..]);
        let out = Tensor::new(new_shape, data)?;
        let tr = self.tracked(&[a]);
        Ok(self.push(out, Op::SelectAxis1 { input: a, index }, tr))
    }

    /// Stack equally-shaped `[outer, ..]` tensors into `[outer, parts, ..]`.
    pub fn stack_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("stack_axis1"))?;
        let shape = self.shape(first).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid("stack_axis1 on scalars".into()));
        }
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(mismatch("stack_axis1", &shape, self.shape(p)));
            }
        }
        let outer = shape[0];
        let inner: usize = shape[1..].iter().product();
        let t = parts.len();
        let mut data = vec![0.0; outer * t * inner];
        for (ti, &p) in parts.iter().enumerate() {
            let pd = self.value(p).data();
            for o in 0..outer {
                data[(o * t + ti) * inner..(o * t + ti + 1) * inner]
                    .copy_from_slice(&pd[o * inner..(o + 1) * inner]);
            }
        }
        let mut new_shape = vec![outer, t];
        new_shape.extend_from_slice(&shape[1..]);
        let out = Tensor::new(new_shape, data)?;
        let tr = self.tracked(parts);
        Ok(self.push(out, Op::StackAxis1(parts.to_vec()), tr))
    }

    // ---- convolutions -----------------------------------------------------

    /// Same-padded, stride-1 2D convolution.
    /// `x: [n, cin, h, w]`, `w: [cout, cin, k, k]` (k odd), `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if sb != [sw[0]] {
            return Err(mismatch("conv2d bias", &sw, &sb));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let (hw, ckk) = (h * wd, cin * k * k);
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * cout * hw];
        let g = conv_group(hw);
        let mut cols = vec![0.0; ckk * g * hw];
        let mut tmp = vec![0.0; cout * g * hw];
        for s0 in (0..n).step_by(g) {
            let gn = g.min(n - s0);
            let ld = gn * hw;
            for i in 0..gn {
                let s = s0 + i;
                im2col_2d(&xd[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, k, &mut cols, ld, i * hw);
            }
            gemm(cout, ckk, ld, wdata, (ckk, 1), &cols, (ld, 1), &mut tmp, 0.0);
            for i in 0..gn {
                for c in 0..cout {
                    let dst = &mut out[((s0 + i) * cout + c) * hw..][..hw];
                    let src = &tmp[c * ld + i * hw..][..hw];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = v + bd[c];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, h, wd], out)?;
        let tr = self.tracked(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b }, tr))
    }

    /// Same-padded, stride-1 convolution over axis 1 of a channels-last input.
    /// `x: [n, t, cin]`, `w: [k, cin, cout]` (k odd), `b: [cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sw[0] % 2 == 0 {
            return Err(mismatch("conv1d", &sx, &sw));
        }
        if sb != [sw[2]] {
            return Err(mismatch("conv1d bias", &sw, &sb));
        }
        let (n, t, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        if t < k {
            return Err(TensorError::Invalid(format!(
                "sequence length {t} shorter than kernel {k}"
            )));
        }
        let cols = im2col_1d(self.value(x).data(), n, t, cin, k);
        let bd = self.value(b).data();
        let mut out: Vec<f64> = (0..n * t * cout).map(|i| bd[i % cout]).collect();
        gemm(
            n * t,
            k * cin,
            cout,
            &cols,
            (k * cin, 1),
            self.value(w).data(),
            (cout, 1),
            &mut out,
            1.0,
        );
        let value = Tensor::new(vec![n, t, cout], out)?;
        let tr = self.tracked(&[x, w, b]);
        Ok(self.push(value, Op::Conv1d { x, w, b }, tr))
    }

    /// 2x2 average pooling with stride 2 over the last two axes of
    /// `[n, c, h, w]`. Odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(TensorError::Invalid(format!("avg_pool2 on shape {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; nc * oh * ow];
        for p in 0..nc {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * oh + y) * ow + xx] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let tr = self.tracked(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), tr))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Every tracked leaf gets a gradient, zero-filled if the loss does not
    /// depend on it. Gradients from fan-out are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].tracked {
            return Err(TensorError::UntrackedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.tracked && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            } else if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.nodes[v.0].tracked {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, rep) => {
                let (a, b, rep) = (*a, *b, *rep);
                let av = self.value(a);
                let bv = self.value(b);
                let (ad, bd) = (av.data(), bv.data());
                if self.is_tracked(a) {
                    let ga: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => gd.iter().enumerate().map(|(i, g)| g * bd[i / rep]).collect(),
                        BinaryKind::Div => gd.iter().enumerate().map(|(i, g)| g / bd[i / rep]).collect(),
                    };
                    self.send(grads, a, Tensor::new(av.shape().to_vec(), ga)?);
                }
                if self.is_tracked(b) {
                    let mut gb = vec![0.0; bv.len()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let j = i / rep;
                        gb[j] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * ad[i],
                            BinaryKind::Div => -gi * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                    self.send(grads, b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
            }
            Op::Unary(kind, a) => {
                let xd = self.value(*a).data();
                let yd = node.value.data();
                let ga: Vec<f64> = (0..gd.len())
                    .map(|i| {
                        gd[i]
                            * match kind {
                                UnaryKind::Exp => yd[i],
                                UnaryKind::Log => 1.0 / xd[i],
                                UnaryKind::Tanh => 1.0 - yd[i] * yd[i],
                                UnaryKind::Sigmoid => yd[i] * (1.0 - yd[i]),
                                UnaryKind::Relu => {
                                    if xd[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            }
                    })
                    .collect();
                self.send(grads, *a, Tensor::new(node.value.shape().to_vec(), ga)?);
            }
            Op::Scale(a, c) => self.send(grads, *a, g.scale(*c)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.is_tracked(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, (n, 1), self.value(*b).data(), (1, n), &mut ga, 0.0);
                    self.send(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.is_tracked(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), (1, k), gd, (n, 1), &mut gb, 0.0);
                    self.send(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::AddBias(a, bias) => {
                self.send(grads, *a, g.clone());
                if self.is_tracked(*bias) {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    self.send(grads, *bias, Tensor::new(vec![n], gb)?);
                }
            }
            Op::BmmLeft(m, x) => {
                let (sm, sx) = (self.shape(*m), self.shape(*x));
                let (j, k, bsz, n) = (sm[0], sm[1], sx[0], sx[2]);
                let md = self.value(*m).data();
                let xd = self.value(*x).data();
                if self.is_tracked(*x) {
                    let mut gx = vec![0.0; bsz * k * n];
                    for s in 0..bsz {
                        gemm(
                            k,
                            j,
                            n,
                            md,
                            (1, k),
                            &gd[s * j * n..(s + 1) * j * n],
                            (n, 1),
                            &mut gx[s * k * n..(s + 1) * k * n],
                            0.0,
                        );
                    }
                    self.send(grads, *x, Tensor::new(vec![bsz, k, n], gx)?);
                }
                if self.is_tracked(*m) {
                    let mut gm = vec![0.0; j * k];
                    for s in 0..bsz {
                        gemm(
                            j,
                            n,
                            k,
                            &gd[s * j * n..(s + 1) * j * n],
                            (n, 1),
                            &xd[s * k * n..(s + 1) * k * n],
                            (1, n),
                            &mut gm,
                            1.0,
                        );
                    }
                    self.send(grads, *m, Tensor::new(vec![j, k], gm)?);
                }
            }
            Op::Reduce {
                kind,
                input,
                outer,
                axis_len,
                inner,
                argmax,
            } => {
                let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
                let mut ga = vec![0.0; outer * axis_len * inner];
                let scale = if *kind == ReduceKind::Mean {
                    1.0 / axis_len as f64
                } else {
                    1.0
                };
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = gd[o * inner + i];
                        match kind {
                            ReduceKind::Max => {
                                let r = argmax[o * inner + i];
                                ga[(o * axis_len + r) * inner + i] += gi;
                            }
                            _ => {
                                for r in 0..axis_len {
                                    ga[(o * axis_len + r) * inner + i] = gi * scale;
                                }
                            }
                        }
                    }
                }
                let shape = self.shape(*input).to_vec();
                self.send(grads, *input, Tensor::new(shape, ga)?);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                let g0 = gd[0];
                self.send(grads, *a, Tensor::full(&shape, g0));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(gd.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.send(grads, *a, Tensor::new(node.value.shape().to_vec(), ga)?);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(gd.chunks(n)).zip(ga.chunks_mut(n)) {
                    let gs: f64 = gr.iter().sum();
                    for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                        *o = gi - yi.exp() * gs;
                    }
                }
                self.send(grads, *a, Tensor::new(node.value.shape().to_vec(), ga)?);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.send(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::SliceLast { input, start } => {
                let shape = self.shape(*input).to_vec();
                let n = *shape.last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; self.value(*input).len()];
                for (dst, src) in ga.chunks_mut(n).zip(gd.chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                self.send(grads, *input, Tensor::new(shape, ga)?);
            }
            Op::ConcatLast(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in gd.chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                self.send(grads, *a, Tensor::new(sa, ga)?);
                self.send(grads, *b, Tensor::new(sb, gb)?);
            }
            Op::SelectAxis1 { input, index } => {
                let shape = self.shape(*input).to_vec();
                let (outer, t) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut ga = vec![0.0; outer * t * inner];
                for o in 0..outer {
                    let base = (o * t + index) * inner;
                    ga[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
                self.send(grads, *input, Tensor::new(shape, ga)?);
            }
            Op::StackAxis1(parts) => {
                let t = parts.len();
                let part_shape = self.shape(parts[0]).to_vec();
                let outer = part_shape[0];
                let inner: usize = part_shape[1..].iter().product();
                for (ti, &p) in parts.iter().enumerate() {
                    if !self.is_tracked(p) {
                        continue;
                    }
                    let mut gp = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        gp.extend_from_slice(&gd[(o * t + ti) * inner..(o * t + ti + 1) * inner]);
                    }
                    self.send(grads, p, Tensor::new(part_shape.clone(), gp)?);
                }
            }
            Op::Conv2d { x, w, b } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, k) = (sw[0], sw[2]);
                let (hw, ckk) = (h * wd, cin * k * k);
                let xd = self.value(*x).data();
                let wdata = self.value(*w).data();
                let need_x = self.is_tracked(*x);
                let need_w = self.is_tracked(*w);
                let mut gx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
                let mut gw = vec![0.0; if need_w { cout * ckk } else { 0 }];
                let mut gb = vec![0.0; cout];
                let g = conv_group(hw);
                let mut cols = vec![0.0; ckk * g * hw];
                let mut dcols = vec![0.0; ckk * g * hw];
                let mut go = vec![0.0; cout * g * hw];
                for s0 in (0..n).step_by(g) {
                    let gn = g.min(n - s0);
                    let ld = gn * hw;
                    for i in 0..gn {
                        let gs = &gd[(s0 + i) * cout * hw..(s0 + i + 1) * cout * hw];
                        for (c, chunk) in gs.chunks(hw).enumerate() {
                            gb[c] += chunk.iter().sum::<f64>();
                            go[c * ld + i * hw..c * ld + (i + 1) * hw].copy_from_slice(chunk);
                        }
                    }
                    if need_w {
                        for i in 0..gn {
                            let s = s0 + i;
                            im2col_2d(&xd[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, k, &mut cols, ld, i * hw);
                        }
                        // dW += G · colsᵀ
                        gemm(cout, ld, ckk, &go, (ld, 1), &cols, (1, ld), &mut gw, 1.0);
                    }
                    if need_x {
                        // dcols = Wᵀ · G
                        gemm(ckk, cout, ld, wdata, (1, ckk), &go, (ld, 1), &mut dcols, 0.0);
                        for i in 0..gn {
                            let s = s0 + i;
                            col2im_2d(&dcols, cin, h, wd, k, &mut gx[s * cin * hw..(s + 1) * cin * hw], ld, i * hw);
                        }
                    }
                }
                if need_x {
                    self.send(grads, *x, Tensor::new(sx, gx)?);
                }
                if need_w {
                    self.send(grads, *w, Tensor::new(sw, gw)?);
                }
                self.send(grads, *b, Tensor::new(vec![cout], gb)?);
            }
            Op::Conv1d { x, w, b } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (n, t, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let rows = n * t;
                let mut gb = vec![0.0; cout];
                for row in gd.chunks(cout) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                if self.is_tracked(*w) {
                    let cols = im2col_1d(self.value(*x).data(), n, t, cin, k);
                    let mut gw = vec![0.0; k * cin * cout];
                    gemm(k * cin, rows, cout, &cols, (1, k * cin), gd, (cout, 1), &mut gw, 0.0);
                    self.send(grads, *w, Tensor::new(sw.clone(), gw)?);
                }
                if self.is_tracked(*x) {
                    let mut dcols = vec![0.0; rows * k * cin];
                    gemm(
                        rows,
                        cout,
                        k * cin,
                        gd,
                        (cout, 1),
                        self.value(*w).data(),
                        (1, cout),
                        &mut dcols,
                        0.0,
                    );
                    self.send(grads, *x, Tensor::new(sx, col2im_1d(&dcols, n, t, cin, k))?);
                }
                self.send(grads, *b, Tensor::new(vec![cout], gb)?);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gi = 0.25 * gd[(p * oh + y) * ow + xx];
                            let i = p * h * w + 2 * y * w + 2 * xx;
                            gx[i] += gi;
                            gx[i + 1] += gi;
                            gx[i + w] += gi;
                            gx[i + w + 1] += gi;
                        }
                    }
                }
                self.send(grads, *x, Tensor::new(s, gx)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn add_componentwise() {
        let mut t = Tape::new();
        let a = t.constant(vec_t(&[1.0, 2.0]));
        let b = t.constant(vec_t(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
        assert!(!t.is_tracked(c));
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(vec_t(&[0.3, -1.7, 2.5]));
        let ones = t.constant(Tensor::ones(&[3]));
        let y = t.mul(x, ones).unwrap();
        assert!(t.value(y).bit_eq(t.value(x)));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(vec_t(&[0.0]));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5]);
    }

    #[test]
    fn broadcast_rules() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = t.constant(Tensor::scalar(10.0));
        let col = t.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let row = t.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.add(a, s).unwrap();
        assert_eq!(t.value(y).data(), &[10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        let y = t.mul(a, col).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 1.0, 2.0, 6.0, 8.0, 10.0]);
        // leading-1 broadcast is outside the supported rules
        assert!(matches!(t.add(a, row), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(vec_t(&[1.0, 0.0]));
        assert_eq!(t.log(x), Err(TensorError::NonPositiveLog(0.0)));
        let x = t.constant(vec_t(&[-2.0]));
        assert!(t.log(x).is_err());
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2));
        let m = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let y = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::matrix(&[&[3.0], &[4.0]]).unwrap());
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[11.0]);

        let bad = t.constant(Tensor::zeros(&[3, 1]));
        assert!(t.matmul(a, bad).is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut t = Tape::new();
        let x = t.constant(vec_t(&[1.0, 2.0, 3.0]));
        let m = t.mean_axis(x, 0).unwrap();
        assert_eq!(t.value(m).item(), 2.0);
        let z = t.constant(Tensor::zeros(&[4, 4]));
        let s = t.sum_axis(z, 0).unwrap();
        let s = t.sum_axis(s, 0).unwrap();
        assert_eq!(t.value(s).item(), 0.0);
        let x = t.constant(vec_t(&[-1.0, 5.0, 2.0]));
        let mx = t.max_axis(x, 0).unwrap();
        assert_eq!(t.value(mx).item(), 5.0);
        assert!(matches!(
            t.sum_axis(x, 1),
            Err(TensorError::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(vec_t(&[0.0, 0.0, 0.0]));
        let y = t.softmax(x).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(vec_t(&[1000.0, 1000.0]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
        let x = t.constant(vec_t(&[0.0, 3f64.ln()]));
        let y = t.softmax(x).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
        let x = t.constant(vec_t(&[0.0, f64::NAN]));
        assert_eq!(t.softmax(x), Err(TensorError::NaN("softmax")));
    }

    #[test]
    fn backward_power_rule_and_fanout() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);

        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(1.5));
        let y = t.add(a, a).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unused() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0, 2.0]));
        let unused = t.param(vec_t(&[7.0, 8.0, 9.0]));
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(TensorError::NonScalarLoss(_))));
        let l = t.sum_all(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0, 2.0]));
        let c = t.constant(vec_t(&[3.0, 4.0]));
        let y = t.mul(x, c).unwrap();
        let l = t.sum_all(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0, 2.0]));
        let mut rng = rand::rng();
        assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = t.constant(k);
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b).unwrap();
        assert!(t.value(y).bit_eq(t.value(x)));
    }
}
