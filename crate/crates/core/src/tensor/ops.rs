use super::{check_finite, grad_enabled, numel, Float, Tensor};
use crate::error::{Error, Result};

/// A recorded operation: its inputs plus whatever the backward rule needs.
pub enum Op<F: Float> {
    MatMul(Tensor<F>, Tensor<F>),
    Add(Tensor<F>, Tensor<F>),
    Sub(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    Scale(Tensor<F>, F),
    AddRow(Tensor<F>, Tensor<F>),
    Transpose(Tensor<F>),
    Reshape(Tensor<F>),
    GatherRows(Tensor<F>, Vec<usize>),
    Slice {
        x: Tensor<F>,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Tensor<F>>,
        axis: usize,
    },
    Softmax(Tensor<F>, usize),
    LayerNorm {
        x: Tensor<F>,
        gamma: Tensor<F>,
        beta: Tensor<F>,
        axis: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Tensor<F>),
    Attention {
        q: Tensor<F>,
        k: Tensor<F>,
        v: Tensor<F>,
        heads: usize,
        probs: Vec<F>,
    },
    Sum(Tensor<F>),
    Mean(Tensor<F>),
    Huber(Tensor<F>, F),
}

impl<F: Float> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Attention { .. } => "scaled_dot_attention",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Huber(..) => "huber",
        }
    }

    pub fn inputs(&self) -> Vec<&Tensor<F>> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::GatherRows(x, _)
            | Op::Softmax(x, _)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Huber(x, _)
            | Op::Slice { x, .. } => vec![x],
            Op::Concat { xs, .. } => xs.iter().collect(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
        }
    }

    /// Vector-Jacobian products for each input given the output gradient.
    pub(super) fn backward<'a>(&'a self, out: &Tensor<F>, g: &[F]) -> Vec<(&'a Tensor<F>, Vec<F>)> {
        match self {
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut ga = vec![F::zero(); m * k];
                let mut gb = vec![F::zero(); k * n];
                // dA = dC @ B^T, dB = A^T @ dC
                F::gemm(m, n, k, F::one(), g, n as isize, 1, b.data(), 1, n as isize, F::zero(), &mut ga, k as isize, 1);
                F::gemm(k, m, n, F::one(), a.data(), 1, k as isize, g, n as isize, 1, F::zero(), &mut gb, n as isize, 1);
                vec![(a, ga), (b, gb)]
            }
            Op::Add(a, b) => vec![(a, reduce_to(a, g)), (b, reduce_to(b, g))],
            Op::Sub(a, b) => {
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                vec![(a, reduce_to(a, g)), (b, reduce_to(b, &neg))]
            }
            Op::Mul(a, b) => {
                let ga: Vec<F> = g.iter().enumerate().map(|(i, &gi)| gi * at(b, i)).collect();
                let gb: Vec<F> = g.iter().enumerate().map(|(i, &gi)| gi * at(a, i)).collect();
                vec![(a, reduce_to(a, &ga)), (b, reduce_to(b, &gb))]
            }
            Op::Scale(x, c) => vec![(x, g.iter().map(|&v| v * *c).collect())],
            Op::AddRow(x, row) => {
                let n = row.numel();
                let mut gr = vec![F::zero(); n];
                for chunk in g.chunks(n) {
                    for (a, &b) in gr.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                vec![(x, g.to_vec()), (row, gr)]
            }
            Op::Transpose(x) => {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut gx = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(x, gx)]
            }
            Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::GatherRows(x, idx) => {
                let d = x.shape()[1];
                let mut gx = vec![F::zero(); x.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for (a, &b) in gx[src * d..(src + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                vec![(x, gx)]
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = split_axis(x.shape(), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![F::zero(); x.numel()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = o * dim * inner + start * inner;
                    gx[dst..dst + len * inner].copy_from_slice(src);
                }
                vec![(x, gx)]
            }
            Op::Concat { xs, axis } => {
                let total = out.shape()[*axis];
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for x in xs {
                    let d = x.shape()[*axis];
                    let mut gx = Vec::with_capacity(x.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gx.extend_from_slice(&g[base..base + d * inner]);
                    }
                    offset += d;
                    res.push((x, gx));
                }
                res
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let y = out.data();
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| o * n * inner + i * inner + j;
                        let dot: F = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                vec![(x, gx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let gam = gamma.data();
                let mut gx = vec![F::zero(); x.numel()];
                let mut gg = vec![F::zero(); n];
                let mut gb = vec![F::zero(); n];
                let nf = F::of(n as f64);
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| o * n * inner + i * inner + j;
                        let r = rstd[o * inner + j];
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for i in 0..n {
                            let d = g[idx(i)] * gam[i];
                            mean_d += d;
                            mean_dx += d * xhat[idx(i)];
                            gg[i] += g[idx(i)] * xhat[idx(i)];
                            gb[i] += g[idx(i)];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for i in 0..n {
                            let d = g[idx(i)] * gam[i];
                            gx[idx(i)] = r * (d - mean_d - xhat[idx(i)] * mean_dx);
                        }
                    }
                }
                vec![(x, gx), (gamma, gg), (beta, gb)]
            }
            Op::Gelu(x) => {
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| gi * gelu_grad(v))
                    .collect();
                vec![(x, gx)]
            }
            Op::Attention { q, k, v, heads, probs } => attention_backward(q, k, v, *heads, probs, g),
            Op::Sum(x) => vec![(x, vec![g[0]; x.numel()])],
            Op::Mean(x) => {
                let n = F::of(x.numel() as f64);
                vec![(x, vec![g[0] / n; x.numel()])]
            }
            Op::Huber(x, delta) => {
                let d = *delta;
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let dv = if v.abs() < d { v } else { d * v.signum() };
                        gi * dv
                    })
                    .collect();
                vec![(x, gx)]
            }
        }
    }
}

/// Element `i` of `t`, treating a rank-0 tensor as broadcast.
#[inline]
fn at<F: Float>(t: &Tensor<F>, i: usize) -> F {
    if t.rank() == 0 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Sum a full-size gradient down to a broadcast scalar operand.
fn reduce_to<F: Float>(t: &Tensor<F>, g: &[F]) -> Vec<F> {
    if t.rank() == 0 && g.len() != 1 {
        vec![g.iter().copied().sum()]
    } else {
        g.to_vec()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<F: Float>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    F::of(0.5) * x * (F::one() + t)
}

fn gelu_grad<F: Float>(x: F) -> F {
    let k = F::of(GELU_K);
    let c = F::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let dt = (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * dt
}

fn softmax_rows<F: Float>(s: &mut [F], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

fn attention_backward<'a, F: Float>(
    q: &'a Tensor<F>,
    k: &'a Tensor<F>,
    v: &'a Tensor<F>,
    heads: usize,
    probs: &[F],
    g: &[F],
) -> Vec<(&'a Tensor<F>, Vec<F>)> {
    let (tq, d) = (q.shape()[0], q.shape()[1]);
    let tk = k.shape()[0];
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let (ld, ltk) = (d as isize, tk as isize);
    let mut gq = vec![F::zero(); q.numel()];
    let mut gk = vec![F::zero(); k.numel()];
    let mut gv = vec![F::zero(); v.numel()];
    let mut dp = vec![F::zero(); tq * tk];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * tq * tk..(h + 1) * tq * tk];
        // dP = dO @ V^T
        F::gemm(tq, dh, tk, F::one(), &g[off..], ld, 1, &v.data()[off..], 1, ld, F::zero(), &mut dp, ltk, 1);
        // dV = P^T @ dO
        F::gemm(tk, tq, dh, F::one(), p, 1, ltk, &g[off..], ld, 1, F::zero(), &mut gv[off..], ld, 1);
        // dS = P * (dP - rowsum(dP * P))
        for (prow, dprow) in p.chunks(tk).zip(dp.chunks_mut(tk)) {
            let dot: F = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
            for (dv, &pv) in dprow.iter_mut().zip(prow) {
                *dv = pv * (*dv - dot);
            }
        }
        F::gemm(tq, tk, dh, scale, &dp, ltk, 1, &k.data()[off..], ld, 1, F::zero(), &mut gq[off..], ld, 1);
        F::gemm(tk, tq, dh, scale, &dp, 1, ltk, &q.data()[off..], ld, 1, F::zero(), &mut gk[off..], ld, 1);
    }
    vec![(q, gq), (k, gk), (v, gv)]
}

impl<F: Float> Tensor<F> {
    fn record(shape: Vec<usize>, data: Vec<F>, inputs: &[&Tensor<F>], op: impl FnOnce() -> Op<F>) -> Self {
        let rg = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let op = if rg { Some(op()) } else { None };
        Tensor::build(shape, data, rg, op)
    }

    fn binary(&self, other: &Tensor<F>, name: &'static str, f: impl Fn(F, F) -> F) -> Result<(Vec<usize>, Vec<F>)> {
        check_finite(name, &[self, other])?;
        let shape = if self.shape() == other.shape() || other.rank() == 0 {
            self.shape().to_vec()
        } else if self.rank() == 0 {
            other.shape().to_vec()
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?} (only scalar broadcasting is supported)", self.shape(), other.shape()),
            ));
        };
        let data = (0..numel(&shape)).map(|i| f(at(self, i), at(other, i))).collect();
        Ok((shape, data))
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Self> {
        let (shape, data) = self.binary(other, "add", |a, b| a + b)?;
        Ok(Self::record(shape, data, &[self, other], || Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Self> {
        let (shape, data) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(Self::record(shape, data, &[self, other], || Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Self> {
        let (shape, data) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(Self::record(shape, data, &[self, other], || Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: F) -> Result<Self> {
        check_finite("scale", &[self])?;
        let data = self.data().iter().map(|&v| v * c).collect();
        Ok(Self::record(self.shape().to_vec(), data, &[self], || Op::Scale(self.clone(), c)))
    }

    /// `[m, n] + [n]`, adding `row` to every row.
    pub fn add_row(&self, row: &Tensor<F>) -> Result<Self> {
        check_finite("add_row", &[self, row])?;
        if self.rank() != 2 || row.shape() != [self.shape()[1]] {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.shape(), row.shape())));
        }
        let n = row.numel();
        let data = self
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(row.data()).map(|(&a, &b)| a + b))
            .collect();
        Ok(Self::record(self.shape().to_vec(), data, &[self, row], || {
            Op::AddRow(self.clone(), row.clone())
        }))
    }

    pub fn matmul(&self, other: &Tensor<F>) -> Result<Self> {
        check_finite("matmul", &[self, other])?;
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} @ {:?}", self.shape(), other.shape())));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut c = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), self.data(), k as isize, 1, other.data(), n as isize, 1, F::zero(), &mut c, n as isize, 1);
        Ok(Self::record(vec![m, n], c, &[self, other], || Op::MatMul(self.clone(), other.clone())))
    }

    /// `x @ w + b` for `x: [m, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&self, w: &Tensor<F>, b: &Tensor<F>) -> Result<Self> {
        self.matmul(w)?.add_row(b)
    }

    pub fn transpose(&self) -> Result<Self> {
        check_finite("transpose", &[self])?;
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {} (need 2)", self.rank())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        Ok(Self::record(vec![c, r], data, &[self], || Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_finite("reshape", &[self])?;
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        Ok(Self::record(shape.to_vec(), self.to_vec(), &[self], || Op::Reshape(self.clone())))
    }

    /// Rows `idx` of a `[n, d]` tensor (also serves as embedding lookup).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        check_finite("gather_rows", &[self])?;
        if self.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("rank {} (need 2)", self.rank())));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        Ok(Self::record(vec![idx.len(), d], data, &[self], || {
            Op::GatherRows(self.clone(), idx.to_vec())
        }))
    }

    pub fn embedding_lookup(&self, idx: &[usize]) -> Result<Self> {
        self.gather_rows(idx)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        check_finite("slice", &[self])?;
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Self::record(shape, data, &[self], || Op::Slice {
            x: self.clone(),
            axis,
            start,
        }))
    }

    pub fn concat(xs: &[Tensor<F>], axis: usize) -> Result<Self> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let refs: Vec<&Tensor<F>> = xs.iter().collect();
        check_finite("concat", &refs)?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.rank())));
        }
        for x in xs {
            let ok = x.rank() == first.rank()
                && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", x.shape(), first.shape()),
                ));
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for x in xs {
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Self::record(shape, data, &refs, || Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        check_finite("softmax", &[self])?;
        if axis >= self.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| o * n * inner + i * inner + j;
                let max = (0..n).map(|i| x[idx(i)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for i in 0..n {
                    let e = (x[idx(i)] - max).exp();
                    y[idx(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    y[idx(i)] /= z;
                }
            }
        }
        Ok(Self::record(self.shape().to_vec(), y, &[self], || Op::Softmax(self.clone(), axis)))
    }

    /// Affine layer normalization along `axis`; `gamma` and `beta` have
    /// length `shape[axis]`.
    pub fn layer_norm(&self, axis: usize, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Self> {
        check_finite("layer_norm", &[self, gamma, beta])?;
        if axis >= self.rank() {
            return Err(Error::shape("layer_norm", format!("axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for axis length {n}", gamma.shape(), beta.shape()),
            ));
        }
        let x = self.data();
        let (gam, bet) = (gamma.data(), beta.data());
        let nf = F::of(n as f64);
        let mut y = vec![F::zero(); x.len()];
        let mut xhat = vec![F::zero(); x.len()];
        let mut rstd = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| o * n * inner + i * inner + j;
                let mean = (0..n).map(|i| x[idx(i)]).sum::<F>() / nf;
                let var = (0..n).map(|i| (x[idx(i)] - mean).powi(2)).sum::<F>() / nf;
                let r = F::one() / (var + eps).sqrt();
                rstd[o * inner + j] = r;
                for i in 0..n {
                    let h = (x[idx(i)] - mean) * r;
                    xhat[idx(i)] = h;
                    y[idx(i)] = h * gam[i] + bet[i];
                }
            }
        }
        Ok(Self::record(self.shape().to_vec(), y, &[self, gamma, beta], || Op::LayerNorm {
            x: self.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            axis,
            xhat,
            rstd,
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Self> {
        check_finite("gelu", &[self])?;
        let data = self.data().iter().map(|&v| gelu(v)).collect();
        Ok(Self::record(self.shape().to_vec(), data, &[self], || Op::Gelu(self.clone())))
    }

    /// Multi-head `softmax(q k^T / sqrt(d_head)) v` for `q: [tq, d]`,
    /// `k, v: [tk, d]`; heads occupy contiguous column blocks.
    pub fn scaled_dot_attention(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, heads: usize) -> Result<Self> {
        check_finite("scaled_dot_attention", &[q, k, v])?;
        let ok = q.rank() == 2
            && k.rank() == 2
            && v.shape() == k.shape()
            && q.shape()[1] == k.shape()[1]
            && heads > 0
            && q.shape()[1].is_multiple_of(heads);
        if !ok {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("q {:?} k {:?} v {:?} heads {heads}", q.shape(), k.shape(), v.shape()),
            ));
        }
        let (tq, d) = (q.shape()[0], q.shape()[1]);
        let tk = k.shape()[0];
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let (ld, ltk) = (d as isize, tk as isize);
        let mut probs = vec![F::zero(); heads * tq * tk];
        let mut out = vec![F::zero(); tq * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            F::gemm(tq, dh, tk, scale, &q.data()[off..], ld, 1, &k.data()[off..], 1, ld, F::zero(), p, ltk, 1);
            softmax_rows(p, tk);
            F::gemm(tq, tk, dh, F::one(), p, ltk, 1, &v.data()[off..], ld, 1, F::zero(), &mut out[off..], ld, 1);
        }
        Ok(Self::record(vec![tq, d], out, &[q, k, v], || Op::Attention {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            heads,
            probs,
        }))
    }

    pub fn sum(&self) -> Result<Self> {
        check_finite("sum", &[self])?;
        let s = self.data().iter().copied().sum();
        Ok(Self::record(Vec::new(), vec![s], &[self], || Op::Sum(self.clone())))
    }

    pub fn mean(&self) -> Result<Self> {
        check_finite("mean", &[self])?;
        if self.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: F = self.data().iter().copied().sum();
        let m = s / F::of(self.numel() as f64);
        Ok(Self::record(Vec::new(), vec![m], &[self], || Op::Mean(self.clone())))
    }

    /// Elementwise Huber (smoothed L1) penalty with threshold `delta`.
    pub fn huber(&self, delta: F) -> Result<Self> {
        check_finite("huber", &[self])?;
        let data = self.data().iter().map(|&x| huber_elem(x, delta)).collect();
        Ok(Self::record(self.shape().to_vec(), data, &[self], || Op::Huber(self.clone(), delta)))
    }
}

/// `x^2 / 2` inside `|x| < delta`, `delta (|x| - delta / 2)` outside.
pub fn huber_elem<F: Float>(x: F, delta: F) -> F {
    let a = x.abs();
    if a < delta {
        F::of(0.5) * x * x
    } else {
        delta * (a - F::of(0.5) * delta)
    }
}
