//! Differentiable operations and their backward rules.

use super::{gemm, MatMut, MatRef, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// A user-defined differentiable operation, for fused kernels that live
/// outside this module (e.g. detection losses).
pub trait Function: Send + Sync {
    /// Gradient contribution for each input, in input order. `None` means no
    /// gradient flows to that input.
    fn backward(&self, inputs: &[Tensor], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddBias(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Gelu(Tensor),
    Sigmoid(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    TileRows(Tensor),
    Concat(Vec<Tensor>, usize),
    Slice {
        input: Tensor,
        axis: usize,
        start: usize,
    },
    Sum(Tensor),
    Mean(Tensor),
    Softmax(Tensor, usize),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Tensor>,
        func: Box<dyn Function>,
    },
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::TileRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a, _) => vec![a.clone()],
            Op::Slice { input, .. } => vec![input.clone()],
            Op::Concat(parts, _) => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![x.clone(), gamma.clone(), beta.clone()],
            Op::Attention { q, k, v, .. } => vec![q.clone(), k.clone(), v.clone()],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Propagates `grad` (w.r.t. this node's output `out`) to the parents.
    pub(crate) fn backward(
        &self,
        out: &[f64],
        out_shape: &[usize],
        grad: &[f64],
        emit: &mut dyn FnMut(&Tensor, Vec<f64>),
    ) {
        match self {
            Op::Add(a, b) => {
                emit(a, grad.to_vec());
                emit(b, grad.to_vec());
            }
            Op::Sub(a, b) => {
                emit(a, grad.to_vec());
                emit(b, grad.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.data();
                    emit(a, grad.iter().zip(bd.iter()).map(|(g, y)| g * y).collect());
                }
                if b.requires_grad() {
                    let ad = a.data();
                    emit(b, grad.iter().zip(ad.iter()).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddBias(a, b) => {
                emit(a, grad.to_vec());
                if b.requires_grad() {
                    let n = b.numel();
                    let mut gb = vec![0.0; n];
                    for row in grad.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(acc, g)| *acc += g);
                    }
                    emit(b, gb);
                }
            }
            Op::Scale(a, s) => emit(a, grad.iter().map(|g| g * s).collect()),
            Op::Relu(a) => {
                let ad = a.data();
                emit(
                    a,
                    grad.iter()
                        .zip(ad.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let ad = a.data();
                emit(a, grad.iter().zip(ad.iter()).map(|(g, x)| g * gelu_grad(*x)).collect());
            }
            Op::Sigmoid(a) => {
                emit(a, grad.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = a.dims2().expect("matmul lhs");
                let n = b.shape()[1];
                let gv = MatRef::dense(grad, m, n);
                if a.requires_grad() {
                    let bd = b.data();
                    let mut ga = vec![0.0; m * k];
                    gemm(1.0, gv, MatRef::dense(&bd, k, n).t(), 0.0, MatMut::dense(&mut ga, k));
                    drop(bd);
                    emit(a, ga);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut gb = vec![0.0; k * n];
                    gemm(1.0, MatRef::dense(&ad, m, k).t(), gv, 0.0, MatMut::dense(&mut gb, n));
                    drop(ad);
                    emit(b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                // out is r x c, input is c x r
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = grad[i * c + j];
                    }
                }
                emit(a, ga);
            }
            Op::Reshape(a) => emit(a, grad.to_vec()),
            Op::TileRows(a) => {
                let n = a.numel();
                let mut ga = vec![0.0; n];
                for block in grad.chunks_exact(n) {
                    ga.iter_mut().zip(block).for_each(|(acc, g)| *acc += g);
                }
                emit(a, ga);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = p.shape()[*axis];
                    if p.requires_grad() {
                        let mut gp = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&grad[base..base + len * inner]);
                        }
                        emit(p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, total, inner) = split_axis(input.shape(), *axis);
                let len = out_shape[*axis];
                let mut gi = vec![0.0; input.numel()];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
                }
                emit(input, gi);
            }
            Op::Sum(a) => emit(a, vec![grad[0]; a.numel()]),
            Op::Mean(a) => {
                let n = a.numel();
                emit(a, vec![grad[0] / n as f64; n]);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut ga = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + i;
                        let dot: f64 = (0..len).map(|t| grad[idx(t)] * out[idx(t)]).sum();
                        for t in 0..len {
                            ga[idx(t)] = out[idx(t)] * (grad[idx(t)] - dot);
                        }
                    }
                }
                emit(a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *out_shape.last().expect("layer norm shape");
                let gd = gamma.data();
                if x.requires_grad() {
                    let mut gx = vec![0.0; out.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let g = &grad[row.clone()];
                        let xh = &xhat[row.clone()];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = g[j] * gd[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            gx[r * c + j] = rs * (g[j] * gd[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    emit(x, gx);
                }
                drop(gd);
                if gamma.requires_grad() {
                    let mut gg = vec![0.0; c];
                    for (row_g, row_x) in grad.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += row_g[j] * row_x[j];
                        }
                    }
                    emit(gamma, gg);
                }
                if beta.requires_grad() {
                    let mut gb = vec![0.0; c];
                    for row_g in grad.chunks_exact(c) {
                        gb.iter_mut().zip(row_g).for_each(|(acc, g)| *acc += g);
                    }
                    emit(beta, gb);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(q, k, v, *batch, *heads, probs, grad);
                emit(q, gq);
                emit(k, gk);
                emit(v, gv);
            }
            Op::Custom { inputs, func } => {
                for (input, g) in inputs.iter().zip(func.backward(inputs, out, grad)) {
                    if let Some(g) = g {
                        emit(input, g);
                    }
                }
            }
        }
    }
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let a = self.data();
        let b = other.data();
        a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|x| f(*x)).collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.zip_with(other, |x, y| x + y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.zip_with(other, |x, y| x - y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.zip_with(other, |x, y| x * y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    /// Adds a vector along the last axis of every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().expect("non-empty shape");
        if bias.numel() != c {
            return Err(Error::dim("add_bias", self.shape(), bias.shape()));
        }
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for row in data.chunks_exact_mut(c) {
                row.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
            }
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::AddBias(self.clone(), bias.clone())))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_op(self.map(|x| x * s), self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(self.map(|x| x.max(0.0)), self.shape().to_vec(), Op::Relu(self.clone()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        Tensor::from_op(self.map(gelu), self.shape().to_vec(), Op::Gelu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        Tensor::from_op(self.map(sigmoid), self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape() {
            [m, k] => (*m, *k),
            _ => return Err(Error::dim("matmul", self.shape(), other.shape())),
        };
        let n = match other.shape() {
            [k2, n] if *k2 == k => *n,
            _ => return Err(Error::dim("matmul", self.shape(), other.shape())),
        };
        let mut out = vec![0.0; m * n];
        {
            let a = self.data();
            let b = other.data();
            gemm(
                1.0,
                MatRef::dense(&a, m, k),
                MatRef::dense(&b, k, n),
                0.0,
                MatMut::dense(&mut out, n),
            );
        }
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMul(self.clone(), other.clone())))
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let a = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        drop(a);
        Ok(Tensor::from_op(out, vec![c, r], Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Stacks `times` copies along axis 0.
    pub fn tile_rows(&self, times: usize) -> Result<Tensor> {
        if times == 0 {
            return Err(Error::contract("tile_rows: times must be positive"));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            out.extend_from_slice(&src);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[0] *= times;
        Ok(Tensor::from_op(out, shape, Op::TileRows(self.clone())))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::dim("concat", first.shape(), &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let ok = p.shape().len() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", first.shape(), p.shape()));
            }
            total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (p, g) in parts.iter().zip(&guards) {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&g[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(guards);
        Ok(Tensor::from_op(out, shape, Op::Concat(parts.to_vec(), axis)))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape().len() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::dim("slice", self.shape(), &[axis, start, len]));
        }
        let (outer, total, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Slice {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.shape().len() || sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::dim("split", self.shape(), sizes));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let t = self.slice(axis, start, len);
                start += len;
                t
            })
            .collect()
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s / self.numel() as f64], vec![1], Op::Mean(self.clone()))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::dim("softmax", self.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| x[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for t in 0..len {
                    let e = (x[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    z += e;
                }
                for t in 0..len {
                    out[idx(t)] /= z;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Softmax(self.clone(), axis)))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let c = *self.shape().last().expect("non-empty shape");
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::dim("layer_norm", self.shape(), gamma.shape()));
        }
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let rows = x.len() / c;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        drop((x, g, b));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `(batch * n_q) x c`, `k` and `v` are `(batch * n_k) x c`; rows
    /// of each batch item are contiguous. Head `h` attends over columns
    /// `h*d..(h+1)*d` with `d = c / heads`.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, batch: usize, heads: usize) -> Result<Tensor> {
        let dims = attention_dims(q, k, v, batch, heads)?;
        let (out, probs) = {
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            attention_forward(&qd, &kd, &vd, dims)
        };
        Ok(Tensor::from_op(
            out,
            q.shape().to_vec(),
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                batch,
                heads,
                probs,
            },
        ))
    }

    /// Attention weights `[batch][head][n_q][n_k]` without building a graph.
    pub fn attention_weights(q: &Tensor, k: &Tensor, batch: usize, heads: usize) -> Result<Vec<f64>> {
        let dims = attention_dims(q, k, k, batch, heads)?;
        let (qd, kd) = (q.data(), k.data());
        Ok(attention_probs(&qd, &kd, dims))
    }
}

#[derive(Clone, Copy)]
struct AttnDims {
    batch: usize,
    heads: usize,
    nq: usize,
    nk: usize,
    c: usize,
    d: usize,
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, batch: usize, heads: usize) -> Result<AttnDims> {
    let (rq, c) = q.dims2()?;
    let (rk, ck) = k.dims2()?;
    if ck != c || k.shape() != v.shape() {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    }
    if batch == 0 || heads == 0 || c % heads != 0 || rq % batch != 0 || rk % batch != 0 {
        return Err(Error::contract(format!(
            "attention: {c} columns, {heads} heads, batch {batch} do not tile {:?} / {:?}",
            q.shape(),
            k.shape()
        )));
    }
    Ok(AttnDims {
        batch,
        heads,
        nq: rq / batch,
        nk: rk / batch,
        c,
        d: c / heads,
    })
}

fn softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

fn attention_probs(q: &[f64], k: &[f64], dm: AttnDims) -> Vec<f64> {
    let AttnDims {
        batch,
        heads,
        nq,
        nk,
        c,
        d,
    } = dm;
    let scale = 1.0 / (d as f64).sqrt();
    let block = nq * nk;
    let mut probs = vec![0.0; batch * heads * block];
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * block..(b * heads + h + 1) * block];
            gemm(
                scale,
                MatRef::block(q, c, b * nq, h * d, nq, d),
                MatRef::block(k, c, b * nk, h * d, nk, d).t(),
                0.0,
                MatMut::dense(p, nk),
            );
            softmax_rows(p, nk);
        }
    }
    probs
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], dm: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let probs = attention_probs(q, k, dm);
    let AttnDims {
        batch,
        heads,
        nq,
        nk,
        c,
        d,
    } = dm;
    let block = nq * nk;
    let mut out = vec![0.0; batch * nq * c];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * block..(b * heads + h + 1) * block];
            gemm(
                1.0,
                MatRef::dense(p, nq, nk),
                MatRef::block(v, c, b * nk, h * d, nk, d),
                0.0,
                MatMut::block(&mut out, c, b * nq, h * d),
            );
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    batch: usize,
    heads: usize,
    probs: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dm = attention_dims(q, k, v, batch, heads).expect("attention dims validated in forward");
    let AttnDims { nq, nk, c, d, .. } = dm;
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let block = nq * nk;
    let mut ds = vec![0.0; block];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * block..(b * heads + h + 1) * block];
            let go = MatRef::block(grad, c, b * nq, h * d, nq, d);
            // dV = P^T dO
            gemm(
                1.0,
                MatRef::dense(p, nq, nk).t(),
                go,
                0.0,
                MatMut::block(&mut gv, c, b * nk, h * d),
            );
            // dP = dO V^T, then through the row softmax
            gemm(
                1.0,
                go,
                MatRef::block(&vd, c, b * nk, h * d, nk, d).t(),
                0.0,
                MatMut::dense(&mut ds, nk),
            );
            for (drow, prow) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (dv, pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            gemm(
                scale,
                MatRef::dense(&ds, nq, nk),
                MatRef::block(&kd, c, b * nk, h * d, nk, d),
                0.0,
                MatMut::block(&mut gq, c, b * nq, h * d),
            );
            gemm(
                scale,
                MatRef::dense(&ds, nq, nk).t(),
                MatRef::block(&qd, c, b * nq, h * d, nq, d),
                0.0,
                MatMut::block(&mut gk, c, b * nk, h * d),
            );
        }
    }
    (gq, gk, gv)
}
