//! Tape-based reverse-mode differentiation over [`Tensor`] values.

use std::rc::Rc;

use super::params::{ParamId, ParameterStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    MaskedFill { x: Var, mask: Rc<Vec<bool>> },
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::AddBroadcast(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Transpose(a) | Op::Relu(a) | Op::Softmax(a) | Op::Sum(a) => vec![*a],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::MaskedFill { x, .. } | Op::SliceLast { x, .. } => vec![*x],
            Op::ConcatLast(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Split a 2D or 3D shape into (batch, rows, cols).
fn as_batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

fn batched_gemm(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * m * n);
    for p in 0..batch {
        let sa = &a[p * m * k..(p + 1) * m * k];
        let sb = &b[p * k * n..(p + 1) * k * n];
        out.extend(gemm(sa, sb, m, k, n, ta, tb));
    }
    out
}

fn transpose_last_two(t: &Tensor) -> Tensor {
    let (batch, r, c) = as_batched(t.shape()).expect("checked rank");
    let mut data = vec![0.0; t.len()];
    let src = t.data();
    for p in 0..batch {
        for i in 0..r {
            for j in 0..c {
                data[p * r * c + j * r + i] = src[p * r * c + i * c + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let k = shape.len();
    shape.swap(k - 1, k - 2);
    Tensor::new(shape, data).expect("same count")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let needs_grad = matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", ta, tb));
        }
        let period = tb.len();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % period]).collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(t, Op::AddBroadcast(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    /// Matrix product of 2D operands, or batchwise for 3D operands with equal batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((ba, m, k)), Some((bb, k2, n))) = (as_batched(ta.shape()), as_batched(tb.shape())) else {
            return Err(shape_err("matmul", ta, tb));
        };
        if ta.shape().len() != tb.shape().len() || ba != bb || k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let data = batched_gemm(ta.data(), tb.data(), ba, m, k, n, false, false);
        let shape = if ta.shape().len() == 2 { vec![m, n] } else { vec![ba, m, n] };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if as_batched(ta.shape()).is_none() {
            return Err(shape_err("transpose", ta, ta));
        }
        let t = transpose_last_two(ta);
        Ok(self.push(t, Op::Transpose(a)))
    }

    /// `x Wᵀ + b` over the last axis; `W` is `out × in`, `b` has length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let [out, inp] = *tw.shape() else {
            return Err(shape_err("linear", tx, tw));
        };
        if tx.last_dim() != inp || tx.shape().is_empty() {
            return Err(shape_err("linear", tx, tw));
        }
        if tb.shape() != [out] {
            return Err(shape_err("linear", tw, tb));
        }
        let rows = tx.rows();
        let mut data = gemm(tx.data(), tw.data(), rows, inp, out, false, true);
        for row in data.chunks_mut(out) {
            for (y, bias) in row.iter_mut().zip(tb.data()) {
                *y += bias;
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("nonempty") = out;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax(a))
    }

    /// Normalize each row of the last axis to zero mean and unit variance, then apply gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.last_dim();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut normed = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            normed.extend(row.iter().map(|v| (v - mean) * is));
        }
        let data = normed
            .iter()
            .enumerate()
            .map(|(i, v)| v * tg.data()[i % c] + tb.data()[i % c])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    /// Replace entries where `mask` is true by `value`; the mask covers the last two
    /// axes and repeats over the batch.
    pub fn masked_fill(&mut self, x: Var, mask: Rc<Vec<bool>>, value: f64) -> Result<Var> {
        let tx = self.value(x);
        let Some((_, r, c)) = as_batched(tx.shape()) else {
            return Err(shape_err("masked_fill", tx, tx));
        };
        if mask.len() != r * c {
            return Err(Error::Shape {
                op: "masked_fill",
                left: tx.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % (r * c)] { value } else { v })
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MaskedFill { x, mask }))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if start + len > c || tx.shape().is_empty() {
            return Err(Error::Shape {
                op: "slice_last",
                left: tx.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = tx.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("nonempty") = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start }))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::InvalidArgument("empty concat".into()))?);
        let lead = first.shape()[..first.shape().len() - 1].to_vec();
        let rows = first.rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.shape()[..t.shape().len() - 1] != lead[..] {
                return Err(shape_err("concat_last", first, t));
            }
            total += t.last_dim();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                let c = t.last_dim();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatLast(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(shape_err("mse", tp, tt));
        }
        let s: f64 = tp.data().iter().zip(tt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let v = s / tp.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target)))
    }

    /// Reverse sweep from a scalar `loss`. Overwrites all gradients in `store`:
    /// parameters not reached from `loss` end up with zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("backward called on a value not recorded in this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        store.zero_grads();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            let mut acc = |v: Var, t: Tensor| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.grad_mut(*id).add_assign(&g),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddBroadcast(a, b) => {
                    let tb = self.value(*b);
                    let period = tb.len();
                    let mut gb = Tensor::zeros(tb.shape());
                    for (i, v) in g.data().iter().enumerate() {
                        gb.data_mut()[i % period] += v;
                    }
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = Tensor::from_fn(ta.shape(), |i| g.data()[i] * tb.data()[i]);
                    let gb = Tensor::from_fn(tb.shape(), |i| g.data()[i] * ta.data()[i]);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (batch, m, k) = as_batched(ta.shape()).expect("recorded");
                    let (_, _, n) = as_batched(tb.shape()).expect("recorded");
                    let ga = batched_gemm(g.data(), tb.data(), batch, m, n, k, false, true);
                    let gb = batched_gemm(ta.data(), g.data(), batch, k, m, n, true, false);
                    acc(*a, Tensor::new(ta.shape().to_vec(), ga)?);
                    acc(*b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
                Op::Transpose(a) => acc(*a, transpose_last_two(&g)),
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (out, inp) = (tw.shape()[0], tw.shape()[1]);
                    let rows = tx.rows();
                    let gx = gemm(g.data(), tw.data(), rows, out, inp, false, false);
                    let gw = gemm(g.data(), tx.data(), out, rows, inp, true, false);
                    let mut gb = vec![0.0; out];
                    for row in g.data().chunks(out) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*x, Tensor::new(tx.shape().to_vec(), gx)?);
                    acc(*w, Tensor::new(vec![out, inp], gw)?);
                    acc(*b, Tensor::new(vec![out], gb)?);
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    acc(*a, Tensor::from_fn(ta.shape(), |i| if ta.data()[i] > 0.0 { g.data()[i] } else { 0.0 }));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for k in 0..c {
                            out[k] = yr[k] * (gr[k] - dot);
                        }
                    }
                    acc(*a, Tensor::new(y.shape().to_vec(), gx)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let tg = self.value(*gain);
                    let c = tg.len();
                    let mut gx = vec![0.0; normed.len()];
                    let mut gg = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    for (r, ((xr, gr), out)) in normed.chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for k in 0..c {
                            let d = gr[k] * tg.data()[k];
                            sum_d += d;
                            sum_dx += d * xr[k];
                            gg[k] += gr[k] * xr[k];
                            gbias[k] += gr[k];
                        }
                        let cf = c as f64;
                        for k in 0..c {
                            let d = gr[k] * tg.data()[k];
                            out[k] = inv_std[r] / cf * (cf * d - sum_d - xr[k] * sum_dx);
                        }
                    }
                    acc(*x, Tensor::new(node.value.shape().to_vec(), gx)?);
                    acc(*gain, Tensor::new(vec![c], gg)?);
                    acc(*bias, Tensor::new(vec![c], gbias)?);
                }
                Op::MaskedFill { x, mask } => {
                    let period = mask.len();
                    acc(*x, Tensor::from_fn(g.shape(), |i| if mask[i % period] { 0.0 } else { g.data()[i] }));
                }
                Op::SliceLast { x, start } => {
                    let tx = self.value(*x);
                    let (c, len) = (tx.last_dim(), g.last_dim());
                    let mut gx = Tensor::zeros(tx.shape());
                    for (dst, src) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                        dst[*start..*start + len].copy_from_slice(src);
                    }
                    acc(*x, gx);
                }
                Op::ConcatLast(parts) => {
                    let total = g.last_dim();
                    let mut offset = 0;
                    for p in parts {
                        let tp = self.value(*p);
                        let c = tp.last_dim();
                        let data = g.data().chunks(total).flat_map(|row| row[offset..offset + c].iter().copied()).collect();
                        acc(*p, Tensor::new(tp.shape().to_vec(), data)?);
                        offset += c;
                    }
                }
                Op::Sum(a) => {
                    let s = g.item();
                    acc(*a, Tensor::filled(self.value(*a).shape(), s));
                }
                Op::Mse(p, t) => {
                    let (tp, tt) = (self.value(*p), self.value(*t));
                    let f = 2.0 * g.item() / tp.len() as f64;
                    let gp = Tensor::from_fn(tp.shape(), |i| f * (tp.data()[i] - tt.data()[i]));
                    let gt = gp.map(|v| -v);
                    acc(*p, gp);
                    acc(*t, gt);
                }
            }
        }
        Ok(())
    }
}
