//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of a forward pass together with its
//! value. [`Graph::backward`] replays the tape in reverse and accumulates
//! gradients into the [`ParamGroup`] the parameter leaves came from.

use crate::error::{Error, Result};
use crate::optim::{ParamGroup, ParamId};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast { a: Var, b: Var },
    MulScalarVar { x: Var, s: Var },
    Scale { x: Var, c: f64 },
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Transpose(Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    Reduce { x: Var, axis: usize, mean: bool },
    SumAll(Var),
    MeanAll(Var),
    Pick { x: Var, index: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

// c[m,n] += a[m,k] * b[k,n]
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// c[m,n] += a[k,m]^T * b[k,n]
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes `data` laid out as `shape` so that output axis `i` is input axis `axes[i]`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, group: &ParamGroup, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(group.value(id).clone(), Op::Param(id));
        self.param_vars.push((id, v));
        v
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    /// Batched product `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || (!trans_b && sa[2] != sb[1])
            || (trans_b && sa[2] != sb[2]);
        if bad {
            return Err(dim_err(format!(
                "batched matmul of {sa:?} and {sb:?} (transpose_b={trans_b})"
            )));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let aa = &ad[i * m * k..(i + 1) * m * k];
            let bb = &bd[i * k * n..(i + 1) * k * n];
            let cc = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt_acc(aa, bb, cc, m, k, n);
            } else {
                mm_acc(aa, bb, cc, m, k, n);
            }
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(t, Op::Bmm { a, b, trans_b }))
    }

    /// `x W + b` over the last dimension of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = sx.last().copied().unwrap_or(0);
        if sw.len() != 2 || sw[0] != din || din == 0 {
            return Err(dim_err(format!("linear of {sx:?} with weight {sw:?}")));
        }
        let dout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err(format!(
                    "linear bias {:?} for output width {dout}",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        mm_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, din, dout);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in out.chunks_mut(dout) {
                for (o, bv) in r.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bd = self.value(b).data();
        let nb = bd.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(t, Op::AddBroadcast { a, b }))
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err(format!("scalar factor has shape {:?}", self.shape(s))));
        }
        let sv = self.scalar(s);
        let t = self.value(x).map(|v| v * sv);
        Ok(self.push(t, Op::MulScalarVar { x, s }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Log(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d == 0 {
            return Err(dim_err("softmax over an empty axis".into()));
        }
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            out.extend(crate::tensor::softmax_slice(row));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Softmax along `axis` of a rank-2 tensor.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        match (self.shape(x).len(), axis) {
            (2, 1) | (1, 0) => self.softmax(x),
            (2, 0) => {
                let t = self.transpose(x)?;
                let s = self.softmax(t)?;
                self.transpose(s)
            }
            (r, a) => Err(dim_err(format!("softmax axis {a} on rank {r}"))),
        }
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d == 0 {
            return Err(dim_err("log-softmax over an empty axis".into()));
        }
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(x)))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d == 0 || tx.rank() == 0 {
            return Err(dim_err("layer norm over an empty axis".into()));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err(format!(
                "layer norm gain {:?} / bias {:?} for width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.numel() / d;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d.max(1)) {
            let n = crate::tensor::l2_norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "cannot normalize a row with norm {n}"
                )));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::L2Normalize { x, norms }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(dim_err(format!("transpose of {:?}", self.shape(x))));
        }
        let (shape, data) = permute_data(self.value(x).data(), self.shape(x), &[1, 0]);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(dim_err(format!("permutation {axes:?} for shape {shape:?}")));
        }
        let (shape, data) = permute_data(self.value(x).data(), shape, axes);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let total = tx.shape().first().copied().unwrap_or(0);
        if start + len > total {
            return Err(Error::Capacity(format!(
                "rows {start}..{} requested from {total}",
                start + len
            )));
        }
        let inner = if total == 0 { 0 } else { tx.numel() / total };
        let data = tx.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = tx.shape().to_vec();
        shape[0] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| dim_err("concatenation of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != *tail {
                return Err(dim_err(format!("concatenating {s:?} with rows of {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(xs.to_vec())))
    }

    /// Selects rows along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let total = tx.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = index.iter().find(|&&i| i >= total) {
            return Err(Error::Range(format!("row {bad} of {total}")));
        }
        let inner = if total == 0 { 0 } else { tx.numel() / total };
        let mut data = Vec::with_capacity(index.len() * inner);
        for &i in index {
            data.extend_from_slice(&tx.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(dim_err(format!("reduce axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Reduce { x, axis, mean }))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(dim_err("mean of an empty tensor".into()));
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x)))
    }

    /// `out[i] = x[i, index[i]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != index.len() {
            return Err(dim_err(format!("pick {} entries from {s:?}", index.len())));
        }
        let k = s[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(Error::Range(format!("class {bad} of {k}")));
        }
        let d = self.value(x).data();
        let data = index.iter().enumerate().map(|(r, &c)| d[r * k + c]).collect();
        let t = Tensor::new(vec![index.len()], data)?;
        Ok(self.push(
            t,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Back-propagates from the single-element node `loss`, accumulating
    /// gradients of every parameter leaf into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamGroup) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads, params)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamGroup,
    ) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => params.accumulate_grad(*id, g)?,
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |da| mm_nt_acc(g, tb.data(), da, m, n, k));
                acc(*b, &mut |db| mm_tn_acc(ta.data(), g, db, m, k, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (ta.data(), tb.data());
                acc(*a, &mut |da| {
                    for i in 0..batch {
                        let gg = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bd[i * k * n..(i + 1) * k * n];
                        let dd = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // b is [n,k]: dA = dC b
                            mm_acc(gg, bb, dd, m, n, k);
                        } else {
                            // b is [k,n]: dA = dC b^T
                            mm_nt_acc(gg, bb, dd, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..batch {
                        let gg = &g[i * m * n..(i + 1) * m * n];
                        let aa = &ad[i * m * k..(i + 1) * m * k];
                        let dd = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = dC^T a
                            mm_tn_acc(gg, aa, dd, m, n, k);
                        } else {
                            // dB[k,n] = a^T dC
                            mm_tn_acc(aa, gg, dd, m, k, n);
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (din, dout) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / din;
                acc(*x, &mut |dx| mm_nt_acc(g, tw.data(), dx, rows, dout, din));
                acc(*w, &mut |dw| mm_tn_acc(tx.data(), g, dw, rows, din, dout));
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for r in g.chunks(dout) {
                            for (d, v) in db.iter_mut().zip(r) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for ((x, gv), bv) in d.iter_mut().zip(g).zip(tb.data()) {
                        *x += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gv), av) in d.iter_mut().zip(g).zip(ta.data()) {
                        *x += gv * av;
                    }
                });
            }
            Op::AddBroadcast { a, b } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| {
                    let nb = d.len();
                    for (i, gv) in g.iter().enumerate() {
                        d[i % nb] += gv;
                    }
                });
            }
            Op::MulScalarVar { x, s } => {
                let sv = self.scalar(*s);
                let tx = self.value(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b * sv));
                acc(*s, &mut |d| {
                    d[0] += g.iter().zip(tx.data()).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::Scale { x, c } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b * c));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((a, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *a += gv * yv;
                    }
                });
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |d| {
                    for ((a, gv), xv) in d.iter_mut().zip(g).zip(tx.data()) {
                        *a += gv / xv;
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |d| {
                    for ((a, gv), xv) in d.iter_mut().zip(g).zip(tx.data()) {
                        *a += gv * gelu_grad(*xv);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let k = y.last_dim();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.data().chunks(k)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let k = y.last_dim();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.data().chunks(k)) {
                        let s: f64 = gr.iter().sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += gv - yv.exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = self.value(*gain).data();
                let d = gd.len();
                acc(*gain, &mut |dg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, gv), hv) in dg.iter_mut().zip(gr).zip(hr) {
                            *a += gv * hv;
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
                acc(*x, &mut |dx| {
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, dhv), hv) in dr.iter_mut().zip(&dh).zip(hr) {
                            *o += rstd[r] * (dhv - m1 - hv * m2);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let d = y.last_dim();
                acc(*x, &mut |dx| {
                    for (r, ((dr, gr), yr)) in dx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(y.data().chunks(d))
                        .enumerate()
                    {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *o += (gv - yv * s) / norms[r];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (_, back) = permute_data(g, node.value.shape(), &[1, 0]);
                acc(*x, &mut |d| d.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inverse);
                acc(*x, &mut |d| d.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::SliceRows { x, start } => {
                let rows = node.value.shape()[0];
                let inner = if rows == 0 { 0 } else { g.len() / rows };
                let off = start * inner;
                acc(*x, &mut |d| {
                    d[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).numel();
                    let part = &g[off..off + n];
                    acc(v, &mut |d| d.iter_mut().zip(part).for_each(|(a, b)| *a += b));
                    off += n;
                }
            }
            Op::GatherRows { x, index } => {
                let inner = if index.is_empty() { 0 } else { g.len() / index.len() };
                acc(*x, &mut |d| {
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..inner {
                            d[src * inner + j] += g[r * inner + j];
                        }
                    }
                });
            }
            Op::Reduce { x, axis, mean } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let f = if *mean { 1.0 / n as f64 } else { 1.0 };
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                d[base + i] += g[o * inner + i] * f;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::Pick { x, index } => {
                let k = self.shape(*x)[1];
                acc(*x, &mut |d| {
                    for (r, &c) in index.iter().enumerate() {
                        d[r * k + c] += g[r];
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group_with(values: Vec<(&str, Tensor)>) -> (ParamGroup, Vec<ParamId>) {
        let mut g = ParamGroup::new();
        let ids = values
            .into_iter()
            .map(|(n, t)| g.insert(n, t, 1.0, false).unwrap())
            .collect();
        (g, ids)
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let gain = g.constant(Tensor::filled(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::vector(vec![-1.0, 1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(g.value(y).max_abs_diff(&Tensor::vector(vec![-1.0, 1.0])) < 1e-9);

        let empty = g.constant(Tensor::zeros(&[2, 0]));
        let e0 = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(
            g.layer_norm(empty, e0, e0, 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);

        let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap());
        let cols = g.softmax_axis(m, 0).unwrap();
        let v = g.value(cols).data();
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12 && (v[1] + v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_and_identity_linear() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let y = g.gelu(z);
        assert_eq!(g.value(y).data(), &[0.0]);

        let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        let w = g.constant(Tensor::eye(3));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[k][i][j] == in[i][j][k]
        assert_eq!(g.value(p).data()[1 * 6 + 0 * 3 + 2], data[0 * 12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn accumulates_shared_param_uses() {
        let (mut params, ids) = group_with(vec![("w", Tensor::vector(vec![3.0]))]);
        let mut g = Graph::new();
        let w = g.param(&params, ids[0]);
        let w2 = g.param(&params, ids[0]);
        assert_eq!(w, w2);
        let sq = g.mul(w, w2).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad(ids[0]).unwrap().data(), &[6.0]);
        // accumulation is additive until cleared
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad(ids[0]).unwrap().data(), &[12.0]);
        params.zero_grad();
        assert!(params.grad(ids[0]).is_none());
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.l2_normalize(x), Err(Error::DegenerateInput(_))));
    }
}
