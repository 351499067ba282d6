//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive application in topological order.
//! [`Graph::backward`] walks the record once in reverse and returns the
//! gradients; after that the graph is spent and refuses further use, so a
//! second backward pass is a reported contract violation rather than a
//! silently wrong result.

use crate::error::{numeric_err, shape_err, Error, Result};
use crate::linalg;
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Minimum magnitude of eigenvalue / squared-singular-value gaps in the
/// decomposition adjoints.
pub const GAP_CLAMP: f64 = 1e-4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum { x: Var, axis: usize },
    SumAll(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, axis: usize, idx: Vec<usize> },
    Clamp { x: Var, lo: f64, hi: f64 },
    PairwiseDist(Var),
    Norm(Var),
    SymEig(Var),
    Svd(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation; single owner, one backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    spent: bool,
    detached: Vec<Tensor>,
    replay: Option<std::collections::VecDeque<Tensor>>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for d in 0..r {
        let da = if d + a.len() >= r { a[d + a.len() - r] } else { 1 };
        let db = if d + b.len() >= r { b[d + b.len() - r] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[off + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

/// Visit `(out_offset, a_offset, b_offset)` for every output element.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        for o in 0..n {
            f(o, o, o);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let r = out.len();
    let mut idx = vec![0; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_gap(d: f64) -> f64 {
    if d.abs() >= GAP_CLAMP {
        d
    } else if d < 0.0 {
        -GAP_CLAMP
    } else {
        GAP_CLAMP
    }
}

/// Forward softmax along `axis` with max subtraction.
pub fn softmax_values(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(shape_err!("softmax axis {axis} out of range for rank {}", t.rank()));
    }
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                out[at(l)] = e;
                sum += e;
            }
            for l in 0..len {
                out[at(l)] /= sum;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph whose [`Graph::detach`] calls return `values` in order instead
    /// of the live values, so stopped gradients stay fixed across evaluations.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Graph {
            replay: Some(values.into()),
            ..Graph::default()
        }
    }

    /// Values produced by [`Graph::detach`], in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.spent {
            return Err(Error::Contract("graph already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(numeric_err!("non-finite result in {op:?}"));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that does not participate in differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Same value, cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let live = self.value(v).clone();
        let t = match self.replay.as_mut().and_then(|r| r.pop_front()) {
            Some(r) if r.shape() == live.shape() => r,
            _ => live,
        };
        self.detached.push(t.clone());
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let n = out_shape.iter().product();
        let mut out = vec![0.0; n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(xa[ia], xb[ib]));
        Tensor::new(out_shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Broadcasting Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x / y)?;
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = softmax_values(self.value(a), axis)?;
        self.push(v, Op::Softmax { x: a, axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(shape_err!("log_softmax axis {axis} out of range"));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|l| (x[at(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[at(l)] = x[at(l)] - lse;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(v, Op::LogSoftmax { x: a, axis }, &[a])
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(shape_err!("sum axis {axis} out of range"));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[o * len * inner + l * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Sum { x: a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape_err!("mean axis {axis} out of range"))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Population variance along `axis` (kept as length 1).
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let m = self.mean_axis(a, axis)?;
        let d = self.sub(a, m)?;
        let d2 = self.square(d)?;
        self.mean_axis(d2, axis)
    }

    /// Layer normalization over the last axis, without affine parameters.
    /// Variance is guarded by `ε = 1e-5`.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        let rows = t.numel() / n;
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(v, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} out of range"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(shape_err!("concat {:?} with {:?} on axis {axis}", first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let v = Tensor::new(oshape, out)?;
        self.push(v, Op::Slice { x: a, axis, start }, &[a])
    }

    /// Select (and possibly repeat or reorder) entries along `axis`.
    pub fn gather(&mut self, a: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || idx.is_empty() || idx.iter().any(|&i| i >= shape[axis]) {
            return Err(shape_err!("gather {idx:?} on axis {axis} of {shape:?}"));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &l in idx {
                let base = o * full * inner + l * inner;
                out.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = idx.len();
        let v = Tensor::new(oshape, out)?;
        self.push(
            v,
            Op::Gather {
                x: a,
                axis,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { x: a, lo, hi }, &[a])
    }

    /// Euclidean distance between every pair of rows; exact zero diagonal.
    pub fn pairwise_dist(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, d) = t.expect_matrix()?;
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in (i + 1)..n {
                let s: f64 = t
                    .row(i)
                    .iter()
                    .zip(t.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let r = s.sqrt();
                out.set(i, j, r);
                out.set(j, i, r);
            }
        }
        let _ = d;
        self.push(out, Op::PairwiseDist(a), &[a])
    }

    /// Frobenius norm; its gradient at the origin is taken as zero.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).frob_norm());
        self.push(v, Op::Norm(a), &[a])
    }

    /// Symmetric eigendecomposition as a graph node.
    ///
    /// Returns `(eigenvalues: 1×n ascending, eigenvectors: n×n columnwise)`.
    pub fn sym_eig(&mut self, a: Var) -> Result<(Var, Var)> {
        let (vals, vecs) = linalg::sym_eig(self.value(a))?;
        let n = vals.len();
        let mut data = vals;
        data.extend_from_slice(vecs.data());
        let combined = Tensor::new(vec![n + 1, n], data)?;
        let c = self.push(combined, Op::SymEig(a), &[a])?;
        let values = self.slice(c, 0, 0, 1)?;
        let vectors = self.slice(c, 0, 1, n)?;
        Ok((values, vectors))
    }

    /// SVD of a square matrix as a graph node: `(U, σ: 1×n, V)` with `A = U·diag(σ)·Vᵀ`.
    pub fn svd(&mut self, a: Var) -> Result<(Var, Var, Var)> {
        let (m, n) = self.value(a).expect_matrix()?;
        if m != n {
            return Err(shape_err!("differentiable svd needs a square matrix"));
        }
        let (u, s, vt) = linalg::svd_small(self.value(a))?;
        let v = vt.transpose()?;
        let mut data = s;
        data.extend_from_slice(u.data());
        data.extend_from_slice(v.data());
        let combined = Tensor::new(vec![2 * n + 1, n], data)?;
        let c = self.push(combined, Op::Svd(a), &[a])?;
        let sv = self.slice(c, 0, 0, 1)?;
        let uu = self.slice(c, 0, 1, n)?;
        let vv = self.slice(c, 0, n + 1, n)?;
        Ok((uu, sv, vv))
    }

    // Composites.

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.scale(x, -1.0)?;
        self.add_scalar(n, 1.0)
    }

    /// Rows scaled to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x)?;
        let last = self.shape(x).len() - 1;
        let s = self.sum_axis(sq, last)?;
        let s = self.add_scalar(s, 1e-24)?;
        let n = self.sqrt(s)?;
        self.div(x, n)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "mse shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let d = self.sub(a, b)?;
        let d2 = self.square(d)?;
        self.mean_all(d2)
    }

    /// Run the backward pass from a scalar. Consumes the recording: any later
    /// call on this graph returns a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::Contract(
                "backward called twice on the same graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_binary(
        &self,
        out_shape: &[usize],
        a: Var,
        b: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        da: impl Fn(f64, f64, f64) -> f64,
        db: impl Fn(f64, f64, f64) -> f64,
    ) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        if self.needs(a) {
            let mut ga = vec![0.0; xa.len()];
            for_each_broadcast(out_shape, sa, sb, |o, ia, ib| ga[ia] += da(g[o], xa[ia], xb[ib]));
            self.accumulate(grads, a, ga);
        }
        if self.needs(b) {
            let mut gb = vec![0.0; xb.len()];
            for_each_broadcast(out_shape, sa, sb, |o, ia, ib| gb[ib] += db(g[o], xa[ia], xb[ib]));
            self.accumulate(grads, b, gb);
        }
    }

    fn unary_grad(
        &self,
        x: Var,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, f64) -> f64,
    ) {
        if !self.needs(x) {
            return;
        }
        let xv = self.value(x).data();
        let yv = out.data();
        let c = (0..g.len()).map(|i| g[i] * f(xv[i], yv[i])).collect();
        self.accumulate(grads, x, c);
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let oshape = out.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.backprop_binary(oshape, a, b, g, grads, |g, _, _| g, |g, _, _| g)
            }
            &Op::Sub(a, b) => {
                self.backprop_binary(oshape, a, b, g, grads, |g, _, _| g, |g, _, _| -g)
            }
            &Op::Mul(a, b) => {
                self.backprop_binary(oshape, a, b, g, grads, |g, _, y| g * y, |g, x, _| g * x)
            }
            &Op::Div(a, b) => self.backprop_binary(
                oshape,
                a,
                b,
                g,
                grads,
                |g, _, y| g / y,
                |g, x, y| -g * x / (y * y),
            ),
            &Op::Scale(a, c) => self.accumulate(grads, a, g.iter().map(|x| x * c).collect()),
            &Op::AddScalar(a) | &Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            &Op::Matmul(a, b) => {
                let (m, k) = self.value(a).expect_matrix()?;
                let n = self.value(b).cols();
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, self.value(b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(self.value(a).data(), g, &mut gb, k, m, n);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Transpose(a) => {
                let gt = Tensor::new(oshape.to_vec(), g.to_vec())?.transpose()?;
                self.accumulate(grads, a, gt.into_data());
            }
            &Op::Sigmoid(a) => self.unary_grad(a, out, g, grads, |_, y| y * (1.0 - y)),
            &Op::Tanh(a) => self.unary_grad(a, out, g, grads, |_, y| 1.0 - y * y),
            &Op::Gelu(a) => self.unary_grad(a, out, g, grads, |x, _| gelu_grad(x)),
            &Op::Exp(a) => self.unary_grad(a, out, g, grads, |_, y| y),
            &Op::Log(a) => self.unary_grad(a, out, g, grads, |x, _| 1.0 / x),
            &Op::Sqrt(a) => self.unary_grad(a, out, g, grads, |_, y| 0.5 / y),
            &Op::Square(a) => self.unary_grad(a, out, g, grads, |x, _| 2.0 * x),
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(oshape, axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(oshape, axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let gs: f64 = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = g[at(l)] - y[at(l)].exp() * gs;
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Sum { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[o * len * inner + l * inner + i] = g[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::SumAll(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *oshape.last().unwrap();
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for k in 0..n {
                        gx[r * n + k] = inv * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(oshape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.needs(x) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(grads, x, gx);
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(x), axis);
                let len = oshape[axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, x, gx);
            }
            Op::Gather { x, axis, idx } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    for (p, &l) in idx.iter().enumerate() {
                        let dst = o * full * inner + l * inner;
                        let src = o * idx.len() * inner + p * inner;
                        for i in 0..inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            &Op::Clamp { x, lo, hi } => {
                self.unary_grad(x, out, g, grads, |v, _| if v >= lo && v <= hi { 1.0 } else { 0.0 })
            }
            &Op::PairwiseDist(x) => {
                let xv = self.value(x);
                let (n, d) = xv.expect_matrix()?;
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let r = out.at(i, j);
                        if i == j || r == 0.0 {
                            continue;
                        }
                        let w = (g[i * n + j] + g[j * n + i]) / r;
                        for k in 0..d {
                            gx[i * d + k] += w * (xv.at(i, k) - xv.at(j, k));
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Norm(x) => {
                let y = out.item();
                let c = if y > 0.0 {
                    self.value(x).data().iter().map(|v| g[0] * v / y).collect()
                } else {
                    vec![0.0; self.value(x).numel()]
                };
                self.accumulate(grads, x, c);
            }
            &Op::SymEig(x) => {
                let n = oshape[1];
                let vals = &out.data()[..n];
                let v = Tensor::new(vec![n, n], out.data()[n..].to_vec())?;
                let gv = Tensor::new(vec![n, n], g[n..].to_vec())?;
                let vt_gv = v.transpose()?.matmul(&gv)?;
                let mut inner = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..n {
                        let val = if i == j {
                            g[i]
                        } else {
                            vt_gv.at(i, j) / clamp_gap(vals[j] - vals[i])
                        };
                        inner.set(i, j, val);
                    }
                }
                let ga = v.matmul(&inner)?.matmul(&v.transpose()?)?;
                let sym = ga.zip_map(&ga.transpose()?, |a, b| 0.5 * (a + b))?;
                self.accumulate(grads, x, sym.into_data());
            }
            &Op::Svd(x) => {
                let n = oshape[1];
                let s = &out.data()[..n];
                let d = out.data();
                let u = Tensor::new(vec![n, n], d[n..n + n * n].to_vec())?;
                let v = Tensor::new(vec![n, n], d[n + n * n..].to_vec())?;
                let gu = Tensor::new(vec![n, n], g[n..n + n * n].to_vec())?;
                let gvv = Tensor::new(vec![n, n], g[n + n * n..].to_vec())?;
                let ut_gu = u.transpose()?.matmul(&gu)?;
                let vt_gv = v.transpose()?.matmul(&gvv)?;
                let mut inner = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..n {
                        let val = if i == j {
                            g[i]
                        } else {
                            let f = 1.0 / clamp_gap(s[j] * s[j] - s[i] * s[i]);
                            let jm = f * (ut_gu.at(i, j) - ut_gu.at(j, i));
                            let km = f * (vt_gv.at(i, j) - vt_gv.at(j, i));
                            jm * s[j] + s[i] * km
                        };
                        inner.set(i, j, val);
                    }
                }
                let ga = u.matmul(&inner)?.matmul(&v.transpose()?)?;
                self.accumulate(grads, x, ga.into_data());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 1.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = g.softmax(b, 0).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);

        let c = g.constant(t(&[2], &[0.3 + 7.0, -1.2 + 7.0]));
        let d = g.constant(t(&[2], &[0.3, -1.2]));
        let (sc, sd) = (g.softmax(c, 0).unwrap(), g.softmax(d, 0).unwrap());
        assert!(g.value(sc).max_abs_diff(g.value(sd)) < 1e-15);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.softmax(a, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_large_inputs_stay_normalized() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[4, 5], |i| (i as f64 * 37.0) % 2000.0 - 1000.0));
        let s = g.softmax(a, 1).unwrap();
        for r in 0..4 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn primitive_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.scalar_value(s), 0.5);

        let c = g.constant(Tensor::full(&[1, 6], 3.0));
        let ln = g.layer_norm(c).unwrap();
        assert!(g.value(ln).data().iter().all(|&x| x == 0.0));

        let a = g.constant(Tensor::from_fn(&[3, 3], |i| i as f64 - 4.0));
        let i = g.constant(Tensor::eye(3));
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let c = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcasting_rules() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let row = g.param(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let col = g.param(t(&[2, 1], &[1.0, 2.0]));
        let x = g.add(a, row).unwrap();
        let y = g.mul(x, col).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 21.0, 32.0, 26.0, 48.0, 70.0]);
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(row).unwrap().data(), &[3.0, 3.0, 3.0]);
        assert_eq!(grads.get(col).unwrap().data(), &[63.0, 72.0]);
    }

    #[test]
    fn second_backward_is_a_contract_violation() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.square(a).unwrap();
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 4.0);
        assert!(matches!(g.backward(b), Err(Error::Contract(_))));
        assert!(matches!(g.square(a), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let p = g.mul(a, c).unwrap();
        let grads = g.backward(p).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap().item(), 3.0);
    }

    #[test]
    fn pairwise_dist_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 1], &[0.0, 3.0, 4.0]));
        let r = g.pairwise_dist(x).unwrap();
        assert_eq!(
            g.value(r).data(),
            &[0.0, 3.0, 4.0, 3.0, 0.0, 1.0, 4.0, 1.0, 0.0]
        );
    }
}
