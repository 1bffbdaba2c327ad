//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape; because a node can only refer
//! to earlier nodes, tape order is a topological order and the backward pass
//! is a single reverse sweep. Broadcasting is limited to trailing-dimension
//! expansion: the right operand of a binary op must have a shape equal to a
//! suffix of the left operand's shape (a scalar is the empty suffix).

use super::tensor::{gemm, gemm_strided};
use super::{MathError, Tensor};

/// Handle to a node on a [`Graph`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Prelu(Var, Var),
    Sigmoid(Var),
    SoftmaxLast(Var),
    LayerNormLast { x: Var, inv_std: Vec<f64> },
    BatchNorm { x: Var, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    Sum(Var),
    SumLast(Var),
    ExpandLast(Var),
    SumAxis1(Var),
    ExpandAxis1(Var),
    SliceLast { x: Var, start: usize },
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// A computation tape. Parameters are leaves created with [`Graph::param`];
/// inputs that never need gradients are created with [`Graph::constant`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn shape_err(op: &'static str, detail: String) -> MathError {
    MathError::Shape { op, detail }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, MathError> {
        if !value.is_finite() {
            return Err(MathError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Drops every node created after the first `len`; earlier `Var`s stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Batch mean and (biased) variance recorded by a [`Graph::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        let m = av.outer_len();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), bv.data(), &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), needs)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>, MathError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !is_suffix(av.shape(), bv.shape()) {
            return Err(shape_err(name, format!("{:?} with {:?}", av.shape(), bv.shape())));
        }
        let nb = bv.len().max(1);
        let mut out = Vec::with_capacity(av.len());
        for chunk in av.data().chunks_exact(nb) {
            out.extend(chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)));
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out)?, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, MathError> {
        let value = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, s), needs)
    }

    /// Parametric ReLU with a single learned slope `alpha` (one element).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var, MathError> {
        if self.value(alpha).len() != 1 {
            return Err(shape_err("prelu", format!("alpha shape {:?}", self.value(alpha).shape())));
        }
        let al = self.value(alpha).item();
        let value = self.value(x).map(|v| if v > 0.0 { v } else { al * v });
        let needs = self.needs(x) || self.needs(alpha);
        self.push(value, Op::Prelu(x, alpha), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, MathError> {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var, MathError> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxLast(x), needs)
    }

    /// Normalises each trailing-dimension row to zero mean and unit (biased) variance.
    pub fn layer_norm_last(&mut self, x: Var, eps: f64) -> Result<Var, MathError> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if c == 0 {
            return Err(shape_err("layer_norm", "empty trailing dimension".into()));
        }
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.outer_len());
        for row in out.chunks_exact_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(value, Op::LayerNormLast { x, inv_std }, needs)
    }

    /// Normalises each column of a 2-D tensor with statistics over its rows.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<Var, MathError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.shape()[0] == 0 {
            return Err(shape_err("batch_norm", format!("{:?}", xv.shape())));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xv.data().chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        for row in xv.data().chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let needs = self.needs(x);
        self.push(value, Op::BatchNorm { x, inv_std, mean, var }, needs)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, MathError> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, MathError> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over the trailing dimension, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, MathError> {
        let xv = self.value(x);
        if xv.shape().is_empty() {
            return Err(shape_err("sum_last", "scalar input".into()));
        }
        let c = xv.last_dim();
        let out: Vec<f64> = xv.data().chunks_exact(c.max(1)).map(|r| r.iter().sum()).collect();
        let shape = xv.shape()[..xv.shape().len() - 1].to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out)?, Op::SumLast(x), needs)
    }

    /// Appends a trailing dimension of size `n` by repetition.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Result<Var, MathError> {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * n);
        for &v in xv.data() {
            out.extend(std::iter::repeat(v).take(n));
        }
        let mut shape = xv.shape().to_vec();
        shape.push(n);
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out)?, Op::ExpandLast(x), needs)
    }

    /// `[B, S, m] -> [B, m]` by summing over the middle axis.
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var, MathError> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(shape_err("sum_axis1", format!("{:?}", xv.shape())));
        }
        let (b, s, m) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; b * m];
        for bi in 0..b {
            let dst = &mut out[bi * m..(bi + 1) * m];
            for si in 0..s {
                let src = &xv.data()[(bi * s + si) * m..(bi * s + si + 1) * m];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, m], out)?, Op::SumAxis1(x), needs)
    }

    /// `[B, m] -> [B, S, m]` by repeating each row `s` times.
    pub fn expand_axis1(&mut self, x: Var, s: usize) -> Result<Var, MathError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err("expand_axis1", format!("{:?}", xv.shape())));
        }
        let (b, m) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(b * s * m);
        for row in xv.data().chunks_exact(m.max(1)) {
            for _ in 0..s {
                out.extend_from_slice(row);
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, s, m], out)?, Op::ExpandAxis1(x), needs)
    }

    /// Columns `start..end` of the trailing dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var, MathError> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if start > end || end > c || xv.shape().is_empty() {
            return Err(shape_err("slice_last", format!("{start}..{end} of {:?}", xv.shape())));
        }
        let mut out = Vec::with_capacity(xv.outer_len() * (end - start));
        for row in xv.data().chunks_exact(c.max(1)) {
            out.extend_from_slice(&row[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, MathError> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Multi-head scaled dot-product attention within groups.
    ///
    /// `q`, `k`, `v` are `[G, S, m]`; each of the `G` groups attends over its own
    /// `S` positions only. `m` must be divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, MathError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape().len() != 3 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err(
                "attention",
                format!("{:?} {:?} {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (g, s, m) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if heads == 0 || m % heads != 0 {
            return Err(shape_err("attention", format!("width {m} not divisible by {heads} heads")));
        }
        let dh = m / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; g * heads * s * s];
        let mut out = vec![0.0; g * s * m];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for gi in 0..g {
            let base = gi * s * m;
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(gi * heads + h) * s * s..(gi * heads + h + 1) * s * s];
                for i in 0..s {
                    let qi = &qd[base + i * m + off..base + i * m + off + dh];
                    let row = &mut p[i * s..(i + 1) * s];
                    for j in 0..s {
                        let kj = &kd[base + j * m + off..base + j * m + off + dh];
                        row[j] = scale * dot(qi, kj);
                    }
                    softmax_in_place(row);
                    let oi = &mut out[base + i * m + off..base + i * m + off + dh];
                    for j in 0..s {
                        let w = row[j];
                        let vj = &vd[base + j * m + off..base + j * m + off + dh];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Tensor::new(vec![g, s, m], out)?, Op::Attention { q, k, v, heads, probs }, needs)
    }

    /// Runs the backward pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), MathError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(MathError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        let nodes = &self.nodes;
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            propagate(nodes, &node.op, &node.value, g, &mut grads, &mut leaf_grads, idx);
        }
        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    let mut data = std::mem::replace(acc, Tensor::scalar(0.0)).into_data();
                    data.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    *acc = Tensor::new(node.value.shape().to_vec(), data)?;
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Prelu(..) => "prelu",
        Op::Sigmoid(..) => "sigmoid",
        Op::SoftmaxLast(..) => "softmax",
        Op::LayerNormLast { .. } => "layer_norm",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Sum(..) => "sum",
        Op::SumLast(..) => "sum_last",
        Op::ExpandLast(..) => "expand_last",
        Op::SumAxis1(..) => "sum_axis1",
        Op::ExpandAxis1(..) => "expand_axis1",
        Op::SliceLast { .. } => "slice_last",
        Op::Reshape(..) => "reshape",
        Op::Attention { .. } => "attention",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

/// Accumulates `g` (shaped like `a`) into a trailing-broadcast operand of length `nb`.
fn reduce_broadcast(dst: &mut [f64], g: &[f64], weights: Option<&[f64]>) {
    let nb = dst.len().max(1);
    match weights {
        None => {
            for chunk in g.chunks_exact(nb) {
                dst.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
            }
        }
        Some(w) => {
            for (chunk, wc) in g.chunks_exact(nb).zip(w.chunks_exact(nb)) {
                for i in 0..nb {
                    dst[i] += chunk[i] * wc[i];
                }
            }
        }
    }
}

fn propagate(
    nodes: &[Node],
    op: &Op,
    value: &Tensor,
    g: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    leaf_grads: &mut Vec<(usize, Vec<f64>)>,
    idx: usize,
) {
    let val = |v: Var| &nodes[v.0].value;
    match op {
        Op::Leaf => leaf_grads.push((idx, g)),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.outer_len();
            if let Some(ga) = slot(nodes, grads, *a) {
                // ga += g · bᵀ
                gemm_strided(m, n, k, &g, (n as isize, 1), bv.data(), (1, n as isize), ga, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // gb += aᵀ · g
                gemm_strided(k, m, n, av.data(), (1, k as isize), &g, (n as isize, 1), gb, true);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                if sign > 0.0 {
                    reduce_broadcast(gb, &g, None);
                } else {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    reduce_broadcast(gb, &neg, None);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                let nb = bv.len().max(1);
                for (gc, dc) in g.chunks_exact(nb).zip(ga.chunks_exact_mut(nb)) {
                    for i in 0..nb {
                        dc[i] += gc[i] * bv.data()[i];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                reduce_broadcast(gb, &g, Some(av.data()));
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(&g).for_each(|(d, x)| *d += s * x);
            }
        }
        Op::Prelu(x, alpha) => {
            let xv = val(*x);
            let al = val(*alpha).item();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += if xv.data()[i] > 0.0 { g[i] } else { al * g[i] };
                }
            }
            if let Some(ga) = slot(nodes, grads, *alpha) {
                let s: f64 = xv
                    .data()
                    .iter()
                    .zip(&g)
                    .filter(|(v, _)| **v <= 0.0)
                    .map(|(v, gi)| v * gi)
                    .sum();
                ga[0] += s;
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    let y = value.data()[i];
                    gx[i] += g[i] * y * (1.0 - y);
                }
            }
        }
        Op::SoftmaxLast(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = value.last_dim().max(1);
                for ((yr, gr), dr) in value.data().chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                    let s = dot(yr, gr);
                    for i in 0..c {
                        dr[i] += yr[i] * (gr[i] - s);
                    }
                }
            }
        }
        Op::LayerNormLast { x, inv_std } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = value.last_dim();
                let cf = c as f64;
                for (r, ((yr, gr), dr)) in value
                    .data()
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                    .enumerate()
                {
                    let sg: f64 = gr.iter().sum();
                    let sgy = dot(gr, yr);
                    let inv = inv_std[r];
                    for i in 0..c {
                        dr[i] += inv / cf * (cf * gr[i] - sg - yr[i] * sgy);
                    }
                }
            }
        }
        Op::BatchNorm { x, inv_std, .. } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let (r, c) = (value.shape()[0], value.shape()[1]);
                let rf = r as f64;
                let mut sg = vec![0.0; c];
                let mut sgy = vec![0.0; c];
                for (yr, gr) in value.data().chunks_exact(c).zip(g.chunks_exact(c)) {
                    for j in 0..c {
                        sg[j] += gr[j];
                        sgy[j] += gr[j] * yr[j];
                    }
                }
                for ((yr, gr), dr) in value.data().chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                    for j in 0..c {
                        dr[j] += inv_std[j] / rf * (rf * gr[j] - sg[j] - yr[j] * sgy[j]);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumLast(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = val(*x).last_dim().max(1);
                for (dr, gi) in gx.chunks_exact_mut(c).zip(&g) {
                    dr.iter_mut().for_each(|d| *d += gi);
                }
            }
        }
        Op::ExpandLast(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = value.last_dim().max(1);
                for (d, gr) in gx.iter_mut().zip(g.chunks_exact(n)) {
                    *d += gr.iter().sum::<f64>();
                }
            }
        }
        Op::SumAxis1(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let sh = val(*x).shape();
                let (b, s, m) = (sh[0], sh[1], sh[2]);
                for bi in 0..b {
                    let gr = &g[bi * m..(bi + 1) * m];
                    for si in 0..s {
                        let dr = &mut gx[(bi * s + si) * m..(bi * s + si + 1) * m];
                        dr.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                    }
                }
            }
        }
        Op::ExpandAxis1(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let sh = value.shape();
                let (b, s, m) = (sh[0], sh[1], sh[2]);
                for bi in 0..b {
                    let dr = &mut gx[bi * m..(bi + 1) * m];
                    for si in 0..s {
                        let gr = &g[(bi * s + si) * m..(bi * s + si + 1) * m];
                        dr.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                    }
                }
            }
        }
        Op::SliceLast { x, start } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = val(*x).last_dim();
                let w = value.last_dim();
                if w > 0 {
                    for (dr, gr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                        dr[*start..*start + w].iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            attention_backward(nodes, grads, *q, *k, *v, *heads, probs, &g);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[f64],
    g: &[f64],
) {
    let qv = &nodes[q.0].value;
    let (gn, s, m) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (qv.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; qd.len()];
    let mut gv = vec![0.0; qd.len()];
    let mut gp = vec![0.0; s];
    for gi in 0..gn {
        let base = gi * s * m;
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[(gi * heads + h) * s * s..(gi * heads + h + 1) * s * s];
            for i in 0..s {
                let go = &g[base + i * m + off..base + i * m + off + dh];
                let prow = &p[i * s..(i + 1) * s];
                for j in 0..s {
                    let vj = &vd[base + j * m + off..base + j * m + off + dh];
                    gp[j] = dot(go, vj);
                    let w = prow[j];
                    let gvj = &mut gv[base + j * m + off..base + j * m + off + dh];
                    gvj.iter_mut().zip(go).for_each(|(d, x)| *d += w * x);
                }
                let inner = dot(prow, &gp);
                for j in 0..s {
                    let gs = prow[j] * (gp[j] - inner) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    for d in 0..dh {
                        gq[base + i * m + off + d] += gs * kd[base + j * m + off + d];
                        gk[base + j * m + off + d] += gs * qd[base + i * m + off + d];
                    }
                }
            }
        }
    }
    for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(dst) = slot(nodes, grads, var) {
            dst.iter_mut().zip(&buf).for_each(|(d, x)| *d += x);
        }
    }
}
