//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in evaluation
//! order, so a single reverse sweep over the node list visits each node once
//! and yields `d loss / d node` for every node that depends on a parameter or
//! a variable leaf. Parameters are bound lazily from a [`ParamStore`]; any
//! parameter never touched by the forward pass gets an exactly-zero gradient.

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { x: Var, w: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Permute { x: Var, src_index: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Repeat(Var),
    Gather { table: Var, idx: Vec<usize> },
    SumLast(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape bound to an optional parameter store.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    min_kink: f64,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Shape `b` broadcasts onto `a` when it equals a trailing suffix of `a`.
fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            bound: Vec::new(),
            min_kink: f64::INFINITY,
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::with_capacity(256),
            bound: vec![None; store.len()],
            min_kink: f64::INFINITY,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shapes of every recorded intermediate, in evaluation order.
    pub fn recorded_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    /// Smallest |argument| seen by a ReLU or abs on this tape. Finite
    /// differences with a step below this never cross a kink.
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(id.0).copied().flatten() {
            return v;
        }
        let store = self
            .store
            .expect("Graph::param called on a graph without a parameter store");
        let v = self.push(store.get(id).clone(), Op::Param, true);
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        v
    }

    /// `x · w` over the trailing dimension of `x`; `w` is `[d_in, d_out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(TensorError::shape("matmul", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.value(x).len() / k;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let xr = &xd[r * k..(r + 1) * k];
            let yr = &mut out[r * n..(r + 1) * n];
            for (p, &a) in xr.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let wp = &wd[p * n..(p + 1) * n];
                for (y, &wv) in yr.iter_mut().zip(wp) {
                    *y += a * wv;
                }
            }
        }
        ensure_finite("matmul", &out)?;
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { x, w }, rg))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(TensorError::shape("batch_matmul", &as_, &bs));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(TensorError::shape("batch_matmul", &as_, &bs));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = &ad[bi * m * k..(bi + 1) * m * k];
            let bb = &bd[bi * k * n..(bi + 1) * k * n];
            let yb = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let ar = &ab[i * k..(i + 1) * k];
                let yr = &mut yb[i * n..(i + 1) * n];
                if trans_b {
                    for (j, y) in yr.iter_mut().enumerate() {
                        let br = &bb[j * k..(j + 1) * k];
                        *y = ar.iter().zip(br).map(|(x, z)| x * z).sum();
                    }
                } else {
                    for (p, &av) in ar.iter().enumerate() {
                        let br = &bb[p * n..(p + 1) * n];
                        for (y, &bv) in yr.iter_mut().zip(br) {
                            *y += av * bv;
                        }
                    }
                }
            }
        }
        ensure_finite("batch_matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let as_ = self.shape(a);
        let bs = self.shape(b);
        if !is_suffix(as_, bs) {
            return Err(TensorError::shape(name, as_, bs));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let nb = bd.len();
        let out: Vec<f64> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        ensure_finite(name, &out)?;
        Ok(Tensor::from_parts(as_.to_vec(), out))
    }

    /// `a + b` where `b` has the shape of `a` or of a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// `a - b` with the same broadcasting rule as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("mul", self.shape(a), self.shape(b)));
        }
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        ensure_finite("scale", t.data())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scale { x, c }, rg))
    }

    fn track_kink(&mut self, x: Var) {
        let m = self
            .value(x)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.min_kink = self.min_kink.min(m);
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.track_kink(x);
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    /// Logistic function.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sigmoid(x), rg))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.track_kink(x);
        let t = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Abs(x), rg))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        ensure_finite("square", t.data())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Square(x), rg))
    }

    /// Softmax over the trailing dimension, stabilised by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = softmax_last(self.value(x));
        ensure_finite("softmax", t.data())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Per-vector standardisation over the trailing dimension followed by
    /// the affine map `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| TensorError::shape("layer_norm", &xs, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::shape("layer_norm", &xs, self.shape(gain)));
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gd[c] + bd[c];
            }
        }
        ensure_finite("layer_norm", &out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(xs, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Concatenation along the trailing dimension; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rank = xs.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape("permute", &xs, perm));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * xs[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.value(x).len();
        let mut src_index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..n {
            src_index.push(offset);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                offset += strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * out_shape[ax];
                counter[ax] = 0;
            }
        }
        let xd = self.value(x).data();
        let out = src_index.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute { x, src_index },
            rg,
        ))
    }

    /// Contiguous range `start..start + len` of one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(TensorError::shape("slice", &xs, &[axis, start, len]));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * xs[axis] * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, rg))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(TensorError::Invalid("repeat count must be positive".into()));
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let out = self.value(x).data().repeat(times);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Repeat(x), rg))
    }

    /// Rows of a `[V, d]` table selected by `idx`, giving `[idx.len(), d]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || idx.is_empty() {
            return Err(TensorError::shape("gather", &ts, &[idx.len()]));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid(format!("gather index {bad} >= {v}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), d], out),
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Sum over the trailing dimension.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return self.sum(x);
        }
        let d = *xs.last().unwrap();
        let out: Vec<f64> = self.value(x).data().chunks(d).map(|c| c.iter().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(xs[..xs.len() - 1].to_vec(), out),
            Op::SumLast(x),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        ensure_finite("sum", &[s])?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        ensure_finite("mean", &[s])?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            visited += 1;
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        let param_vars = self.bound.clone();
        Ok(Gradients {
            grads,
            param_vars,
            visited,
        })
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { x, w } => {
                let ws = nodes[w.0].value.shape();
                let (k, n) = (ws[0], ws[1]);
                let xd = val(*x);
                let wd = val(*w);
                let rows = xd.len() / k;
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        let gr = &gy[r * n..(r + 1) * n];
                        for p in 0..k {
                            let wp = &wd[p * n..(p + 1) * n];
                            dx[r * k + p] += gr.iter().zip(wp).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for r in 0..rows {
                        let gr = &gy[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a = xd[r * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            for (d, &g) in dw[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *d += a * g;
                            }
                        }
                    }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let as_ = nodes[a.0].value.shape();
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = node.value.shape()[2];
                let ad = val(*a);
                let bd = val(*b);
                let trans = *trans_b;
                acc(*a, &mut |da| {
                    for bi in 0..batch {
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let gr = &gy[(bi * m + i) * n..(bi * m + i + 1) * n];
                            let dr = &mut da[(bi * m + i) * k..(bi * m + i + 1) * k];
                            for (j, &g) in gr.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                for (p, d) in dr.iter_mut().enumerate() {
                                    let bv = if trans { bb[j * k + p] } else { bb[p * n + j] };
                                    *d += g * bv;
                                }
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for bi in 0..batch {
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let gr = &gy[(bi * m + i) * n..(bi * m + i + 1) * n];
                            let ar = &ab[i * k..(i + 1) * k];
                            for (j, &g) in gr.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                for (p, &av) in ar.iter().enumerate() {
                                    let idx = if trans { j * k + p } else { p * n + j };
                                    dbb[idx] += g * av;
                                }
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc(*a, &mut |da| {
                    for (d, &g) in da.iter_mut().zip(gy) {
                        *d += g;
                    }
                });
                acc(*b, &mut |db| {
                    let nb = db.len();
                    for (i, &g) in gy.iter().enumerate() {
                        db[i % nb] += sign * g;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ad = val(*a);
                let bd = val(*b);
                acc(*a, &mut |da| {
                    for ((d, &g), &bv) in da.iter_mut().zip(gy).zip(bd) {
                        *d += g * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &g), &av) in db.iter_mut().zip(gy).zip(ad) {
                        *d += g * av;
                    }
                });
            }
            Op::Scale { x, c } => acc(*x, &mut |dx| {
                for (d, &g) in dx.iter_mut().zip(gy) {
                    *d += c * g;
                }
            }),
            Op::Relu(x) => {
                let xd = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, &g), &xv) in dx.iter_mut().zip(gy).zip(xd) {
                        if xv > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                acc(*x, &mut |dx| {
                    for ((d, &g), &y) in dx.iter_mut().zip(gy).zip(yd) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Abs(x) => {
                let xd = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, &g), &xv) in dx.iter_mut().zip(gy).zip(xd) {
                        if xv > 0.0 {
                            *d += g;
                        } else if xv < 0.0 {
                            *d -= g;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xd = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, &g), &xv) in dx.iter_mut().zip(gy).zip(xd) {
                        *d += 2.0 * xv * g;
                    }
                });
            }
            Op::Softmax(x) => {
                let yd = node.value.data();
                let k = node.value.last_dim();
                acc(*x, &mut |dx| {
                    for ((dr, gr), yr) in dx.chunks_mut(k).zip(gy.chunks(k)).zip(yd.chunks(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
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
                let d = node.value.last_dim();
                let gd = val(*gain);
                acc(*gain, &mut |dg| {
                    for (gr, hr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in gy.chunks(d) {
                        for c in 0..d {
                            db[c] += gr[c];
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dh = vec![0.0; d];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(gy.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for c in 0..d {
                            dh[c] = gr[c] * gd[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dr[c] += rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    acc(p, &mut |dp| {
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += gy[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |dx| {
                for (d, &g) in dx.iter_mut().zip(gy) {
                    *d += g;
                }
            }),
            Op::Permute { x, src_index } => acc(*x, &mut |dx| {
                for (&s, &g) in src_index.iter().zip(gy) {
                    dx[s] += g;
                }
            }),
            Op::Slice { x, axis, start } => {
                let xs = nodes[x.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let full = xs[*axis];
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &gy[o * len * inner..(o + 1) * len * inner];
                        for (d, &g) in dx[base..base + len * inner].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Repeat(x) => acc(*x, &mut |dx| {
                let n = dx.len();
                for chunk in gy.chunks(n) {
                    for (d, &g) in dx.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
            }),
            Op::Gather { table, idx } => {
                let d = node.value.last_dim();
                acc(*table, &mut |dt| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            dt[i * d + c] += gy[r * d + c];
                        }
                    }
                });
            }
            Op::SumLast(x) => {
                let d = nodes[x.0].value.last_dim();
                acc(*x, &mut |dx| {
                    for (dr, &g) in dx.chunks_mut(d).zip(gy) {
                        for v in dr {
                            *v += g;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| {
                for d in dx {
                    *d += gy[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |dx| {
                let s = gy[0] / dx.len() as f64;
                for d in dx {
                    *d += s;
                }
            }),
        }
    }
}

/// Softmax over the trailing dimension of a plain tensor.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let k = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
    visited: usize,
}

impl Gradients {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Gradient of one parameter; zeros when it was not used.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Vec<f64> {
        self.param_vars
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).len()])
    }

    /// Flat gradient aligned with [`ParamStore::flatten`].
    pub fn flat(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = vec![0.0; store.num_scalars()];
        self.accumulate_flat(store, &mut out);
        out
    }

    /// Adds this gradient into a flat buffer aligned with the store.
    pub fn accumulate_flat(&self, store: &ParamStore, out: &mut [f64]) {
        let mut off = 0;
        for (id, _, t) in store.iter() {
            let n = t.len();
            if let Some(g) = self
                .param_vars
                .get(id.index())
                .copied()
                .flatten()
                .and_then(|v| self.wrt(v))
            {
                for (o, &x) in out[off..off + n].iter_mut().zip(g) {
                    *o += x;
                }
            }
            off += n;
        }
    }
}
