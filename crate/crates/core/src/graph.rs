//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Inputs always have smaller ids than the node that
//! consumes them, so the tape is acyclic and a single reverse sweep visits
//! each node once. A graph is single-threaded; independent graphs may be
//! evaluated in parallel.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::ssm::selective::{scan_backward, scan_forward, ScanInputs, ScanSaved, SelectiveConfig};
use crate::tensor::{broadcast_shapes, numel, BroadcastMap, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations exposed through [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Exp,
    Softplus,
    Silu,
    Sigmoid,
    Neg,
    Reciprocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Softplus,
    Silu,
    Sigmoid,
    Neg,
    Reciprocal,
}

/// Beyond this pre-activation softplus is the identity to working precision.
const SOFTPLUS_LINEAR: f64 = 20.0;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(SOFTPLUS_LINEAR) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

impl Unary {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Silu => silu(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Neg => -x,
            Unary::Reciprocal => x.recip(),
        }
    }

    /// `dy/dx` given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Exp => y,
            Unary::Softplus => {
                if x > T::lit(SOFTPLUS_LINEAR) {
                    T::one()
                } else {
                    sigmoid(x)
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Neg => -T::one(),
            Unary::Reciprocal => -(y * y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ScanDims {
    len: usize,
    channels: usize,
    state: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var, BroadcastMap, BroadcastMap),
    Mul(Var, Var, BroadcastMap, BroadcastMap),
    Unary(Var, Unary),
    Scale(Var, T),
    MatMul(Var, Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Sum(Var),
    MeanRows(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    SelectiveScan {
        inputs: [Var; 6],
        saved: ScanSaved<T>,
        cfg: SelectiveConfig,
        dims: ScanDims,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        smoothing: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The recorded computation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// `c += a·b` for row-major `a: m×k`, `b: k×n`.
fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call, for leaves created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive a gradient
    /// on every `backward` call.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let x = inputs[0];
        Ok(match op {
            ElementwiseOp::Add => self.add(x, inputs[1])?,
            ElementwiseOp::Mul => self.mul(x, inputs[1])?,
            ElementwiseOp::Exp => self.unary(x, Unary::Exp),
            ElementwiseOp::Softplus => self.unary(x, Unary::Softplus),
            ElementwiseOp::Silu => self.unary(x, Unary::Silu),
            ElementwiseOp::Sigmoid => self.unary(x, Unary::Sigmoid),
            ElementwiseOp::Neg => self.unary(x, Unary::Neg),
            ElementwiseOp::Reciprocal => self.unary(x, Unary::Reciprocal),
        })
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let ma = BroadcastMap::new(self.shape(a), &out_shape);
        let mb = BroadcastMap::new(self.shape(b), &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = (0..numel(&out_shape))
            .map(|i| {
                let (x, y) = (da[ma.index(i)], db[mb.index(i)]);
                if mul {
                    x * y
                } else {
                    x + y
                }
            })
            .collect();
        let value = Tensor::from_parts(out_shape, data);
        let op = if mul {
            Op::Mul(a, b, ma, mb)
        } else {
            Op::Add(a, b, ma, mb)
        };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        let src = self.value(x);
        let value = Tensor::from_parts(
            src.shape().to_vec(),
            src.data().iter().map(|&v| f.apply(v)).collect(),
        );
        self.push(value, Op::Unary(x, f), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// `log(1 + eˣ)`, linear above 20.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn reciprocal(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Reciprocal)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let src = self.value(x);
        let value = Tensor::from_parts(
            src.shape().to_vec(),
            src.data().iter().map(|&v| v * factor).collect(),
        );
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!(
                "matmul of {sa:?} and {sb:?}: inner dimensions must agree"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x / sqrt(mean(x²) + eps) · w` over the last axis.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::Domain(format!("rms_norm eps must be positive, got {eps}")));
        }
        let xs = self.value(x);
        let d = *xs.shape().last().unwrap_or(&1);
        if xs.rank() == 0 || self.shape(w) != [d] {
            return Err(dim_err(format!(
                "rms_norm of {:?} with weight {:?}",
                xs.shape(),
                self.shape(w)
            )));
        }
        let wd = self.value(w).data();
        let rows = xs.numel() / d;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.numel());
        let inv_d = T::one() / T::lit(d as f64);
        for r in 0..rows {
            let row = &xs.data()[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let inv = (ms + eps).sqrt().recip();
            inv_rms.push(inv);
            out.extend(row.iter().zip(wd).map(|(&v, &wi)| v * inv * wi));
        }
        let value = Tensor::from_parts(xs.shape().to_vec(), out);
        Ok(self.push(value, Op::RmsNorm { x, w, inv_rms }, &[x, w]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean over rows of a rank-2 tensor, giving `1×C`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 {
            return Err(dim_err(format!("mean_rows of {:?}", xs.shape())));
        }
        let (r, c) = (xs.shape()[0], xs.shape()[1]);
        let mut acc = vec![T::zero(); c];
        for i in 0..r {
            add_into(&mut acc, xs.row(i));
        }
        let inv = T::one() / T::lit(r as f64);
        acc.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.push(Tensor::from_parts(vec![1, c], acc), Op::MeanRows(x), &[x]))
    }

    /// `out[i] = x[index[i]]` over flat storage.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        if numel(&shape) != index.len() || shape.contains(&0) {
            return Err(dim_err(format!(
                "gather into {shape:?} with {} indices",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.numel()) {
            return Err(dim_err(format!(
                "gather index {bad} out of range for {:?}",
                src.shape()
            )));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    /// Selects rows of a rank-2 tensor in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(dim_err(format!("gather_rows of {shape:?}")));
        }
        let c = shape[1];
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(dim_err(format!("row {bad} out of range for {shape:?}")));
        }
        let index = rows.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
        self.gather(x, index, vec![rows.len(), c])
    }

    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let rows = *self.shape(x).first().unwrap_or(&0);
        let order: Vec<usize> = (0..rows).rev().collect();
        self.gather_rows(x, &order)
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || start + len > shape[1] || len == 0 {
            return Err(dim_err(format!(
                "columns {start}..{} of {shape:?}",
                start + len
            )));
        }
        let cols = shape[1];
        let index = (0..shape[0])
            .flat_map(|r| (start..start + len).map(move |c| r * cols + c))
            .collect();
        self.gather(x, index, vec![shape[0], len])
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat of zero tensors"))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(dim_err(format!(
                    "concat_rows of {:?} and {s:?}",
                    self.shape(*first)
                )));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().with_requires_grad(false);
        let value = Tensor::from_parts(value.shape().to_vec(), value.into_data()).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Depthwise causal convolution over rows: `x: L×E`, `w: E×K`, `b: E`,
    /// `y[t,e] = b[e] + Σ_k w[e,k]·x[t+k−K+1, e]` with zero padding.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sw[0] != sx[1] || sb != [sx[1]] {
            return Err(dim_err(format!(
                "causal_conv of {sx:?} with kernel {sw:?} and bias {sb:?}"
            )));
        }
        let (l, e_dim, k) = (sx[0], sx[1], sw[1]);
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![T::zero(); l * e_dim];
        for t in 0..l {
            for e in 0..e_dim {
                let mut acc = bd[e];
                for j in 0..k {
                    if let Some(src) = (t + j).checked_sub(k - 1) {
                        acc = acc + wd[e * k + j] * xd[src * e_dim + e];
                    }
                }
                out[t * e_dim + e] = acc;
            }
        }
        let value = Tensor::from_parts(vec![l, e_dim], out);
        Ok(self.push(value, Op::CausalConv { x, w, b }, &[x, w, b]))
    }

    /// Fused selective scan. `u`, `delta`: `L×E`; `a_log`: `E×N`;
    /// `b`, `c`: `L×N`; `d`: `E`. Returns `L×E`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Var,
        cfg: SelectiveConfig,
    ) -> Result<Var> {
        let su = self.shape(u);
        let sa = self.shape(a_log);
        if su.len() != 2 || sa.len() != 2 {
            return Err(dim_err(format!(
                "selective scan input {su:?} with state matrix {sa:?}"
            )));
        }
        let dims = ScanDims {
            len: su[0],
            channels: su[1],
            state: sa[1],
        };
        let inputs = [u, delta, a_log, b, c, d];
        let (y, saved) = {
            let inp = self.scan_inputs(&inputs, dims);
            inp.check()?;
            scan_forward(&inp, cfg)
        };
        let value = Tensor::from_parts(vec![dims.len, dims.channels], y);
        Ok(self.push(
            value,
            Op::SelectiveScan {
                inputs,
                saved,
                cfg,
                dims,
            },
            &inputs,
        ))
    }

    fn scan_inputs(&self, v: &[Var; 6], dims: ScanDims) -> ScanInputs<'_, T> {
        ScanInputs {
            u: self.value(v[0]).data(),
            delta: self.value(v[1]).data(),
            a_log: self.value(v[2]).data(),
            b: self.value(v[3]).data(),
            c: self.value(v[4]).data(),
            d: self.value(v[5]).data(),
            len: dims.len,
            channels: dims.channels,
            state: dims.state,
        }
    }

    /// Mean cross-entropy of `logits` (`B×C` or `C`) against integer targets,
    /// with the target distribution `(1−ε)·onehot + ε/C`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: T) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (rows, classes) = match s.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => return Err(dim_err(format!("cross_entropy of logits {s:?}"))),
        };
        if targets.len() != rows {
            return Err(dim_err(format!(
                "{} targets for {rows} rows of logits",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(dim_err(format!("target {bad} out of range for {classes} classes")));
        }
        let data = self.value(logits).data();
        let off = smoothing / T::lit(classes as f64);
        let on = T::one() - smoothing + off;
        let mut probs = Vec::with_capacity(rows * classes);
        let mut loss = T::zero();
        for (r, &target) in targets.iter().enumerate() {
            let row = &data[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            for (c, &v) in row.iter().enumerate() {
                let q = if c == target { on } else { off };
                loss = loss - q * (v - log_z);
                probs.push((v - log_z).exp());
            }
        }
        loss = loss / T::lit(rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                smoothing,
            },
            &[logits],
        ))
    }

    /// Propagates gradients from a single-element `loss` into every leaf
    /// created with `requires_grad`. Previous gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let n = node.value.numel();
                node.value.set_grad(g.unwrap_or_else(|| vec![T::zero(); n]));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn reduce_broadcast(&self, g: &[T], src: Var, map: &BroadcastMap) -> Vec<T> {
        match map {
            BroadcastMap::Same => g.to_vec(),
            _ => {
                let mut out = vec![T::zero(); self.value(src).numel()];
                for (i, &gi) in g.iter().enumerate() {
                    let j = map.index(i);
                    out[j] = out[j] + gi;
                }
                out
            }
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, ma, mb) => {
                if self.needs(*a) {
                    let ga = self.reduce_broadcast(g, *a, ma);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.reduce_broadcast(g, *b, mb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, ma, mb) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let prod: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| gk * db[mb.index(k)])
                        .collect();
                    let ga = self.reduce_broadcast(&prod, *a, ma);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let prod: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| gk * da[ma.index(k)])
                        .collect();
                    let gb = self.reduce_broadcast(&prod, *b, mb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary(x, f) => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let gx = g
                    .iter()
                    .zip(xd.iter().zip(yd))
                    .map(|(&gk, (&xk, &yk))| gk * f.derivative(xk, yk))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, factor) => {
                let gx = g.iter().map(|&gk| gk * *factor).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    // dA = dC·Bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    // dB = Aᵀ·dC
                    let mut gb = vec![T::zero(); k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            if arp == T::zero() {
                                continue;
                            }
                            for (dst, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst = *dst + arp * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let d = wd.len();
                let inv_d = T::one() / T::lit(d as f64);
                let mut gx = vec![T::zero(); xd.len()];
                let mut gw = vec![T::zero(); d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: T = (0..d).map(|j| gr[j] * wd[j] * xr[j]).sum();
                    let coef = dot * inv * inv * inv * inv_d;
                    for j in 0..d {
                        gx[r * d + j] = gr[j] * wd[j] * inv - xr[j] * coef;
                        gw[j] = gw[j] + gr[j] * xr[j] * inv;
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let inv = T::one() / T::lit(r as f64);
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let gx = (0..r).flat_map(|_| row.iter().copied()).collect::<Vec<_>>();
                debug_assert_eq!(gx.len(), r * c);
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gk) in index.iter().zip(g) {
                    gx[src] = gx[src] + gk;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::CausalConv { x, w, b } => {
                let s = self.shape(*x);
                let (l, e_dim) = (s[0], s[1]);
                let k = self.shape(*w)[1];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = vec![T::zero(); l * e_dim];
                let mut gw = vec![T::zero(); e_dim * k];
                let mut gb = vec![T::zero(); e_dim];
                for t in 0..l {
                    for e in 0..e_dim {
                        let gt = g[t * e_dim + e];
                        gb[e] = gb[e] + gt;
                        for j in 0..k {
                            if let Some(src) = (t + j).checked_sub(k - 1) {
                                gw[e * k + j] = gw[e * k + j] + gt * xd[src * e_dim + e];
                                gx[src * e_dim + e] = gx[src * e_dim + e] + gt * wd[e * k + j];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::SelectiveScan {
                inputs,
                saved,
                cfg,
                dims,
            } => {
                let inp = self.scan_inputs(inputs, *dims);
                let sg = scan_backward(&inp, saved, g, *cfg);
                let [u, delta, a_log, b, c, d] = *inputs;
                self.accumulate(grads, u, sg.u);
                self.accumulate(grads, delta, sg.delta);
                self.accumulate(grads, a_log, sg.a_log);
                self.accumulate(grads, b, sg.b);
                self.accumulate(grads, c, sg.c);
                self.accumulate(grads, d, sg.d);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                smoothing,
            } => {
                let classes = probs.len() / targets.len();
                let off = *smoothing / T::lit(classes as f64);
                let on = T::one() - *smoothing + off;
                let scale = g[0] / T::lit(targets.len() as f64);
                let gl = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let q = if k % classes == targets[k / classes] { on } else { off };
                        (p - q) * scale
                    })
                    .collect();
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}
