//! Dynamic reverse-mode tape.
//!
//! Every forward operation appends a node holding its output value and enough
//! saved state to run its backward pass. Nodes that do not depend on any
//! gradient-requiring leaf are skipped entirely during backward, so frozen
//! sub-networks cost only their forward pass.

use std::collections::{BTreeMap, HashMap};

use super::dense::{numel, Tensor};
use super::param::ParamStore;
use super::scalar::{gemm, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Gather { table: Var, ids: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of leaf nodes produced by one backward pass.
pub struct Grads<T> {
    by_node: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.by_node.get(&v.0).map(|g| g.as_slice())
    }
}

/// Named parameter gradients, ordered by name.
pub type GradMap<T> = BTreeMap<String, Vec<T>>;

/// Adds `src` into `dst` element-wise, inserting missing entries.
pub fn accumulate_grads<T: Scalar>(dst: &mut GradMap<T>, src: GradMap<T>) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
            None => {
                dst.insert(name, g);
            }
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    bound_order: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            bound_order: Vec::new(),
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter as a leaf. Repeated binds of the same name
    /// return the same node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(p.tensor.clone(), p.trainable);
        self.bound.insert(name.to_string(), v);
        self.bound_order.push((name.to_string(), v));
        Ok(v)
    }

    // ---- forward ops -------------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            out.data_mut(),
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`, without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v = *v + *bb);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along {axis}: {base:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(d[idx(j)]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (d[idx(j)] - max).exp();
                    d[idx(j)] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    d[idx(j)] = d[idx(j)] / sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_parts(*v).0);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(Error::invalid(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "layer_norm {:?} with gain {:?} bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let inv_d = T::of(1.0 / d as f64);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + T::of(eps)).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
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

    /// Mean cross-entropy of `[n, vocab]` logits against `n` target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2()?;
        if targets.len() != n || n == 0 {
            return Err(Error::shape(format!(
                "cross_entropy: {n} logit rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| **t >= vocab) {
            return Err(Error::invalid(format!("target id {t} outside vocab {vocab}")));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(src.len());
        let mut loss = T::zero();
        for (row, &t) in src.chunks(vocab).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|v| (*v - max).exp()).sum();
            let lse = max + sum.ln();
            loss = loss + (lse - row[t]);
            probs.extend(row.iter().map(|v| (*v - lse).exp()));
        }
        let out = Tensor::scalar(loss / T::of(n as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        if let Some(i) = ids.iter().find(|i| **i >= rows) {
            return Err(Error::invalid(format!("row id {i} outside table of {rows}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(loss, vec![T::one()])
    }

    /// Backpropagates an upstream gradient `seed` (same size as `out`).
    pub fn backward_seeded(&self, out: Var, seed: Vec<T>) -> Result<Grads<T>> {
        if seed.len() != self.value(out).len() {
            return Err(Error::shape(format!(
                "seed of {} values for node of shape {:?}",
                seed.len(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves.insert(i, g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Grads { by_node: leaves })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<T>| match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&delta).for_each(|(a, d)| *a = *a + *d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    if !*ta {
                        gemm(m, n, k, g, false, bv.data(), !*tb, &mut da, false);
                    } else {
                        gemm(k, n, m, bv.data(), *tb, g, true, &mut da, false);
                    }
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if !*tb {
                        gemm(k, m, n, av.data(), !*ta, g, false, &mut db, false);
                    } else {
                        gemm(n, m, k, g, true, av.data(), *ta, &mut db, false);
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::AddRow { x, bias } => {
                if wants(*x) {
                    acc(*x, g.to_vec());
                }
                if wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d = *d + *v);
                    }
                    acc(*bias, db);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = self.value(*b).data();
                    acc(*a, g.iter().zip(bv).map(|(g, b)| *g * *b).collect());
                }
                if wants(*b) {
                    let av = self.value(*a).data();
                    acc(*b, g.iter().zip(av).map(|(g, a)| *g * *a).collect());
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| *v * *s).collect()),
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = axis_split(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if wants(*p) {
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total + offset;
                            dp.extend_from_slice(&g[base..base + len]);
                        }
                        acc(*p, dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_split(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let dot: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    xv.iter().zip(g).map(|(x, g)| gelu_parts(*x).1 * *g).collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    let inv_d = T::of(1.0 / d as f64);
                    for ((grow, hrow), r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dxh: Vec<T> = grow.iter().zip(gv).map(|(a, b)| *a * *b).collect();
                        let mean_dxh = dxh.iter().copied().sum::<T>() * inv_d;
                        let mean_dxh_h =
                            dxh.iter().zip(hrow).map(|(a, h)| *a * *h).sum::<T>() * inv_d;
                        for j in 0..d {
                            dx.push(*r * (dxh[j] - mean_dxh - hrow[j] * mean_dxh_h));
                        }
                    }
                    acc(*x, dx);
                }
                if wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                        }
                    }
                    acc(*gain, dg);
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(a, b)| *a = *a + *b);
                    }
                    acc(*bias, db);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let vocab = probs.len() / n;
                let s = g[0] / T::of(n as f64);
                let mut dl: Vec<T> = probs.iter().map(|p| *p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * vocab + t] = dl[r * vocab + t] - s;
                }
                acc(*logits, dl);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0]; n]);
            }
            Op::Gather { table, ids } => {
                let (rows, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                let mut dt = vec![T::zero(); rows * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] = dt[i * d + j] + g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
        }
    }

    /// Gradients of every trainable parameter bound on this tape, keyed by
    /// name. A bound trainable parameter that the loss does not reach gets an
    /// explicit zero gradient.
    pub fn param_grads(&self, grads: &Grads<T>) -> GradMap<T> {
        let mut out = GradMap::new();
        for (name, v) in &self.bound_order {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let g = grads
                .get(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); self.value(*v).len()]);
            out.insert(name.clone(), g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let x = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn concat_rows_then_columns() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[2, 3], &[7., 8., 9., 10., 11., 12.]));
        let r = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(r), &[4, 3]);
        assert_eq!(
            tape.value(r).data(),
            &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]
        );
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).row(0), &[1., 2., 3., 7., 8., 9.]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(tape.softmax(a, 2).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_inputs() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![1e4, -1e4, 9999.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let s: f32 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(tape.value(y).data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn layer_norm_of_two_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1., 3.]));
        let g = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1., 1.]);
        assert!(tape.layer_norm(x, g, b, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_of_confident_prediction_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0., 1000., 0.]));
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_bt() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let b = tape.constant(t(&[3, 2], &[1., -1., 2., 0.5, -3., 4.]));
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        let ones = Tensor::<f64>::full(&[2, 2], 1.0);
        let expected = ones.matmul(&tape.value(b).transpose().unwrap()).unwrap();
        assert_eq!(grads.get(a).unwrap(), expected.data());
    }

    #[test]
    fn frozen_branches_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1., 2.]), true);
        let w = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]), false);
        let y = tape.matmul(a, w).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(w).is_none());
    }
}
