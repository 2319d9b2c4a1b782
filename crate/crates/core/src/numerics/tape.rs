//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and whatever
//! it saved for the backward pass. Nodes are only ever appended, so the
//! tape is in topological order by construction and [`Tape::backward`]
//! visits each node exactly once, from last to first.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{dot, matmul, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_rows_inplace, transpose};
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var, bc: Broadcast },
    Sub { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    Scale { a: Var, factor: T },
    Gelu { a: Var },
    Softmax { a: Var, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    MeanPool { x: Var, segment: usize },
    L2Normalize { x: Var, eps: T, norms: Vec<T> },
    AddRowBias { x: Var, bias: Var },
    GatherRows { x: Var, indices: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    RepeatRows { x: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Sum { x: Var },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations for one computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], one per leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape_or_scalar(a: &[usize], an: usize, b: &[usize], bn: usize) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::None)
    } else if bn == 1 {
        Some(Broadcast::Rhs)
    } else if an == 1 {
        Some(Broadcast::Lhs)
    } else {
        None
    }
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x·Φ(x)` with the Gaussian CDF written through `erf`.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x / T::from_f64(SQRT_2)).erf())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x / T::from_f64(SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

impl<T: Real> Tape<T> {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Every node in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> + use<T> {
        (0..self.nodes.len()).map(Var)
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid out
    /// as `[sequence][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            bail!(Dimension, "{} expects a matrix, got shape {:?}", what, s);
        }
        Ok((s[0], s[1]))
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            bail!(Dimension, "matmul inner extents differ: {}×{} · {}×{}", m, k, k2, n);
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, rg, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Broadcast)> {
        let (va, vb) = (self.value(a), self.value(b));
        let bc = same_shape_or_scalar(va.shape(), va.numel(), vb.shape(), vb.numel()).ok_or_else(|| {
            Error::Dimension(format!("{}: incompatible shapes {:?} and {:?}", name, va.shape(), vb.shape()))
        })?;
        let out = match bc {
            Broadcast::None => {
                let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(va.shape(), data)?
            }
            Broadcast::Rhs => {
                let y = vb.data()[0];
                Tensor::new(va.shape(), va.data().iter().map(|&x| f(x, y)).collect())?
            }
            Broadcast::Lhs => {
                let x = va.data()[0];
                Tensor::new(vb.shape(), vb.data().iter().map(|&y| f(x, y)).collect())?
            }
        };
        Ok((out, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add { a, b, bc }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub { a, b, bc }, rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul { a, b, bc }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|&x| x * factor).collect())?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, factor }, rg, "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|&x| gelu_scalar(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu { a }, rg, "gelu")
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {} out of range for shape {:?}", axis, shape);
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = va.data().to_vec();
        if inner == 1 {
            softmax_rows_inplace(&mut out, len);
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut max = out[base];
                    for j in 1..len {
                        max = max.max(out[base + j * inner]);
                    }
                    let mut sum = T::ZERO;
                    for j in 0..len {
                        let e = (out[base + j * inner] - max).exp();
                        out[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        out[base + j * inner] /= sum;
                    }
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax { a, len, inner }, rg, "softmax")
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().ok_or_else(|| Error::Dimension("layernorm on a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            bail!(
                Dimension,
                "layernorm affine shapes {:?}/{:?} do not match feature size {}",
                self.shape(gain),
                self.shape(bias),
                d
            );
        }
        let rows = vx.numel() / d;
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::ZERO; vx.numel()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; vx.numel()];
        let inv_d = T::ONE / T::from_usize(d);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layernorm")
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != b {
            bail!(Dimension, "cross_entropy: {} targets for {} rows", targets.len(), b);
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= v) {
            bail!(Index, "cross_entropy: target {} at row {} is outside [0, {})", t, i, v);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::ZERO;
        for (r, row) in probs.chunks_exact_mut(v).enumerate() {
            let mut max = row[0];
            for &x in row.iter() {
                max = max.max(x);
            }
            let mut sum = T::ZERO;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let target_logit = self.nodes[logits.0].value.data()[r * v + targets[r]];
            // -log p = logsumexp - logit
            loss += max + sum.ln() - target_logit;
            let inv = T::ONE / sum;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        let loss = loss / T::from_usize(b);
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Mean over the rows of a `[n×d]` matrix, giving `[d]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.matrix(x, "mean_pool")?;
        let pooled = self.mean_pool_segments(x, n)?;
        self.reshape_to(pooled, &[d], "mean_pool")
    }

    /// Means over consecutive groups of `segment` rows: `[s·m × d] → [s × d]`.
    pub fn mean_pool_segments(&mut self, x: Var, segment: usize) -> Result<Var> {
        let (rows, d) = self.matrix(x, "mean_pool")?;
        if segment == 0 || rows % segment != 0 {
            bail!(Dimension, "mean_pool: {} rows do not split into segments of {}", rows, segment);
        }
        let s = rows / segment;
        let data = self.value(x).data();
        let mut out = vec![T::ZERO; s * d];
        let inv = T::ONE / T::from_usize(segment);
        for g in 0..s {
            let o = &mut out[g * d..(g + 1) * d];
            for r in 0..segment {
                let row = &data[(g * segment + r) * d..(g * segment + r + 1) * d];
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for acc in o.iter_mut() {
                *acc *= inv;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[s, d], out)?, Op::MeanPool { x, segment }, rg, "mean_pool")
    }

    /// Scales each slice along the last axis to unit L2 norm, dividing by
    /// `eps` instead when the norm falls below it.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = vx.as_matrix();
        let mut norms = vec![T::ZERO; rows];
        let mut out = vx.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let norm = dot(row, row).sqrt().max(eps);
            norms[r] = norm;
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, eps, norms }, rg, "l2_normalize")
    }

    /// Adds `bias[n]` to every row of `x[m×n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "add_row_bias")?;
        if self.shape(bias) != [n] {
            bail!(Dimension, "add_row_bias: bias {:?} for {} columns", self.shape(bias), n);
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::new(&[m, n], out)?, Op::AddRowBias { x, bias }, rg, "add_row_bias")
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix(x, "gather_rows")?;
        if indices.is_empty() {
            bail!(Dimension, "gather_rows: empty index list");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            bail!(Index, "gather_rows: row {} out of range for {} rows", bad, m);
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(&[indices.len(), n], out)?,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Dimension, "concat_rows: nothing to concatenate");
        }
        let (_, n) = self.matrix(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != n {
                bail!(Dimension, "concat_rows: column counts {} and {} differ", n, c);
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(&[rows, n], out)?,
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
            "concat_rows",
        )
    }

    /// Stacks `count` copies of a vector `[n]` into `[count × n]`.
    pub fn repeat_rows(&mut self, x: Var, count: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 1 || count == 0 {
            bail!(Dimension, "repeat_rows expects a vector and count > 0, got {:?}×{}", vx.shape(), count);
        }
        let n = vx.numel();
        let mut out = Vec::with_capacity(count * n);
        for _ in 0..count {
            out.extend_from_slice(vx.data());
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[count, n], out)?, Op::RepeatRows { x }, rg, "repeat_rows")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "transpose")?;
        let out = transpose(self.value(x).data(), m, n);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[n, m], out)?, Op::Transpose { x }, rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.reshape_to(x, shape, "reshape")
    }

    fn reshape_to(&mut self, x: Var, shape: &[usize], name: &'static str) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape { x }, rg, name)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg, "sum")
    }

    /// Multi-head scaled dot-product attention over a batch of equal-length
    /// sequences stacked along rows: `q`, `k`, `v` are `[s·seq × dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (rows, dim) = self.matrix(q, "attention")?;
        if self.shape(k) != [rows, dim] || self.shape(v) != [rows, dim] {
            bail!(Dimension, "attention: q/k/v shapes differ");
        }
        if seq == 0 || rows % seq != 0 || heads == 0 || dim % heads != 0 {
            bail!(
                Dimension,
                "attention: {} rows, sequence {}, dim {}, heads {} do not tile",
                rows,
                seq,
                dim,
                heads
            );
        }
        let hd = dim / heads;
        let scale = T::ONE / T::from_usize(hd).sqrt();
        let nseq = rows / seq;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::ZERO; nseq * heads * seq * seq];
        let mut out = vec![T::ZERO; rows * dim];
        let mut qh = vec![T::ZERO; seq * hd];
        let mut kh = vec![T::ZERO; seq * hd];
        let mut vh = vec![T::ZERO; seq * hd];
        for s in 0..nseq {
            for h in 0..heads {
                gather_head(qd, &mut qh, s * seq, seq, dim, h * hd, hd);
                gather_head(kd, &mut kh, s * seq, seq, dim, h * hd, hd);
                gather_head(vd, &mut vh, s * seq, seq, dim, h * hd, hd);
                let p = &mut probs[(s * heads + h) * seq * seq..(s * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    for j in 0..seq {
                        p[i * seq + j] = dot(&qh[i * hd..(i + 1) * hd], &kh[j * hd..(j + 1) * hd]) * scale;
                    }
                }
                softmax_rows_inplace(p, seq);
                let o = matmul(p, &vh, seq, seq, hd);
                scatter_head(&o, &mut out, s * seq, seq, dim, h * hd, hd);
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::new(&[rows, dim], out)?,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Accumulates `d loss / d leaf` for every leaf that requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", lv.shape());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => Some(Tensor::new(node.value.shape(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).as_matrix().1;
                if self.wants(*a) {
                    matmul_nt_acc(g, self.value(*b).data(), slot(grads, *a, m * k), m, n, k);
                }
                if self.wants(*b) {
                    matmul_tn_acc(self.value(*a).data(), g, slot(grads, *b, k * n), m, k, n);
                }
            }
            Op::Add { a, b, bc } | Op::Sub { a, b, bc } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::ONE } else { T::ONE };
                if self.wants(*a) {
                    accumulate(slot(grads, *a, self.value(*a).numel()), g, T::ONE, *bc == Broadcast::Lhs);
                }
                if self.wants(*b) {
                    accumulate(slot(grads, *b, self.value(*b).numel()), g, sign, *bc == Broadcast::Rhs);
                }
            }
            Op::Mul { a, b, bc } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = slot(grads, *a, va.len());
                    match bc {
                        Broadcast::None => ga.iter_mut().zip(g).zip(vb).for_each(|((o, &g), &y)| *o += g * y),
                        Broadcast::Rhs => ga.iter_mut().zip(g).for_each(|(o, &g)| *o += g * vb[0]),
                        Broadcast::Lhs => ga[0] += g.iter().zip(vb).map(|(&g, &y)| g * y).sum::<T>(),
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, vb.len());
                    match bc {
                        Broadcast::None => gb.iter_mut().zip(g).zip(va).for_each(|((o, &g), &x)| *o += g * x),
                        Broadcast::Lhs => gb.iter_mut().zip(g).for_each(|(o, &g)| *o += g * va[0]),
                        Broadcast::Rhs => gb[0] += g.iter().zip(va).map(|(&g, &x)| g * x).sum::<T>(),
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.wants(*a) {
                    accumulate(slot(grads, *a, g.len()), g, *factor, false);
                }
            }
            Op::Gelu { a } => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let ga = slot(grads, *a, x.len());
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += gv * gelu_grad_scalar(xv);
                    }
                }
            }
            Op::Softmax { a, len, inner } => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let ga = slot(grads, *a, y.len());
                    let (len, inner) = (*len, *inner);
                    let outer = y.len() / (len * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut s = T::ZERO;
                            for j in 0..len {
                                s += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..len {
                                let at = base + j * inner;
                                ga[at] += y[at] * (g[at] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).numel();
                let rows = xhat.len() / d;
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let gg = slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, rows * d);
                    let inv_d = T::ONE / T::from_usize(d);
                    let mut dxhat = vec![T::ZERO; d];
                    for r in 0..rows {
                        let mut mean_dxhat = T::ZERO;
                        let mut mean_dxhat_xhat = T::ZERO;
                        for j in 0..d {
                            let v = g[r * d + j] * gv[j];
                            dxhat[j] = v;
                            mean_dxhat += v;
                            mean_dxhat_xhat += v * xhat[r * d + j];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let v = probs.len() / targets.len();
                    let scale = g[0] / T::from_usize(targets.len());
                    let gl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { T::ONE } else { T::ZERO };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::MeanPool { x, segment } => {
                if self.wants(*x) {
                    let (rows, d) = self.value(*x).as_matrix();
                    let inv = T::ONE / T::from_usize(*segment);
                    let gx = slot(grads, *x, rows * d);
                    for r in 0..rows {
                        let grow = &g[(r / segment) * d..(r / segment + 1) * d];
                        for (o, &gv) in gx[r * d..(r + 1) * d].iter_mut().zip(grow) {
                            *o += gv * inv;
                        }
                    }
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let d = y.len() / norms.len();
                    let gx = slot(grads, *x, y.len());
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // a clamped row is a plain scaling by 1/eps
                        let proj = if norm > *eps { dot(yr, gr) } else { T::ZERO };
                        for j in 0..d {
                            gx[r * d + j] += (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                if self.wants(*x) {
                    accumulate(slot(grads, *x, g.len()), g, T::ONE, false);
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        for (o, &gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                if self.wants(*x) {
                    let (m, n) = self.value(*x).as_matrix();
                    let gx = slot(grads, *x, m * n);
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, &gv) in gx[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        accumulate(slot(grads, p, len), &g[offset..offset + len], T::ONE, false);
                    }
                    offset += len;
                }
            }
            Op::RepeatRows { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    let gx = slot(grads, *x, n);
                    for row in g.chunks_exact(n) {
                        for (o, &gv) in gx.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                if self.wants(*x) {
                    let (m, n) = self.value(*x).as_matrix();
                    let gt = transpose(g, n, m);
                    accumulate(slot(grads, *x, m * n), &gt, T::ONE, false);
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    accumulate(slot(grads, *x, g.len()), g, T::ONE, false);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let gx = slot(grads, *x, self.value(*x).numel());
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Attention { q, k, v, seq, heads, probs } => {
                self.attention_backward(*q, *k, *v, *seq, *heads, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, dim) = self.value(q).as_matrix();
        let hd = dim / heads;
        let scale = T::ONE / T::from_usize(hd).sqrt();
        let nseq = rows / seq;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![T::ZERO; rows * dim];
        let mut gk = vec![T::ZERO; rows * dim];
        let mut gv = vec![T::ZERO; rows * dim];
        let mut qh = vec![T::ZERO; seq * hd];
        let mut kh = vec![T::ZERO; seq * hd];
        let mut vh = vec![T::ZERO; seq * hd];
        let mut goh = vec![T::ZERO; seq * hd];
        let mut ds = vec![T::ZERO; seq * seq];
        for s in 0..nseq {
            for h in 0..heads {
                gather_head(qd, &mut qh, s * seq, seq, dim, h * hd, hd);
                gather_head(kd, &mut kh, s * seq, seq, dim, h * hd, hd);
                gather_head(vd, &mut vh, s * seq, seq, dim, h * hd, hd);
                gather_head(g, &mut goh, s * seq, seq, dim, h * hd, hd);
                let p = &probs[(s * heads + h) * seq * seq..(s * heads + h + 1) * seq * seq];

                let mut dvh = vec![T::ZERO; seq * hd];
                matmul_tn_acc(p, &goh, &mut dvh, seq, seq, hd);
                for i in 0..seq {
                    let prow = &p[i * seq..(i + 1) * seq];
                    let mut rowdot = T::ZERO;
                    for j in 0..seq {
                        let dp = dot(&goh[i * hd..(i + 1) * hd], &vh[j * hd..(j + 1) * hd]);
                        ds[i * seq + j] = dp;
                        rowdot += dp * prow[j];
                    }
                    for j in 0..seq {
                        ds[i * seq + j] = prow[j] * (ds[i * seq + j] - rowdot) * scale;
                    }
                }
                let mut dqh = vec![T::ZERO; seq * hd];
                matmul_acc(&ds, &kh, &mut dqh, seq, seq, hd);
                let mut dkh = vec![T::ZERO; seq * hd];
                matmul_tn_acc(&ds, &qh, &mut dkh, seq, seq, hd);
                scatter_head(&dqh, &mut gq, s * seq, seq, dim, h * hd, hd);
                scatter_head(&dkh, &mut gk, s * seq, seq, dim, h * hd, hd);
                scatter_head(&dvh, &mut gv, s * seq, seq, dim, h * hd, hd);
            }
        }
        for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(var) {
                accumulate(slot(grads, var, rows * dim), &gr, T::ONE, false);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
}

fn accumulate<T: Real>(dst: &mut [T], g: &[T], factor: T, reduce: bool) {
    if reduce {
        dst[0] += g.iter().copied().sum::<T>() * factor;
    } else {
        for (o, &gv) in dst.iter_mut().zip(g) {
            *o += gv * factor;
        }
    }
}

fn gather_head<T: Real>(src: &[T], dst: &mut [T], row0: usize, seq: usize, dim: usize, col0: usize, hd: usize) {
    for i in 0..seq {
        let from = (row0 + i) * dim + col0;
        dst[i * hd..(i + 1) * hd].copy_from_slice(&src[from..from + hd]);
    }
}

fn scatter_head<T: Real>(src: &[T], dst: &mut [T], row0: usize, seq: usize, dim: usize, col0: usize, hd: usize) {
    for i in 0..seq {
        let to = (row0 + i) * dim + col0;
        for (o, &v) in dst[to..to + hd].iter_mut().zip(&src[i * hd..(i + 1) * hd]) {
            *o += v;
        }
    }
}
