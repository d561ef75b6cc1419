//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Tape`] records one forward pass. Each recorded node owns its output
//! value and, when it participates in differentiation, the information its
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse
//! recording order, which is a valid reverse topological order because every
//! node's inputs are recorded before it.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, TensorError};
use crate::kernels::{gemm, gemm_nt, gemm_nt_into, gemm_tn, gemm_tn_into, transpose};
use crate::tensor::{Float, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant of the tanh GELU approximation, `sqrt(2 / pi)`.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, a_batched: bool, b_batched: bool, n: usize, k: usize, m: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Gelu { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    SlicePrefix { x: Var, axis: usize, n: usize },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    SplitHeads { x: Var, part: usize, parts: usize, heads: usize, head_dim: usize },
    MergeHeads { x: Var, heads: usize },
    PrependToken { x: Var, token: Var },
    SelectToken { x: Var, index: usize },
    Dropout { x: Var, mask: Vec<T> },
    Sum { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T>, smoothing: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    macs: u64,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf nodes produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn finite<T: Float>(op: &'static str, data: &[T]) -> Result<()> {
    if data.chunks(256).all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite())) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// In-place softmax of one contiguous row.
fn softmax_row<T: Float>(x: &mut [T]) {
    let pick = |m: T, v: T| if v > m { v } else { m };
    let mut lanes = [T::neg_infinity(); 8];
    let mut chunks = x.chunks_exact(8);
    for c in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l = pick(*l, v);
        }
    }
    let max = chunks.remainder().iter().chain(&lanes).fold(T::neg_infinity(), |m, &v| pick(m, v));
    for v in x.iter_mut() {
        *v = (*v - max).fast_exp();
    }
    let mut lanes = [T::zero(); 8];
    let mut chunks = x.chunks_exact(8);
    for c in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l += v;
        }
    }
    let sum = lanes.iter().copied().sum::<T>() + chunks.remainder().iter().copied().sum::<T>();
    let inv = T::one() / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, macs: 0 }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, macs: 0 }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matrix products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product. `a` is `[.., n, k]`; `b` is either `[k, m]`, applied to
    /// every leading index of `a`, or `[batch, k, m]` against `a = [batch, n, k]`
    /// where either batch extent may be 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let m = sb[sb.len() - 1];
        let (out, op) = if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            let mut c = vec![T::zero(); rows * m];
            gemm(self.value(a).data(), self.value(b).data(), &mut c, rows, k, m);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = m;
            self.macs += (rows * k * m) as u64;
            let op = Op::MatMul { a, b, batch: 1, a_batched: false, b_batched: false, n: rows, k, m };
            (Tensor::from_parts(shape, c), op)
        } else {
            if sa.len() != 3 {
                return Err(shape_err("matmul", &sa, &sb));
            }
            let (ba, n) = (sa[0], sa[1]);
            let bb = sb[0];
            if ba != bb && ba != 1 && bb != 1 {
                return Err(shape_err("matmul", &sa, &sb));
            }
            let batch = ba.max(bb);
            let (a_batched, b_batched) = (ba == batch && batch > 1, bb == batch && batch > 1);
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let mut c = vec![T::zero(); batch * n * m];
            c.par_chunks_mut(n * m).enumerate().with_min_len(16).for_each(|(i, c)| {
                let ai = if a_batched { i } else { 0 };
                let bi = if b_batched { i } else { 0 };
                gemm(&ad[ai * n * k..(ai + 1) * n * k], &bd[bi * k * m..(bi + 1) * k * m], c, n, k, m);
            });
            self.macs += (batch * n * k * m) as u64;
            let op = Op::MatMul { a, b, batch, a_batched, b_batched, n, k, m };
            (Tensor::from_parts(vec![batch, n, m], c), op)
        };
        finite("matmul", out.data())?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// Elementwise sum. `b` must have the shape of `a` or of a trailing part
    /// of it, in which case it is repeated over the leading (batch) axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let bd = self.value(b).data();
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.numel());
        for chunk in av.data().chunks(bd.len()) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| x + y));
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        finite("add", out.data())?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        finite("mul", out.data())?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|&x| x * factor).collect());
        finite("scale", out.data())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Scale { a, factor }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let av = self.value(a);
        let data = av.data().iter().map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).fast_tanh())).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        finite("gelu", out.data())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Gelu { a }, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Range { op: "softmax", msg: format!("axis {axis} for shape {shape:?}") });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = self.value(a).clone();
        let data = out.data_mut();
        if inner == 1 {
            data.chunks_mut(len).for_each(softmax_row);
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let x = &mut data[o * len * inner + i..];
                    let mut max = T::neg_infinity();
                    for j in 0..len {
                        max = max.max(x[j * inner]);
                    }
                    let mut sum = T::zero();
                    for j in 0..len {
                        let e = (x[j * inner] - max).fast_exp();
                        x[j * inner] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        x[j * inner] /= sum;
                    }
                }
            }
        }
        finite("softmax", out.data())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax { a, outer, len, inner }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    /// Statistics use exactly the width of `x` as given.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(TensorError::Param { op: "layer_norm", msg: format!("eps must be positive, got {eps}") });
        }
        let sx = self.shape(x).to_vec();
        let width = *sx.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [width] {
                return Err(shape_err("layer_norm", &sx, self.shape(p)));
            }
        }
        let rows = numel(&sx) / width;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = self.value(x).clone();
        let mut xhat = vec![T::zero(); out.numel()];
        let mut rstd = vec![T::zero(); rows];
        let w = T::lit(width as f64);
        for ((row, xh), rs) in out.data_mut().chunks_mut(width).zip(xhat.chunks_mut(width)).zip(&mut rstd) {
            let mean = row.iter().copied().sum::<T>() / w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
            let r = T::one() / (var + eps).sqrt();
            *rs = r;
            for i in 0..width {
                let h = (row[i] - mean) * r;
                xh[i] = h;
                row[i] = h * g[i] + b[i];
            }
        }
        finite("layer_norm", out.data())?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// First `n` entries along `axis`. Gradients flow back into that prefix only.
    pub fn slice_prefix(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || n == 0 || n > sx[axis] {
            return Err(TensorError::Range {
                op: "slice_prefix",
                msg: format!("cannot take {n} entries along axis {axis} of {sx:?}"),
            });
        }
        let mut block = sx.clone();
        block[axis] = n;
        let out = self.value(x).prefix_block(&sx, &block, &block)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SlicePrefix { x, axis, n }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(TensorError::Shape { op: "transpose", msg: format!("rank < 2: {sa:?}") });
        }
        let (rows, cols) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch = numel(&sa) / (rows * cols);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len());
        for chunk in src.chunks(rows * cols) {
            data.extend(transpose(chunk, rows, cols));
        }
        let mut shape = sa;
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Transpose { a, batch, rows, cols }, rg))
    }

    /// From `x = [B, N, parts * W]`, takes block `part` of the last axis and
    /// returns its first `heads` heads of width `head_dim` as `[B * heads, N, head_dim]`.
    pub fn split_heads(&mut self, x: Var, part: usize, parts: usize, heads: usize, head_dim: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || part >= parts || !sx[2].is_multiple_of(parts) || heads * head_dim > sx[2] / parts {
            return Err(TensorError::Shape {
                op: "split_heads",
                msg: format!("{heads} heads of width {head_dim} from part {part}/{parts} of {sx:?}"),
            });
        }
        let (b, n, width) = (sx[0], sx[1], sx[2]);
        let offset = part * (width / parts);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * heads * n * head_dim);
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..n {
                    let start = (bi * n + t) * width + offset + h * head_dim;
                    data.extend_from_slice(&src[start..start + head_dim]);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let out = Tensor::from_parts(vec![b * heads, n, head_dim], data);
        Ok(self.push(out, Op::SplitHeads { x, part, parts, heads, head_dim }, rg))
    }

    /// Inverse layout of [`Tape::split_heads`]: `[B * heads, N, d]` to `[B, N, heads * d]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || heads == 0 || !sx[0].is_multiple_of(heads) {
            return Err(TensorError::Shape { op: "merge_heads", msg: format!("{heads} heads from {sx:?}") });
        }
        let (b, n, d) = (sx[0] / heads, sx[1], sx[2]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..n {
                    let from = ((bi * heads + h) * n + t) * d;
                    let to = (bi * n + t) * heads * d + h * d;
                    data[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![b, n, heads * d], data), Op::MergeHeads { x, heads }, rg))
    }

    /// Prepends `token` (`[1, W]` or `[W]`) to every sequence of `x = [B, P, W]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let st = self.shape(token);
        if sx.len() != 3 || numel(st) != sx[2] || *st.last().unwrap() != sx[2] {
            return Err(shape_err("prepend_token", &sx, st));
        }
        let (b, p, w) = (sx[0], sx[1], sx[2]);
        let tok = self.value(token).data();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * (p + 1) * w);
        for chunk in src.chunks(p * w) {
            data.extend_from_slice(tok);
            data.extend_from_slice(chunk);
        }
        let rg = self.any_grad(&[x, token]);
        Ok(self.push(Tensor::from_parts(vec![b, p + 1, w], data), Op::PrependToken { x, token }, rg))
    }

    /// `x[:, index, :]` of a `[B, N, W]` tensor.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || index >= sx[1] {
            return Err(TensorError::Range { op: "select_token", msg: format!("token {index} of {sx:?}") });
        }
        let (b, n, w) = (sx[0], sx[1], sx[2]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * w);
        for bi in 0..b {
            let start = (bi * n + index) * w;
            data.extend_from_slice(&src[start..start + w]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![b, w], data), Op::SelectToken { x, index }, rg))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Param { op: "dropout", msg: format!("probability {p} not in [0, 1)") });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(x).numel()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        finite("sum", &[s])?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, rg))
    }

    /// Mean cross-entropy of `logits = [B, C]` against integer labels, with
    /// optional label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                msg: format!("logits {sl:?} against {} labels", labels.len()),
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Param { op: "cross_entropy", msg: format!("smoothing {smoothing}") });
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Range { op: "cross_entropy", msg: format!("label {bad} not in [0, {c})") });
        }
        let eps = T::lit(smoothing);
        let off = eps / T::lit(c as f64);
        let on = T::one() - eps + off;
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (i, (&y, row)) in labels.iter().zip(z.chunks(c)).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).fast_exp();
                sum += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= sum;
            }
            let lse = max + sum.ln();
            let target = if smoothing == 0.0 {
                row[y]
            } else {
                row.iter().enumerate().map(|(j, &v)| if j == y { on * v } else { off * v }).sum::<T>()
            };
            total += lse - target;
        }
        let loss = total / T::lit(b as f64);
        finite("cross_entropy", &[loss])?;
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs, smoothing: eps };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Back-propagates from the scalar `loss`. Returns gradients for every
    /// leaf that requires them and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", node.value.shape()),
            });
        }
        if !node.requires_grad {
            return Err(TensorError::Param { op: "backward", msg: "loss does not depend on any parameter".into() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, g: Vec<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => add_into(existing, &g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, batch, a_batched, b_batched, n, k, m } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if batch == 1 && !a_batched && !b_batched && self.shape(b).len() == 2 {
                    if rg(a) {
                        self.accumulate(grads, a, gemm_nt(&g, bd, n, m, k));
                    }
                    if rg(b) {
                        self.accumulate(grads, b, gemm_tn(ad, &g, n, k, m));
                    }
                    return;
                }
                if rg(a) {
                    let mut per = vec![T::zero(); batch * n * k];
                    per.par_chunks_mut(n * k).enumerate().with_min_len(16).for_each_init(
                        Vec::new,
                        |scratch, (i, out)| {
                            let bi = if b_batched { i } else { 0 };
                            let gi = &g[i * n * m..(i + 1) * n * m];
                            gemm_nt_into(gi, &bd[bi * k * m..(bi + 1) * k * m], out, n, m, k, scratch);
                        },
                    );
                    let ga = if a_batched { per } else { reduce_in_order(&per, n * k) };
                    self.accumulate(grads, a, ga);
                }
                if rg(b) {
                    let mut per = vec![T::zero(); batch * k * m];
                    per.par_chunks_mut(k * m).enumerate().with_min_len(16).for_each(|(i, out)| {
                        let ai = if a_batched { i } else { 0 };
                        gemm_tn_into(&ad[ai * n * k..(ai + 1) * n * k], &g[i * n * m..(i + 1) * n * m], out, n, k, m);
                    });
                    let gb = if b_batched { per } else { reduce_in_order(&per, k * m) };
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add { a, b } => {
                if rg(b) {
                    let len = self.value(b).numel();
                    let mut gb = vec![T::zero(); len];
                    for chunk in g.chunks(len) {
                        add_into(&mut gb, chunk);
                    }
                    self.accumulate(grads, b, gb);
                }
                if rg(a) {
                    self.accumulate(grads, a, g);
                }
            }
            &Op::Mul { a, b } => {
                if rg(a) {
                    let ga = g.iter().zip(self.value(b).data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, a, ga);
                }
                if rg(b) {
                    let gb = g.iter().zip(self.value(a).data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Scale { a, factor } => {
                self.accumulate(grads, a, g.into_iter().map(|v| v * factor).collect());
            }
            &Op::Gelu { a } => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let ga = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| {
                        let t = (c * (x + k * x * x * x)).fast_tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        g * (half * (T::one() + t) + half * x * dt)
                    })
                    .collect();
                self.accumulate(grads, a, ga);
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            ga[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let width = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if rg(*gamma) || rg(*beta) {
                    let mut gg = vec![T::zero(); width];
                    let mut gb = vec![T::zero(); width];
                    for (grow, xrow) in g.chunks(width).zip(xhat.chunks(width)) {
                        for i in 0..width {
                            gg[i] += grow[i] * xrow[i];
                            gb[i] += grow[i];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gb);
                }
                if rg(*x) {
                    let w = T::lit(width as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (((out, grow), xrow), &r) in
                        gx.chunks_mut(width).zip(g.chunks(width)).zip(xhat.chunks(width)).zip(rstd)
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for i in 0..width {
                            let d = grow[i] * gam[i];
                            mean_d += d;
                            mean_dx += d * xrow[i];
                        }
                        mean_d /= w;
                        mean_dx /= w;
                        for i in 0..width {
                            let d = grow[i] * gam[i];
                            out[i] = r * (d - mean_d - xrow[i] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            &Op::SlicePrefix { x, axis, n } => {
                let full = self.shape(x).to_vec();
                let mut block = full.clone();
                block[axis] = n;
                let mut gx = Tensor::zeros(&full);
                gx.write_prefix_block(&full, &block, &g).expect("prefix block of own input");
                self.accumulate(grads, x, gx.into_data());
            }
            &Op::Transpose { a, batch, rows, cols } => {
                let mut ga = Vec::with_capacity(g.len());
                for i in 0..batch {
                    ga.extend(transpose(&g[i * rows * cols..(i + 1) * rows * cols], cols, rows));
                }
                self.accumulate(grads, a, ga);
            }
            &Op::SplitHeads { x, part, parts, heads, head_dim } => {
                let sx = self.shape(x);
                let (b, n, width) = (sx[0], sx[1], sx[2]);
                let offset = part * (width / parts);
                if !rg(x) {
                    return;
                }
                // The parts of `x` are disjoint, so each split adds straight into its slot.
                let gx = grads[x.0].get_or_insert_with(|| vec![T::zero(); b * n * width]);
                let mut src = g.chunks(head_dim);
                for bi in 0..b {
                    for h in 0..heads {
                        for t in 0..n {
                            let start = (bi * n + t) * width + offset + h * head_dim;
                            add_into(&mut gx[start..start + head_dim], src.next().unwrap());
                        }
                    }
                }
            }
            &Op::MergeHeads { x, heads } => {
                let sx = self.shape(x);
                let (b, n, d) = (sx[0] / heads, sx[1], sx[2]);
                let mut gx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for h in 0..heads {
                        for t in 0..n {
                            let to = ((bi * heads + h) * n + t) * d;
                            let from = (bi * n + t) * heads * d + h * d;
                            gx[to..to + d].copy_from_slice(&g[from..from + d]);
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::PrependToken { x, token } => {
                let sx = self.shape(x);
                let (p, w) = (sx[1], sx[2]);
                if rg(token) {
                    let mut gt = vec![T::zero(); w];
                    for seq in g.chunks((p + 1) * w) {
                        add_into(&mut gt, &seq[..w]);
                    }
                    self.accumulate(grads, token, gt);
                }
                if rg(x) {
                    let mut gx = Vec::with_capacity(numel(sx));
                    for seq in g.chunks((p + 1) * w) {
                        gx.extend_from_slice(&seq[w..]);
                    }
                    self.accumulate(grads, x, gx);
                }
            }
            &Op::SelectToken { x, index } => {
                let sx = self.shape(x);
                let (b, n, w) = (sx[0], sx[1], sx[2]);
                let mut gx = vec![T::zero(); b * n * w];
                for bi in 0..b {
                    let start = (bi * n + index) * w;
                    gx[start..start + w].copy_from_slice(&g[bi * w..(bi + 1) * w]);
                }
                self.accumulate(grads, x, gx);
            }
            Op::Dropout { x, mask } => {
                let gx = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, gx);
            }
            &Op::Sum { a } => {
                let n = self.value(a).numel();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, labels, probs, smoothing } => {
                let c = self.shape(*logits)[1];
                let b = labels.len();
                let scale = g[0] / T::lit(b as f64);
                let off = *smoothing / T::lit(c as f64);
                let on = T::one() - *smoothing + off;
                let mut gl = probs.clone();
                for (row, &y) in gl.chunks_mut(c).zip(labels) {
                    for (j, v) in row.iter_mut().enumerate() {
                        let q = if j == y { on } else { off };
                        *v = (*v - q) * scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

/// Sums consecutive `len`-long parts of `parts` in order.
fn reduce_in_order<T: Float>(parts: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for p in parts.chunks(len) {
        add_into(&mut out, p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5., 6., 7., 8.]);
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("dimension"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = tape.constant(t(&[7], &v));
        let y = tape.softmax(x, 0).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0., 1., 0., 1.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[3], &[1., 1., 1.]));
        let b = tape.constant(t(&[3], &[0., 0., 0.]));
        let x = tape.constant(t(&[3], &[1., 1., 1.]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0.]);

        let g = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let x = tape.constant(t(&[2], &[0., 2.]));
        let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[-1., 1.]);
        assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(TensorError::Param { .. })));
    }

    #[test]
    fn layer_norm_on_sliced_width_matches_fresh_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wide: Vec<f64> = (0..2 * 768).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let narrow: Vec<f64> = wide.chunks(768).flat_map(|r| r[..256].to_vec()).collect();
        let gamma: Vec<f64> = (0..256).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..256).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[256], &gamma));
        let b = tape.constant(t(&[256], &beta));
        let x = tape.constant(t(&[2, 768], &wide));
        let xs = tape.slice_prefix(x, 1, 256).unwrap();
        let y1 = tape.layer_norm(xs, g, b, 1e-6).unwrap();
        let x2 = tape.constant(t(&[2, 256], &narrow));
        let y2 = tape.layer_norm(x2, g, b, 1e-6).unwrap();
        assert_eq!(tape.value(y1), tape.value(y2));
    }

    #[test]
    fn gelu_and_cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[0.]));
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.]);
        let z = tape.param(t(&[1, 2], &[0., 0.]));
        let l = tape.cross_entropy(z, &[0], 0.0).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(tape.cross_entropy(z, &[2], 0.0), Err(TensorError::Range { .. })));
    }

    #[test]
    fn slice_prefix_routes_gradient_to_prefix_only() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 6], &[1.; 12]));
        let s = tape.slice_prefix(x, 1, 4).unwrap();
        assert_eq!(tape.shape(s), &[2, 4]);
        let l = tape.sum(s).unwrap();
        let grads = tape.backward(l).unwrap();
        let g = grads.get(x).unwrap().data();
        for row in g.chunks(6) {
            assert_eq!(&row[..4], &[1., 1., 1., 1.]);
            assert_eq!(&row[4..], &[0., 0.]);
        }
        assert!(matches!(tape.slice_prefix(x, 1, 7), Err(TensorError::Range { .. })));
    }

    #[test]
    fn split_and_merge_heads_are_inverse() {
        let mut tape = Tape::<f64>::new();
        let v: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        let x = tape.constant(t(&[2, 3, 4], &v));
        let h = tape.split_heads(x, 0, 1, 2, 2).unwrap();
        assert_eq!(tape.shape(h), &[4, 3, 2]);
        let m = tape.merge_heads(h, 2).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1], &[3e38]).unwrap());
        let y = tape.constant(Tensor::from_f64(&[1, 1], &[10.0]).unwrap());
        assert!(matches!(tape.matmul(x, y), Err(TensorError::NonFinite { op: "matmul" })));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.param(t(&[1], &[1.]));
        let y = tape.sum(x).unwrap();
        assert!(!tape.requires_grad(y));
        assert!(tape.backward(y).is_err());
    }
}
