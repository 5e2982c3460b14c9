//! Reverse-mode tape.
//!
//! Every forward op appends a node whose inputs already live on the tape, so
//! the node list is topologically ordered by construction and `backward` is a
//! single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm_batched, matmul_dims};
use super::{shape_err, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;
/// `sqrt(2 / pi)` for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    LayerNorm { x: Var, scale: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var, tanh: Vec<T> },
    Exp(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<usize>, weights: Vec<T>, denom: T },
    Embedding { table: Var, ids: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    Dropout { x: Var, mask: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    L2Normalize { x: Var, norms: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation. Single owner, not shared across threads.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf nodes after a backward sweep.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// `small` broadcasts against `big` when its shape is a suffix of `big`'s.
fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn reduce_to_suffix<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.to_vec());
    let n = out.numel();
    {
        let o = out.data_mut();
        for chunk in g.data().chunks(n) {
            for (acc, &x) in o.iter_mut().zip(chunk) {
                *acc += x;
            }
        }
    }
    out
}

pub(crate) fn permute_values<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = t.numel();
    let mut data = Vec::with_capacity(numel);
    let src = t.data();
    // Innermost axis handled as a strided run; outer axes via an odometer.
    let inner = out_shape.last().copied().unwrap_or(1);
    let inner_stride = strides.last().copied().unwrap_or(1);
    let outer_rank = rank.saturating_sub(1);
    let mut idx = vec![0usize; outer_rank];
    let mut base = 0usize;
    if numel > 0 {
        loop {
            if inner_stride == 1 {
                data.extend_from_slice(&src[base..base + inner]);
            } else {
                data.extend((0..inner).map(|j| src[base + j * inner_stride]));
            }
            let mut ax = outer_rank;
            loop {
                if ax == 0 {
                    return Tensor::new(out_shape, data).expect("permute shape");
                }
                ax -= 1;
                idx[ax] += 1;
                base += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                base -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::new(out_shape, data).expect("permute shape")
}

/// `tanh(u) = 1 - 2 / (exp(2u) + 1)`; exact, and faster than libm's tanh.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// The tanh term of GELU at `x`.
fn gelu_tanh<T: Scalar>(x: T) -> T {
    fast_tanh(T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x))
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_tanh(x))
}

/// Derivative of GELU at `x` given its tanh term `t`.
fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Tanh-form GELU on a plain value:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_value<T: Scalar>(x: T) -> T {
    gelu_scalar(x)
}

/// Row-wise softmax over the last axis.
pub(crate) fn softmax_rows<T: Scalar>(data: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &x in row {
            let e = (x - max).exp();
            sum += e;
            out.push(e);
        }
        let inv = T::one() / sum;
        for y in &mut out[start..] {
            *y *= inv;
        }
    }
    out
}

/// `log softmax(row)[target]` for each row of a `[.., V]` logits tensor.
pub fn token_log_probs<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Vec<T> {
    let v = logits.last_dim();
    logits
        .data()
        .chunks(v)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            row[t] - lse
        })
        .collect()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn broadcast_pair(&self, a: Var, b: Var, name: &str) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if suffix_of(sb, sa) {
            Ok((a, b))
        } else if suffix_of(sa, sb) {
            Ok((b, a))
        } else {
            shape_err(format!("{name}: {sa:?} and {sb:?} do not broadcast"))
        }
    }

    /// Elementwise sum; the smaller operand may broadcast over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair(a, b, "add")?;
        let bv = self.value(big);
        let sv = self.value(small).data();
        let n = sv.len();
        let data: Vec<T> = bv.data().iter().enumerate().map(|(i, &x)| x + sv[i % n]).collect();
        let value = Tensor::new(bv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(big, small), &[big, small]))
    }

    /// Elementwise product; the smaller operand may broadcast over leading axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair(a, b, "mul")?;
        let bv = self.value(big);
        let sv = self.value(small).data();
        let n = sv.len();
        let data: Vec<T> = bv.data().iter().enumerate().map(|(i, &x)| x * sv[i % n]).collect();
        let value = Tensor::new(bv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(big, small), &[big, small]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// `a[.., m, k] @ b[.., k, n]`; either side may omit the batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::gemm::matmul_values(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for rank {rank}"));
        }
        let value = permute_values(self.value(a), perm);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Scale-only layer normalization over the last axis (no bias term).
    pub fn layer_norm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(scale) != [d] {
            return shape_err(format!("layer_norm scale {:?} vs width {d}", self.shape(scale)));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::from_usize(d).expect("width");
        let xv = self.value(x);
        let sv = self.value(scale).data();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.numel() / d.max(1));
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * sv[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, scale, xhat, rstd }, &[x, scale]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<T> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let data = xv.data().iter().zip(&tanh).map(|(&v, &t)| T::lit(0.5) * v * (T::one() + t)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("gelu shape");
        self.push(value, Op::Gelu { x, tanh }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = softmax_rows(xv.data(), xv.last_dim());
        let value = Tensor::new(xv.shape().to_vec(), data).expect("softmax shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Weighted mean of `-log softmax(logits)[target]` over rows of `[.., V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v.max(1);
        if targets.len() != rows || weights.len() != rows {
            return shape_err(format!(
                "cross_entropy: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return shape_err(format!("target {t} outside vocabulary of {v}"));
        }
        let denom: T = weights.iter().copied().sum();
        if denom <= T::zero() {
            return Err(Error::EmptyLoss);
        }
        let probs = softmax_rows(lv.data(), v);
        let mut total = T::zero();
        for ((row, &t), &w) in lv.data().chunks(v).zip(targets).zip(weights) {
            if w == T::zero() {
                continue;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += w * (lse - row[t]);
        }
        let value = Tensor::scalar(total / denom);
        let op = Op::CrossEntropy { logits, probs, targets: targets.to_vec(), weights: weights.to_vec(), denom };
        Ok(self.push(value, op, &[logits]))
    }

    /// Rows of `table[V, D]` gathered by `ids`; result shape `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return shape_err("embedding table must be 2-D");
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if ids_shape.iter().product::<usize>() != ids.len() {
            return shape_err("embedding ids do not match their shape");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return shape_err(format!("token id {id} outside table of {vocab}"));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("mean over axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = T::one() / T::from_usize(len).expect("len");
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in dst.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for acc in dst.iter_mut() {
                *acc *= inv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).expect("numel");
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Inverted dropout with a mask drawn from `seed`. Call only in training.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return shape_err(format!("concat: {s:?} vs {first:?} along {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("slice {start}..{} of axis {axis} in {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let eps = T::lit(L2_EPS);
        let mut norms = Vec::with_capacity(xv.numel() / d.max(1));
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("l2 shape");
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    /// Backward sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        if self.value(output).numel() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(output)));
        }
        let seed = Tensor::ones(self.shape(output).to_vec());
        self.backward_from(&[(output, seed)])
    }

    /// Backward sweep seeded with explicit output gradients.
    pub fn backward_from(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return shape_err(format!("seed {:?} for node {:?}", g.shape(), self.shape(*v)));
            }
            self.accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    let gb = reduce_to_suffix(g, self.shape(*b));
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *a, g.clone());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b).data();
                let n = bv.len();
                if self.wants(*a) {
                    let ga = Tensor::from_fn(av.shape().to_vec(), |i| g.data()[i] * bv[i % n]);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let prod = Tensor::from_fn(av.shape().to_vec(), |i| g.data()[i] * av.data()[i]);
                    self.accumulate(grads, *b, reduce_to_suffix(&prod, self.shape(*b)));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.map(|x| x * *c));
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, permute_values(g, &inv));
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(self.shape(*a).to_vec()).expect("reshape back");
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, scale, xhat, rstd } => {
                let d = self.value(*scale).numel();
                let sv = self.value(*scale).data();
                if self.wants(*scale) {
                    let mut gs = vec![T::zero(); d];
                    for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gs[j] += grow[j] * hrow[j];
                        }
                    }
                    self.accumulate(grads, *scale, Tensor::new(vec![d], gs).expect("ln scale"));
                }
                if self.wants(*x) {
                    let dn = T::from_usize(d).expect("width");
                    let mut gx = Vec::with_capacity(g.numel());
                    for ((grow, hrow), &r) in g.data().chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * sv[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            gx.push(r * (grow[j] * sv[j] - m1 - hrow[j] * m2));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx).expect("ln x"));
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x).data();
                let gx = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * gelu_grad(xv[i], tanh[i]));
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let gx = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * y[i]);
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut gx = Vec::with_capacity(g.numel());
                for (grow, yrow) in g.data().chunks(d).zip(node.value.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&a, &y)| y * (a - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx).expect("softmax"));
            }
            Op::CrossEntropy { logits, probs, targets, weights, denom } => {
                let v = self.value(*logits).last_dim();
                let up = g.item() / *denom;
                let mut gl = vec![T::zero(); probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let s = up * w;
                    let row = &mut gl[r * v..(r + 1) * v];
                    for (o, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *o = s * p;
                    }
                    row[t] -= s;
                }
                let gl = Tensor::new(self.shape(*logits).to_vec(), gl).expect("ce grad");
                self.accumulate(grads, *logits, gl);
            }
            Op::Embedding { table, ids } => {
                let tshape = self.shape(*table).to_vec();
                let d = tshape[1];
                let mut gt = Tensor::zeros(tshape);
                let dst = gt.data_mut();
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dst[id * d + j] += g.data()[k * d + j];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let inv = T::one() / T::from_usize(len).expect("len");
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(src.iter().map(|&v| v * inv));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx).expect("mean grad"));
            }
            Op::SumAll(x) => {
                let gx = Tensor::full(self.shape(*x).to_vec(), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let gx = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * mask[i]);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * shape[*axis] + offset) * inner;
                            gp.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), gp).expect("concat"));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut gx = Tensor::zeros(shape.clone());
                let dst = gx.data_mut();
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    dst[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.last_dim();
                let mut gx = Vec::with_capacity(g.numel());
                for ((grow, yrow), &n) in g.data().chunks(d).zip(node.value.data().chunks(d)).zip(norms) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&a, &y)| (a - y * dot) / n));
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx).expect("l2 grad"));
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let d = matmul_dims(av.shape(), bv.shape()).expect("recorded matmul");
        let (m, k, n, batch) = (d.m, d.k, d.n, d.batch);
        if self.wants(a) {
            // dA = G @ B^T
            let mut ga = Tensor::zeros(av.shape().to_vec());
            if d.a_batched && !d.b_batched {
                gemm_batched(1, batch * m, n, k, g.data(), 0, false, bv.data(), 0, true, ga.data_mut(), 0, T::zero());
            } else {
                let sb = if d.b_batched { k * n } else { 0 };
                let sc = if d.a_batched { m * k } else { 0 };
                gemm_batched(batch, m, n, k, g.data(), m * n, false, bv.data(), sb, true, ga.data_mut(), sc, T::zero());
            }
            self.accumulate(grads, a, ga);
        }
        if self.wants(b) {
            // dB = A^T @ G
            let mut gb = Tensor::zeros(bv.shape().to_vec());
            if d.a_batched && !d.b_batched {
                gemm_batched(1, k, batch * m, n, av.data(), 0, true, g.data(), 0, false, gb.data_mut(), 0, T::zero());
            } else {
                let sa = if d.a_batched { m * k } else { 0 };
                let sc = if d.b_batched { k * n } else { 0 };
                gemm_batched(batch, k, m, n, av.data(), sa, true, g.data(), m * n, false, gb.data_mut(), sc, T::zero());
            }
            self.accumulate(grads, b, gb);
        }
    }
}
