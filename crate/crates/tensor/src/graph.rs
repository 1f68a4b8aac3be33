//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes are
//! appended in evaluation order, so walking the tape backwards visits each node
//! after all of its consumers, which is all the backward pass needs.
//!
//! Parameters live outside the graph in a [`ParamStore`]; [`Graph::param`]
//! copies a parameter onto the tape once and remembers the mapping so that
//! [`Gradients::params`] can hand the accumulated gradients back per parameter.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    AddBcast(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    MaskFill { src: Var, allowed: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout { src: Var, mask: Vec<T> },
    Gather { src: Var, index: Vec<Option<usize>> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Reshape(Var),
    Expand(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, scale: T },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let one = T::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let d_inner = c * (one + T::from_f64_lossy(3.0) * k * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * d_inner;
    (value, deriv)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    /// Evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            rng: None,
        }
    }

    /// Training graph whose dropout masks are drawn from a seeded stream.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf input that collects a gradient (used by gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_bcast", sa, sb));
        }
        let n = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % n])
            .collect();
        let out = Tensor::new(sa, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddBcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a * factor + offset`, elementwise.
    pub fn affine(&mut self, a: Var, factor: T, offset: T) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * factor + offset).collect();
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, factor), rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        self.affine(a, factor, T::zero())
    }

    /// `a: [.., K] · w: [K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.shape().len() != 2 || ta.shape().is_empty() || ta.last_dim() != tw.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tw.shape()));
        }
        let (m, k, n) = (ta.rows(), tw.shape()[0], tw.shape()[1]);
        let mut data = vec![T::zero(); m * n];
        gemm_nn(&mut data, ta.data(), tw.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("nonempty") = n;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(out, Op::MatMul(a, w), rg))
    }

    /// Batched product over a leading group axis: `[G, M, K] · [G, K, N]`, or
    /// `[G, M, K] · [G, N, K]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", sa, sb));
        }
        let mut data = vec![T::zero(); g * m * n];
        for gi in 0..g {
            let c = &mut data[gi * m * n..(gi + 1) * m * n];
            let av = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let bv = &tb.data()[gi * k * n..(gi + 1) * k * n];
            if trans_b {
                gemm_nt(c, av, bv, m, k, n);
            } else {
                gemm_nn(c, av, bv, m, k, n);
            }
        }
        let out = Tensor::new(&[g, m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.last_dim();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Keeps entries whose `allowed` flag is set and overwrites the rest with
    /// [`Scalar::mask_fill`]. `allowed` covers either the whole tensor or its
    /// trailing block, which is then repeated over the leading axes.
    pub fn mask_fill(&mut self, a: Var, allowed: Vec<bool>) -> Result<Var> {
        let ta = self.value(a);
        if allowed.is_empty() || ta.len() % allowed.len() != 0 {
            return Err(mismatch("mask_fill", ta.shape(), &[allowed.len()]));
        }
        let n = allowed.len();
        let fill = T::mask_fill();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if allowed[i % n] { x } else { fill })
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskFill { src: a, allowed }, rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let dn = T::from_usize(d).expect("dim");
        let mut data = Vec::with_capacity(tx.len());
        let mut rstds = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            rstds.push(rstd);
            for (i, &v) in row.iter().enumerate() {
                data.push((v - mean) * rstd * tg.data()[i] + tb.data()[i]);
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd: rstds,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: fn(Var) -> Op<T>) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, op(a), rg)
    }

    /// Inverted dropout. Returns `a` itself on evaluation graphs or for a zero rate.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(a);
        };
        if rate == 0.0 {
            return Ok(a);
        }
        let n = self.nodes[a.0].value.len();
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout { src: a, mask }, rg))
    }

    /// Row gather over a `[R, D]` tensor; `None` yields a zero row.
    pub fn gather_rows(&mut self, src: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let ts = self.value(src);
        if ts.shape().len() != 2 {
            return Err(invalid("gather_rows", format!("expected a matrix, got {:?}", ts.shape())));
        }
        let (rows, d) = (ts.shape()[0], ts.shape()[1]);
        let mut data = vec![T::zero(); index.len() * d];
        for (i, ix) in index.iter().enumerate() {
            if let Some(r) = *ix {
                if r >= rows {
                    return Err(TensorError::IndexOutOfRange { index: r, rows });
                }
                data[i * d..(i + 1) * d].copy_from_slice(ts.row(r));
            }
        }
        let out = Tensor::new(&[index.len(), d], data)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::Gather { src, index }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ts = self.value(src);
        let s = ts.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, dim, inner) = axis_split(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&ts.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::Slice { src, axis, start }, rg))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(src).clone().reshaped(shape)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::Reshape(src), rg))
    }

    /// Repeats `src` `n` times along a new leading axis.
    pub fn expand(&mut self, src: Var, n: usize) -> Var {
        let ts = self.value(src);
        let mut shape = vec![n];
        shape.extend_from_slice(ts.shape());
        let data = ts.data().repeat(n);
        let out = Tensor::new(&shape, data).expect("repeat");
        let rg = self.rg(src);
        self.push(out, Op::Expand(src), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).expect("len");
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::NoTargets);
        }
        let scale = T::one() / T::from_usize(count).expect("count");
        self.cross_entropy_scaled(logits, targets, scale)
    }

    /// `scale * Σ_rows -log softmax(logits)[target]`, skipping `None` targets.
    /// Used when the mean is taken over targets spread across several graphs.
    pub fn cross_entropy_scaled(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        scale: T,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.last_dim();
        if tl.rows() != targets.len() {
            return Err(mismatch("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = vec![T::zero(); tl.len()];
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                return Err(TensorError::TargetOutOfRange { target: t, vocab: v });
            }
            let row = tl.row(r);
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            softmax_in_place(p);
            total = total + log_sum_exp(row) - row[t];
        }
        let out = Tensor::scalar(total * scale);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let zero = T::zero();
        let one = T::one();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| add_into(g, gy));
            }
            Op::AddBcast(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| {
                    let n = g.len();
                    for (k, &v) in gy.iter().enumerate() {
                        g[k % n] = g[k % n] + v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * vb[k];
                    }
                });
                self.acc(grads, *b, |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * va[k];
                    }
                });
            }
            Op::Affine(a, factor) => {
                self.acc(grads, *a, |g| {
                    for (gk, &v) in g.iter_mut().zip(gy) {
                        *gk = *gk + v * *factor;
                    }
                });
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let (m, k, n) = (ta.rows(), tw.shape()[0], tw.shape()[1]);
                self.acc(grads, *a, |g| gemm_nt(g, gy, tw.data(), m, n, k));
                self.acc(grads, *w, |g| gemm_tn(g, ta.data(), gy, k, m, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                self.acc(grads, *a, |g| {
                    for gi in 0..gn {
                        let gya = &gy[gi * m * n..(gi + 1) * m * n];
                        let bv = &tb.data()[gi * k * n..(gi + 1) * k * n];
                        let ga = &mut g[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            // b: n×k, dA = dC · b
                            gemm_nn(ga, gya, bv, m, n, k);
                        } else {
                            // b: k×n, dA = dC · bᵀ
                            gemm_nt(ga, gya, bv, m, n, k);
                        }
                    }
                });
                self.acc(grads, *b, |g| {
                    for gi in 0..gn {
                        let gya = &gy[gi * m * n..(gi + 1) * m * n];
                        let av = &ta.data()[gi * m * k..(gi + 1) * m * k];
                        let gb = &mut g[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // dB (n×k) = dCᵀ · a
                            gemm_tn(gb, gya, av, n, m, k);
                        } else {
                            // dB (k×n) = aᵀ · dC
                            gemm_tn(gb, av, gya, k, m, n);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                self.acc(grads, *a, |g| {
                    for ((gr, yr), gyr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                        let dot: T = yr.iter().zip(gyr).map(|(&p, &q)| p * q).sum();
                        for k in 0..d {
                            gr[k] = gr[k] + yr[k] * (gyr[k] - dot);
                        }
                    }
                });
            }
            Op::MaskFill { src, allowed } => {
                let n = allowed.len();
                self.acc(grads, *src, |g| {
                    for (k, gk) in g.iter_mut().enumerate() {
                        if allowed[k % n] {
                            *gk = *gk + gy[k];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let d = tx.last_dim();
                let dn = T::from_usize(d).expect("dim");
                let xhat: Vec<T> = tx
                    .data()
                    .chunks(d)
                    .zip(rstd)
                    .flat_map(|(row, &r)| {
                        let mean = row.iter().copied().sum::<T>() / dn;
                        row.iter().map(move |&v| (v - mean) * r)
                    })
                    .collect();
                self.acc(grads, *gain, |g| {
                    for (k, &v) in gy.iter().enumerate() {
                        g[k % d] = g[k % d] + v * xhat[k];
                    }
                });
                self.acc(grads, *bias, |g| {
                    for (k, &v) in gy.iter().enumerate() {
                        g[k % d] = g[k % d] + v;
                    }
                });
                self.acc(grads, *x, |g| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let gyr = &gy[span.clone()];
                        let xh = &xhat[span.clone()];
                        let dxhat: Vec<T> =
                            gyr.iter().zip(tg.data()).map(|(&a, &b)| a * b).collect();
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let gr = &mut g[span];
                        for k in 0..d {
                            gr[k] = gr[k] + rs * (dxhat[k] - m1 - xh[k] * m2);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xa = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * gelu_parts(xa[k]).1;
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * y[k] * (one - y[k]);
                    }
                });
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * (one - y[k] * y[k]);
                    }
                });
            }
            Op::Dropout { src, mask } => {
                self.acc(grads, *src, |g| {
                    for k in 0..g.len() {
                        g[k] = g[k] + gy[k] * mask[k];
                    }
                });
            }
            Op::Gather { src, index } => {
                let d = node.value.last_dim();
                self.acc(grads, *src, |g| {
                    for (i, ix) in index.iter().enumerate() {
                        if let Some(r) = *ix {
                            add_into(&mut g[r * d..(r + 1) * d], &gy[i * d..(i + 1) * d]);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    self.acc(grads, *p, |g| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(
                                &mut g[o * len * inner..(o + 1) * len * inner],
                                &gy[src..src + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let ss = self.shape(*src);
                let (outer, dim, inner) = axis_split(ss, *axis);
                let len = node.value.shape()[*axis];
                self.acc(grads, *src, |g| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        add_into(
                            &mut g[base..base + len * inner],
                            &gy[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Reshape(src) => self.acc(grads, *src, |g| add_into(g, gy)),
            Op::Expand(src) => {
                self.acc(grads, *src, |g| {
                    for chunk in gy.chunks(g.len()) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let v = self.value(*logits).last_dim();
                let s = gy[0] * *scale;
                self.acc(grads, *logits, |g| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for k in 0..v {
                            let onehot = if k == t { one } else { zero };
                            g[r * v + k] = g[r * v + k] + s * (probs[r * v + k] - onehot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |g| {
                    for gk in g.iter_mut() {
                        *gk = *gk + gy[0];
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(g);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Numerically stable softmax of one row. Entries equal to `-inf` get zero mass.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients, sized for `store`.
    pub fn params(&self, store: &ParamStore<T>) -> Grads<T> {
        let mut out = Grads::zeros_like(store);
        self.accumulate_into(&mut out);
        out
    }

    pub fn accumulate_into(&self, out: &mut Grads<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out.accumulate(id, g);
            }
        }
    }
}

/// Draws `n` uniform values in `[-1, 1)`; convenience for tests and init.
pub fn uniform_values<T: Scalar>(rng: &mut impl Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64_lossy(rng.random::<f64>() * 2.0 - 1.0))
        .collect()
}
