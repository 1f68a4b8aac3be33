//! Transformer building blocks expressed as graph operations.
//!
//! Layers only hold [`ParamId`]s; the values live in a [`ParamStore`] and are
//! put on the tape by [`Graph::param`]. Initialization follows the usual
//! transformer defaults: normal(0, 0.02) weights, zero biases, unit gains.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.normal(&format!("{name}.weight"), &[input, output], INIT_STD, rng);
        let bias = bias.then(|| store.zeros(&format!("{name}.bias"), &[output]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bcast(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(&format!("{name}.gain"), &[dim]),
            bias: store.zeros(&format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer position-wise MLP with a GELU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        dropout: f64,
    ) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = g.dropout(h, dropout)?;
        self.down.forward(g, store, h)
    }
}

/// Which (query, key) pairs may attend, shared by all groups or given per group.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub queries: usize,
    pub keys: usize,
    groups: Option<usize>,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// Every query sees every key.
    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            groups: None,
            allowed: vec![true; queries * keys],
        }
    }

    /// Query `i` sees keys `0..=i + (keys - queries)`; with `queries == keys`
    /// this is the usual lower-triangular mask.
    pub fn causal(queries: usize, keys: usize) -> Self {
        let offset = keys.saturating_sub(queries);
        Self::from_fn(queries, keys, |q, k| k <= q + offset)
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(queries * keys);
        for q in 0..queries {
            for k in 0..keys {
                allowed.push(f(q, k));
            }
        }
        Self {
            queries,
            keys,
            groups: None,
            allowed,
        }
    }

    /// A distinct mask per group; `allowed` is `[groups, queries, keys]`.
    pub fn per_group(groups: usize, queries: usize, keys: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != groups * queries * keys {
            return Err(TensorError::ShapeMismatch {
                op: "attn_mask",
                left: vec![groups, queries, keys],
                right: vec![allowed.len()],
            });
        }
        Ok(Self {
            queries,
            keys,
            groups: Some(groups),
            allowed,
        })
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    fn validate(&self, groups: usize) -> Result<()> {
        if let Some(n) = self.groups {
            if n != groups {
                return Err(TensorError::ShapeMismatch {
                    op: "attn_mask",
                    left: vec![n],
                    right: vec![groups],
                });
            }
        }
        for (r, row) in self.allowed.chunks(self.keys).enumerate() {
            if !row.iter().any(|&a| a) {
                return Err(TensorError::FullyMaskedRow {
                    group: r / self.queries,
                    row: r % self.queries,
                });
            }
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// streams (self-attention passes the same tensor twice).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                msg: format!("dim {dim} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            // A key bias adds the same amount to every score of a query.
            key: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    /// `query: [G, Lq, D]`, `kv: [G, Lk, D]` -> `[G, Lq, D]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        kv: Var,
        mask: &AttnMask,
        dropout: f64,
    ) -> Result<Var> {
        let (sq, sk) = (g.shape(query).to_vec(), g.shape(kv).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: sq,
                right: sk,
            });
        }
        if mask.queries != sq[1] || mask.keys != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "attention mask",
                left: vec![sq[1], sk[1]],
                right: vec![mask.queries, mask.keys],
            });
        }
        mask.validate(sq[0])?;
        let q = self.query.forward(g, store, query)?;
        let k = self.key.forward(g, store, kv)?;
        let v = self.value.forward(g, store, kv)?;
        let dh = self.dim / self.heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 2, h * dh, dh)?;
            let kh = g.slice(k, 2, h * dh, dh)?;
            let vh = g.slice(v, 2, h * dh, dh)?;
            let scores = g.bmm(qh, kh, true)?;
            let scores = g.scale(scores, scale);
            let scores = if mask.is_full() {
                scores
            } else {
                g.mask_fill(scores, mask.allowed().to_vec())?
            };
            let probs = g.softmax(scores);
            let probs = g.dropout(probs, dropout)?;
            outs.push(g.bmm(probs, vh, false)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 2)?
        };
        self.output.forward(g, store, merged)
    }
}

/// Single-layer gated recurrent unit.
///
/// `r = σ(x·W_ir + b_ir + h·W_hr + b_hr)`, `z` likewise,
/// `n = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub dim: usize,
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.ih"), input, 3 * dim, true, rng),
            hidden: Linear::new(store, &format!("{name}.hh"), dim, 3 * dim, true, rng),
            dim,
        }
    }

    /// `x: [N, input]`, `h: [N, dim]` -> `[N, dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, h: Var) -> Result<Var> {
        let (sx, sh) = (g.shape(x).to_vec(), g.shape(h).to_vec());
        if sx.len() != 2 || sh.len() != 2 || sx[0] != sh[0] || sh[1] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "gru_cell",
                left: sx,
                right: sh,
            });
        }
        let d = self.dim;
        let gi = self.input.forward(g, store, x)?;
        let gh = self.hidden.forward(g, store, h)?;
        let (ir, iz, inn) = (g.slice(gi, 1, 0, d)?, g.slice(gi, 1, d, d)?, g.slice(gi, 1, 2 * d, d)?);
        let (hr, hz, hn) = (g.slice(gh, 1, 0, d)?, g.slice(gh, 1, d, d)?, g.slice(gh, 1, 2 * d, d)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn)?;
        let n = g.add(inn, rh)?;
        let n = g.tanh(n);
        let keep = g.affine(z, -T::one(), T::one());
        let a = g.mul(keep, n)?;
        let b = g.mul(z, h)?;
        g.add(a, b)
    }
}
