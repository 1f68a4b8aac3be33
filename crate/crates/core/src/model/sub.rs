//! The six sub-decoders that turn a main-decoder state `h` into one
//! prediction state per feature.
//!
//! Every kind is written against the same call: given `h` for `G` positions,
//! the embeddings of the sub-tokens already known at each position, and the
//! range of features wanted, return one `[G, D]` state per wanted feature.
//! Teacher forcing asks for all features at once with every ground-truth
//! embedding known; incremental decoding asks for feature `j` with the first
//! `j` embeddings. Both go through the same code.

use std::ops::Range;

use nmt_tensor::{AttnMask, Graph, GruCell, LayerNorm, Linear, ParamId, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{CrossBlock, SelfBlock};
use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubDecoderKind {
    /// Independent heads on `h`.
    Parallel,
    /// `state_j = Linear(concat(state_{j-1}, Emb(s_{j-1})))`.
    Ff,
    /// GRU started from `h` with `h` as first input.
    Rnn,
    /// Causal self-attention over `[h, BOS, Emb(s_0), ..]`.
    SelfAttn,
    /// Query `h + SubPos_j` attending over `[BOS, Emb(s_0), ..]`.
    CrossAttn,
    /// Cross-attention whose keys are first enriched against recent `h`.
    Nmt,
}

impl SubDecoderKind {
    pub const ALL: [SubDecoderKind; 6] = [
        SubDecoderKind::Parallel,
        SubDecoderKind::Ff,
        SubDecoderKind::Rnn,
        SubDecoderKind::SelfAttn,
        SubDecoderKind::CrossAttn,
        SubDecoderKind::Nmt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SubDecoderKind::Parallel => "parallel",
            SubDecoderKind::Ff => "ff",
            SubDecoderKind::Rnn => "rnn",
            SubDecoderKind::SelfAttn => "selfattn",
            SubDecoderKind::CrossAttn => "crossattn",
            SubDecoderKind::Nmt => "nmt",
        }
    }

    /// Whether feature `j` is conditioned on the sub-tokens before it.
    pub fn is_sequential(self) -> bool {
        self != SubDecoderKind::Parallel
    }
}

impl std::str::FromStr for SubDecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown sub-decoder {s:?} (expected parallel, ff, rnn, selfattn, crossattn or nmt)"
            ))
        })
    }
}

impl std::fmt::Display for SubDecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Enricher keys for `G` positions: `[BOS_ctx, h_{t-w+1}, .., h_t]` with
/// slots before the sequence start marked invalid.
pub(crate) struct Context {
    pub kv: Var,
    /// `[G, w + 1]`
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub(crate) struct Enricher {
    pub bos: ParamId,
    pub blocks: Vec<CrossBlock>,
}

#[derive(Debug, Clone)]
pub(crate) enum Sub {
    Parallel,
    Ff {
        step: Linear,
    },
    Rnn {
        gru: GruCell,
    },
    SelfAttn {
        bos: ParamId,
        slots: ParamId,
        blocks: Vec<SelfBlock>,
        ln: LayerNorm,
    },
    Cross {
        bos: ParamId,
        slots: ParamId,
        blocks: Vec<CrossBlock>,
        ln: LayerNorm,
        enricher: Option<Enricher>,
    },
}

impl Sub {
    pub fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let (d, f) = (cfg.dim, cfg.vocab_sizes.len());
        let ff = cfg.ff_mult * d;
        let std = nmt_tensor::nn::INIT_STD;
        Ok(match cfg.subdecoder {
            SubDecoderKind::Parallel => Sub::Parallel,
            SubDecoderKind::Ff => Sub::Ff {
                step: Linear::new(store, "sub.step", 2 * d, d, true, rng),
            },
            SubDecoderKind::Rnn => Sub::Rnn {
                gru: GruCell::new(store, "sub.gru", d, d, rng),
            },
            SubDecoderKind::SelfAttn => Sub::SelfAttn {
                bos: store.normal("sub.bos", &[1, d], std, rng),
                slots: store.normal("sub.slots", &[f + 1, d], std, rng),
                blocks: (0..cfg.sub_layers)
                    .map(|i| SelfBlock::new(store, &format!("sub.block{i}"), d, cfg.heads, ff, rng))
                    .collect::<Result<_>>()?,
                ln: LayerNorm::new(store, "sub.ln", d),
            },
            SubDecoderKind::CrossAttn | SubDecoderKind::Nmt => {
                let bos = store.normal("sub.bos", &[1, d], std, rng);
                let slots = store.normal("sub.slots", &[f, d], std, rng);
                let blocks = (0..cfg.sub_layers)
                    .map(|i| CrossBlock::new(store, &format!("sub.block{i}"), d, cfg.heads, ff, rng))
                    .collect::<Result<_>>()?;
                let ln = LayerNorm::new(store, "sub.ln", d);
                // Only worth building when there is a sub-token to enrich.
                let enricher = (cfg.subdecoder == SubDecoderKind::Nmt && f > 1)
                    .then(|| -> Result<Enricher> {
                        Ok(Enricher {
                            bos: store.normal("enricher.bos", &[1, d], std, rng),
                            blocks: (0..cfg.enricher_layers)
                                .map(|i| CrossBlock::new(store, &format!("enricher.block{i}"), d, cfg.heads, ff, rng))
                                .collect::<Result<_>>()?,
                        })
                    })
                    .transpose()?;
                Sub::Cross {
                    bos,
                    slots,
                    blocks,
                    ln,
                    enricher,
                }
            }
        })
    }

    pub fn enricher(&self) -> Option<&Enricher> {
        match self {
            Sub::Cross { enricher, .. } => enricher.as_ref(),
            _ => None,
        }
    }

    /// Prediction states for the features in `want`. `known[k]` is the
    /// `[G, D]` embedding of sub-token `k`; features before `want.end - 1`
    /// must all be known.
    #[allow(clippy::too_many_arguments)]
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        h: Var,
        ctx: Option<&Context>,
        known: &[Var],
        want: Range<usize>,
    ) -> Result<Vec<Var>> {
        if want.is_empty() || want.end > cfg.vocab_sizes.len() {
            return Err(Error::Data(format!(
                "features {want:?} out of range for {} features",
                cfg.vocab_sizes.len()
            )));
        }
        let n = want.end;
        if self.is_conditioned() && known.len() + 1 < n {
            return Err(Error::Data(format!(
                "feature {} requested with only {} preceding sub-tokens known",
                n - 1,
                known.len()
            )));
        }
        let (groups, d) = (g.shape(h)[0], cfg.dim);
        let drop = cfg.dropout;
        let mut out = Vec::with_capacity(want.len());
        match self {
            Sub::Parallel => out.resize(want.len(), h),
            Sub::Ff { step } => {
                let mut state = h;
                for j in 0..n {
                    if j > 0 {
                        let c = g.concat(&[state, known[j - 1]], 1)?;
                        state = step.forward(g, store, c)?;
                    }
                    if want.contains(&j) {
                        out.push(state);
                    }
                }
            }
            Sub::Rnn { gru } => {
                let mut state = gru.forward(g, store, h, h)?;
                for j in 0..n {
                    if j > 0 {
                        state = gru.forward(g, store, known[j - 1], state)?;
                    }
                    if want.contains(&j) {
                        out.push(state);
                    }
                }
            }
            Sub::SelfAttn { bos, slots, blocks, ln } => {
                let mut parts = vec![g.reshape(h, &[groups, 1, d])?, expand_bos(g, store, *bos, groups)?];
                for &k in &known[..n - 1] {
                    parts.push(g.reshape(k, &[groups, 1, d])?);
                }
                let seq = g.concat(&parts, 1)?;
                let slots = g.param(store, *slots);
                let slots = g.slice(slots, 0, 0, n + 1)?;
                let mut x = g.add_bcast(seq, slots)?;
                let mask = AttnMask::causal(n + 1, n + 1);
                for b in blocks {
                    x = b.forward(g, store, x, &mask, drop)?;
                }
                let x = ln.forward(g, store, x)?;
                for j in want {
                    let s = g.slice(x, 1, j + 1, 1)?;
                    out.push(g.reshape(s, &[groups, d])?);
                }
            }
            Sub::Cross {
                bos,
                slots,
                blocks,
                ln,
                enricher,
            } => {
                let m = want.len();
                let h3 = g.reshape(h, &[groups, 1, d])?;
                let query = g.concat(&vec![h3; m], 1)?;
                let slots = g.param(store, *slots);
                let slots = g.slice(slots, 0, want.start, m)?;
                let mut x = g.add_bcast(query, slots)?;

                let mut kv_parts = vec![expand_bos(g, store, *bos, groups)?];
                if n > 1 {
                    let mut parts = Vec::with_capacity(n - 1);
                    for &k in &known[..n - 1] {
                        parts.push(g.reshape(k, &[groups, 1, d])?);
                    }
                    let mut emb = g.concat(&parts, 1)?;
                    if let Some(e) = enricher {
                        let ctx = ctx.ok_or_else(|| Error::Data("enricher needs a hidden-state context".into()))?;
                        emb = e.forward(g, store, cfg, emb, ctx)?;
                    }
                    kv_parts.push(emb);
                }
                let mut kv = g.concat(&kv_parts, 1)?;
                if cfg.key_residual {
                    let hk = g.concat(&vec![h3; n], 1)?;
                    kv = g.add(kv, hk)?;
                }
                let start = want.start;
                let mask = AttnMask::from_fn(m, n, |q, k| k <= start + q);
                for b in blocks {
                    x = b.forward(g, store, x, kv, &mask, drop)?;
                }
                let x = ln.forward(g, store, x)?;
                for q in 0..m {
                    let s = g.slice(x, 1, q, 1)?;
                    out.push(g.reshape(s, &[groups, d])?);
                }
            }
        }
        Ok(out)
    }

    fn is_conditioned(&self) -> bool {
        !matches!(self, Sub::Parallel)
    }
}

impl Enricher {
    /// Replaces each sub-token embedding (`[G, k, D]`) by its cross-attention
    /// update against the context window.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        emb: Var,
        ctx: &Context,
    ) -> Result<Var> {
        let shape = g.shape(emb).to_vec();
        let (groups, queries) = (shape[0], shape[1]);
        let keys = g.shape(ctx.kv)[1];
        let mut allowed = Vec::with_capacity(groups * queries * keys);
        for row in ctx.valid.chunks(keys) {
            for _ in 0..queries {
                allowed.extend_from_slice(row);
            }
        }
        let mask = AttnMask::per_group(groups, queries, keys, allowed)?;
        let mut x = emb;
        for b in &self.blocks {
            x = b.forward(g, store, x, ctx.kv, &mask, cfg.dropout)?;
        }
        Ok(x)
    }
}

/// `[1, D]` parameter repeated into `[G, 1, D]`.
pub(crate) fn expand_bos<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId, groups: usize) -> Result<Var> {
    let b = g.param(store, id);
    Ok(g.expand(b, groups))
}
