//! Pre-norm transformer blocks shared by the main decoder, the attention
//! sub-decoders and the embedding enricher.

use nmt_tensor::{AttnMask, FeedForward, Graph, LayerNorm, MultiHeadAttention, ParamStore, Scalar, Var};
use rand::Rng;

use crate::error::Result;

/// `x += Attn(LN(x)); x += FF(LN(x))` over `[G, L, D]`.
#[derive(Debug, Clone)]
pub struct SelfBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl SelfBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: &AttnMask,
        dropout: f64,
    ) -> Result<Var> {
        let a = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, a, a, mask, dropout)?;
        let a = g.dropout(a, dropout)?;
        let x = g.add(x, a)?;
        feed_forward(g, store, &self.ln_ff, &self.ff, x, dropout)
    }
}

/// Cross-attention block with the residual on the query stream:
/// `x = q + Attn(LN(q), LN(kv)); x += FF(LN(x))`.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    ln_query: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl CrossBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_query: LayerNorm::new(store, &format!("{name}.ln_query"), dim),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        kv: Var,
        mask: &AttnMask,
        dropout: f64,
    ) -> Result<Var> {
        let q = self.ln_query.forward(g, store, query)?;
        let kv = self.ln_kv.forward(g, store, kv)?;
        let a = self.attn.forward(g, store, q, kv, mask, dropout)?;
        let a = g.dropout(a, dropout)?;
        let x = g.add(query, a)?;
        feed_forward(g, store, &self.ln_ff, &self.ff, x, dropout)
    }
}

fn feed_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ln: &LayerNorm,
    ff: &FeedForward,
    x: Var,
    dropout: f64,
) -> Result<Var> {
    let f = ln.forward(g, store, x)?;
    let f = ff.forward(g, store, f, dropout)?;
    let f = g.dropout(f, dropout)?;
    Ok(g.add(x, f)?)
}
