//! Compound-token language model: summed sub-token embeddings, a causal
//! pre-norm transformer main decoder, and a sub-decoder that factorizes each
//! compound token into per-feature predictions.
//!
//! Conventions:
//!
//! * Position `t` of the main decoder reads `[BOS, x_0, .., x_{t-1}]` and its
//!   state `h_t` predicts token `x_t`. BOS is a learned vector.
//! * Feature `j` has `vocab_sizes[j]` indices; 0 (PAD) and 1 (IGNORE) embed
//!   to zero and are never predicted, so the output layer of feature `j`
//!   has `vocab_sizes[j] - 2` classes and class `c` is index `c + 2`.

mod blocks;
mod sub;

use std::path::Path;

use nmt_tensor::checkpoint::{decode_checkpoint, encode_checkpoint, read_header};
use nmt_tensor::nn::INIT_STD;
use nmt_tensor::{AttnMask, Graph, LayerNorm, Linear, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{FeatureVocab, Scheme, IGNORE, PAD};
use crate::error::{Error, Result};

pub use blocks::{CrossBlock, SelfBlock};
pub use sub::SubDecoderKind;
use sub::{Context, Sub};

/// Number of special indices (PAD, IGNORE) in front of every feature vocabulary.
pub const SPECIALS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub main_layers: usize,
    pub sub_layers: usize,
    pub enricher_layers: usize,
    /// Enricher window `w`: the context of position `t` is `h_{t-w+1..=t}`.
    pub window: usize,
    pub max_len: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ff_mult: usize,
    pub vocab_sizes: Vec<usize>,
    pub feature_names: Vec<String>,
    pub subdecoder: SubDecoderKind,
    pub dropout: f64,
    /// Adds `h` to the sub-decoder keys as well (off by default).
    pub key_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 8,
            main_layers: 12,
            sub_layers: 1,
            enricher_layers: 1,
            window: 16,
            max_len: 1024,
            ff_mult: 4,
            vocab_sizes: Vec::new(),
            feature_names: Vec::new(),
            subdecoder: SubDecoderKind::Nmt,
            dropout: 0.1,
            key_residual: false,
        }
    }
}

impl ModelConfig {
    /// Feature sizes and names of `scheme` under `vocab`.
    pub fn with_scheme(mut self, vocab: &FeatureVocab, scheme: Scheme) -> Self {
        self.vocab_sizes = vocab.scheme_sizes(scheme);
        self.feature_names = scheme.features().iter().map(|f| f.name().to_string()).collect();
        self
    }

    /// Small layout for laptop-scale runs: 128 dimensions, 4 heads, 4 main layers.
    pub fn desk() -> Self {
        Self {
            dim: 128,
            heads: 4,
            main_layers: 4,
            max_len: 512,
            ..Self::default()
        }
    }

    pub fn width(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.window == 0 {
            return bad("enricher window must be at least 1".into());
        }
        if self.max_len == 0 || self.ff_mult == 0 {
            return bad("max_len and ff_mult must be positive".into());
        }
        if self.vocab_sizes.is_empty() {
            return bad("model needs at least one feature".into());
        }
        if self.feature_names.len() != self.vocab_sizes.len() {
            return bad(format!(
                "{} feature names for {} vocabularies",
                self.feature_names.len(),
                self.vocab_sizes.len()
            ));
        }
        if let Some(i) = self.vocab_sizes.iter().position(|&s| s < SPECIALS as usize) {
            return bad(format!("feature {} has vocabulary size {}", self.feature_names[i], self.vocab_sizes[i]));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let attn = matches!(
            self.subdecoder,
            SubDecoderKind::SelfAttn | SubDecoderKind::CrossAttn | SubDecoderKind::Nmt
        );
        if attn && self.sub_layers == 0 {
            return bad(format!("{} sub-decoder needs at least one layer", self.subdecoder));
        }
        if self.subdecoder == SubDecoderKind::Nmt && self.enricher_layers == 0 {
            return bad("nmt sub-decoder needs at least one enricher layer".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    /// Number of predicted classes of feature `j`.
    pub fn classes(&self, j: usize) -> usize {
        self.vocab_sizes[j] - SPECIALS as usize
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
struct Arch {
    /// `None` for features with no values (inactive: PAD and IGNORE only).
    embed: Vec<Option<ParamId>>,
    pos: ParamId,
    bos: ParamId,
    main: Vec<SelfBlock>,
    final_ln: LayerNorm,
    heads: Vec<Option<Linear>>,
    sub: Sub,
}

impl Arch {
    fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.dim;
        let embed = cfg
            .vocab_sizes
            .iter()
            .zip(&cfg.feature_names)
            .map(|(&n, name)| (n > SPECIALS as usize).then(|| store.normal(&format!("embed.{name}"), &[n, d], INIT_STD, rng)))
            .collect();
        let pos = store.normal("embed.position", &[cfg.max_len, d], INIT_STD, rng);
        let bos = store.normal("embed.bos", &[1, d], INIT_STD, rng);
        let main = (0..cfg.main_layers)
            .map(|i| SelfBlock::new(store, &format!("main.block{i}"), d, cfg.heads, cfg.ff_mult * d, rng))
            .collect::<Result<_>>()?;
        let final_ln = LayerNorm::new(store, "main.ln", d);
        let sub = Sub::build(cfg, store, rng)?;
        let heads = (0..cfg.width())
            .map(|j| {
                let c = cfg.classes(j);
                (c > 0).then(|| Linear::new(store, &format!("logits.{}", cfg.feature_names[j]), d, c, true, rng))
            })
            .collect();
        Ok(Self {
            embed,
            pos,
            bos,
            main,
            final_ln,
            heads,
            sub,
        })
    }
}

/// Model parameters plus the layer layout that indexes them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

/// Teacher-forced outputs for one sequence.
pub struct Forward {
    /// `[n, D]` main-decoder states.
    pub hidden: Var,
    /// `[n, classes_j]` per feature; `None` for features without values.
    pub logits: Vec<Option<Var>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = Arch::build(&config, &mut store, &mut rng)?;
        Ok(Self { config, store, arch })
    }

    /// Wraps an existing store (e.g. from a checkpoint), checking that it
    /// holds exactly the parameters this configuration builds.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut fresh = ParamStore::<T>::new();
        let arch = Arch::build(&config, &mut fresh, &mut ChaCha8Rng::seed_from_u64(0))?;
        if fresh.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, configuration builds {}",
                store.len(),
                fresh.len()
            )));
        }
        for ((_, a), (_, b)) in fresh.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} {:?} does not match {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(Self { config, store, arch })
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::<U>::new();
        for (_, p) in self.store.iter() {
            let id = store.add(&p.name, p.value.cast(), p.decay);
            let q = store.get_mut(id);
            q.step = p.step;
        }
        Model {
            config: self.config.clone(),
            store,
            arch: self.arch.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn width(&self) -> usize {
        self.config.width()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.id(name)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<usize> {
        let w = self.width();
        if tokens.is_empty() || tokens.len() % w != 0 {
            return Err(Error::Data(format!("{} sub-tokens do not form tokens of width {w}", tokens.len())));
        }
        let n = tokens.len() / w;
        if n > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence of {n} tokens exceeds max_len {}",
                self.config.max_len
            )));
        }
        for (k, &v) in tokens.iter().enumerate() {
            if v as usize >= self.config.vocab_sizes[k % w] {
                return Err(Error::Data(format!(
                    "token {} {} index {v} outside vocabulary of {}",
                    k / w,
                    self.config.feature_names[k % w],
                    self.config.vocab_sizes[k % w]
                )));
            }
        }
        Ok(n)
    }

    /// `[n, D]` embedding of feature `j` for each value; PAD and IGNORE give zero rows.
    pub fn feature_embedding(&self, g: &mut Graph<T>, j: usize, values: &[u32]) -> Result<Var> {
        let index: Vec<Option<usize>> = values
            .iter()
            .map(|&v| (v >= SPECIALS).then_some(v as usize))
            .collect();
        match self.arch.embed[j] {
            Some(id) => {
                let table = g.param(&self.store, id);
                Ok(g.gather_rows(table, index)?)
            }
            None => Ok(g.constant(Tensor::zeros(&[values.len(), self.config.dim]))),
        }
    }

    /// Sum of the sub-token embeddings of each token (no position).
    pub fn embed_tokens(&self, g: &mut Graph<T>, tokens: &[u32]) -> Result<Var> {
        let w = self.width();
        let mut acc: Option<Var> = None;
        for j in 0..w {
            let values: Vec<u32> = tokens.iter().skip(j).step_by(w).copied().collect();
            let e = self.feature_embedding(g, j, &values)?;
            acc = Some(match acc {
                None => e,
                Some(a) => g.add(a, e)?,
            });
        }
        Ok(acc.expect("at least one feature"))
    }

    /// Main-decoder states `h_0..h_{n-1}` for a sequence of `n` tokens;
    /// `h_t` depends on BOS and tokens `< t` only.
    pub fn hidden(&self, g: &mut Graph<T>, tokens: &[u32]) -> Result<Var> {
        let n = self.check_tokens(tokens)?;
        let (d, w) = (self.config.dim, self.width());
        let bos = g.param(&self.store, self.arch.bos);
        let x = if n > 1 {
            let e = self.embed_tokens(g, &tokens[..(n - 1) * w])?;
            g.concat(&[bos, e], 0)?
        } else {
            bos
        };
        let pos = g.param(&self.store, self.arch.pos);
        let pos = g.slice(pos, 0, 0, n)?;
        let x = g.add(x, pos)?;
        let x = g.dropout(x, self.config.dropout)?;
        let mut x = g.reshape(x, &[1, n, d])?;
        let mask = AttnMask::causal(n, n);
        for b in &self.arch.main {
            x = b.forward(g, &self.store, x, &mask, self.config.dropout)?;
        }
        let x = g.reshape(x, &[n, d])?;
        Ok(self.arch.final_ln.forward(g, &self.store, x)?)
    }

    /// Enricher context for positions `positions` of the states `h: [n, D]`.
    fn context(&self, g: &mut Graph<T>, h: Var, positions: std::ops::Range<usize>) -> Result<Option<Context>> {
        let Some(e) = self.arch.sub.enricher() else {
            return Ok(None);
        };
        let (w, d) = (self.config.window, self.config.dim);
        let groups = positions.len();
        let mut index = Vec::with_capacity(groups * w);
        let mut valid = Vec::with_capacity(groups * (w + 1));
        for t in positions {
            valid.push(true);
            for s in 0..w {
                let row = (t + s + 1).checked_sub(w);
                index.push(row);
                valid.push(row.is_some());
            }
        }
        let rows = g.gather_rows(h, index)?;
        let rows = g.reshape(rows, &[groups, w, d])?;
        let bos = sub::expand_bos(g, &self.store, e.bos, groups)?;
        let kv = g.concat(&[bos, rows], 1)?;
        Ok(Some(Context { kv, valid }))
    }

    fn logits(&self, g: &mut Graph<T>, j: usize, state: Var) -> Result<Option<Var>> {
        match &self.arch.heads[j] {
            Some(head) => Ok(Some(head.forward(g, &self.store, state)?)),
            None => Ok(None),
        }
    }

    /// Teacher-forced logits for every sub-token of a sequence.
    pub fn forward(&self, g: &mut Graph<T>, tokens: &[u32]) -> Result<Forward> {
        let hidden = self.hidden(g, tokens)?;
        let n = tokens.len() / self.width();
        let w = self.width();
        let mut known = Vec::with_capacity(w.saturating_sub(1));
        if self.config.subdecoder.is_sequential() {
            for j in 0..w - 1 {
                let values: Vec<u32> = tokens.iter().skip(j).step_by(w).copied().collect();
                known.push(self.feature_embedding(g, j, &values)?);
            }
        }
        let ctx = self.context(g, hidden, 0..n)?;
        let states = self
            .arch
            .sub
            .run(g, &self.store, &self.config, hidden, ctx.as_ref(), &known, 0..w)?;
        let logits = states
            .into_iter()
            .enumerate()
            .map(|(j, s)| self.logits(g, j, s))
            .collect::<Result<_>>()?;
        Ok(Forward { hidden, logits })
    }

    /// Logits of feature `j` of token `t` given main-decoder states `hidden`
    /// (from [`hidden`](Self::hidden) over a sequence containing token `t`)
    /// and the values of sub-tokens `0..j` of token `t`. This is the
    /// incremental path used for sampling.
    pub fn step_logits(&self, g: &mut Graph<T>, hidden: Var, t: usize, prefix: &[u32], j: usize) -> Result<Option<Var>> {
        if j >= self.width() || (self.config.subdecoder.is_sequential() && prefix.len() < j) {
            return Err(Error::Data(format!(
                "feature {j} requested after {} known sub-tokens",
                prefix.len()
            )));
        }
        let h = g.slice(hidden, 0, t, 1)?;
        let mut known = Vec::with_capacity(j);
        if self.config.subdecoder.is_sequential() {
            for (k, &v) in prefix[..j].iter().enumerate() {
                known.push(self.feature_embedding(g, k, &[v])?);
            }
        }
        let ctx = self.context(g, hidden, t..t + 1)?;
        let states = self
            .arch
            .sub
            .run(g, &self.store, &self.config, h, ctx.as_ref(), &known, j..j + 1)?;
        self.logits(g, j, states[0])
    }

    /// Class targets per feature: index minus the specials, `None` for PAD
    /// and IGNORE.
    pub fn targets(&self, tokens: &[u32]) -> Vec<Vec<Option<usize>>> {
        let w = self.width();
        (0..w)
            .map(|j| {
                tokens
                    .iter()
                    .skip(j)
                    .step_by(w)
                    .map(|&v| (v != PAD && v != IGNORE).then(|| (v - SPECIALS) as usize))
                    .collect()
            })
            .collect()
    }

    /// Natural-log probability of every scored sub-token under teacher
    /// forcing, row-major like `tokens`; `None` for PAD and IGNORE.
    pub fn log_probs(&self, tokens: &[u32]) -> Result<Vec<Option<f64>>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, tokens)?;
        let w = self.width();
        let mut out = vec![None; tokens.len()];
        for (j, (logits, targets)) in fwd.logits.iter().zip(self.targets(tokens)).enumerate() {
            let Some(l) = logits else { continue };
            let l = g.value(*l);
            for (t, target) in targets.iter().enumerate() {
                let Some(c) = *target else { continue };
                let row: Vec<f64> = l.row(t).iter().map(|v| v.to_f64_lossy()).collect();
                out[t * w + j] = Some(row[c] - nmt_tensor::log_sum_exp(&row));
            }
        }
        Ok(out)
    }

    /// Saves parameters, optimizer moments and the configuration. `meta` is
    /// stored alongside for the caller.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header_meta = serde_json::json!({ "model": self.config, "meta": meta });
        let bytes = encode_checkpoint(&self.store, &self.config.digest(), header_meta);
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written by [`save`](Self::save), verifying the
    /// configuration digest. Returns the model and the caller's `meta`.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, _) = read_header(&bytes)?;
        let config: ModelConfig = serde_json::from_value(header.meta["model"].clone())?;
        if config.digest() != header.config_digest {
            return Err(Error::Config(format!(
                "{}: configuration digest mismatch (file says {}, config hashes to {})",
                path.display(),
                header.config_digest,
                config.digest()
            )));
        }
        let (_, store) = decode_checkpoint::<T>(&bytes)?;
        let model = Self::from_store(config, store)?;
        Ok((model, header.meta["meta"].clone()))
    }
}
