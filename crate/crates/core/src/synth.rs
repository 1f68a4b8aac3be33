//! Synthetic corpora with exactly known entropy.
//!
//! [`synth_corpus`] samples abstract compound streams (`F` features, no
//! musical meaning) whose sub-tokens depend on nothing, on earlier features
//! of the same token, or on the previous token. [`piece_family`] lists every
//! piece of a tiny musical family, so a uniform draw from it has entropy
//! `ln N`, and [`SupportOracle`] scores sequences with the exact conditionals
//! of a uniform distribution over a finite support.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{IGNORE, PAD};
use crate::error::{Error, Result};
use crate::evaluation::Scorer;
use crate::midi::{Instrument, NoteEvent, Piece, TimeSignature};
use crate::model::SPECIALS;

/// Enumeration budget for exact entropies.
pub const MAX_STATES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dependency {
    /// Every sub-token uniform and independent.
    Independent,
    /// Feature 0 uniform, feature 1 a copy of feature 0 (modulo its
    /// vocabulary), feature `j >= 2` equal to feature `j-1` or one more,
    /// with equal probability.
    Intra,
    /// First token uniform. Afterwards feature 0 repeats its previous value
    /// and feature `j >= 1` becomes `(feature j-1 + previous feature j) mod V`,
    /// each with probability `1 - epsilon`, else a uniform value.
    Inter,
}

impl std::str::FromStr for Dependency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Dependency::Independent),
            "intra" => Ok(Dependency::Intra),
            "inter" => Ok(Dependency::Inter),
            _ => Err(Error::Config(format!(
                "unknown dependency mode {s:?} (expected independent, intra or inter)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Values per feature, specials excluded.
    pub vocab: Vec<usize>,
    pub deps: Dependency,
    /// Tokens per sequence.
    pub length: usize,
    pub sequences: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(features: usize, vocab: usize, deps: Dependency) -> Self {
        Self {
            vocab: vec![vocab; features],
            deps,
            length: 64,
            sequences: 256,
            epsilon: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() || self.vocab.contains(&0) {
            return Err(Error::Config(format!("vocab sizes must be positive, got {:?}", self.vocab)));
        }
        if self.length == 0 || self.sequences == 0 {
            return Err(Error::Config("length and sequences must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }

    /// Feature sizes as a model sees them (PAD and IGNORE in front).
    pub fn model_sizes(&self) -> Vec<usize> {
        self.vocab.iter().map(|v| v + SPECIALS as usize).collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.vocab.len()).map(|j| format!("f{j}")).collect()
    }

    /// Distribution of feature `j` given the previous token (raw values, if
    /// any) and features `0..j` of the current one.
    pub fn conditional(&self, j: usize, prev: Option<&[u32]>, cur: &[u32]) -> Vec<f64> {
        let v = self.vocab[j];
        let uniform = vec![1.0 / v as f64; v];
        let point = |d: usize| {
            let mut p = vec![0.0; v];
            p[d % v] = 1.0;
            p
        };
        match self.deps {
            Dependency::Independent => uniform,
            Dependency::Intra => match j {
                0 => uniform,
                1 => point(cur[0] as usize),
                _ => {
                    let mut p = vec![0.0; v];
                    p[cur[j - 1] as usize % v] += 0.5;
                    p[(cur[j - 1] as usize + 1) % v] += 0.5;
                    p
                }
            },
            Dependency::Inter => {
                let Some(prev) = prev else { return uniform };
                let d = if j == 0 {
                    prev[0] as usize
                } else {
                    cur[j - 1] as usize + prev[j] as usize
                };
                let mut p: Vec<f64> = uniform.iter().map(|u| u * self.epsilon).collect();
                p[d % v] += 1.0 - self.epsilon;
                p
            }
        }
    }
}

/// Exact entropies in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEntropy {
    /// Per feature, for the first token of a sequence.
    pub first: Vec<f64>,
    /// Per feature, for every later token.
    pub conditional: Vec<f64>,
    /// Per feature, entropy of the value distribution alone. Only
    /// computed for the independent and intra modes.
    pub marginal: Option<Vec<f64>>,
    /// Expected per-feature mean NLL over one sequence of `length` tokens.
    pub per_feature: Vec<f64>,
    /// Average of `per_feature`.
    pub mean: f64,
    /// Expected NLL of one whole sequence.
    pub sequence: f64,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Conditioning values that can reach feature `j`: `(prev, cur prefix)`
/// pairs, only over the coordinates the conditional reads.
fn contexts(cfg: &SynthConfig, j: usize, first: bool) -> Vec<(Option<Vec<u32>>, Vec<u32>)> {
    let w = cfg.vocab.len();
    let blank = |i: usize, a: u32| {
        let mut v = vec![0; w];
        v[i] = a;
        v
    };
    let reads_prev = cfg.deps == Dependency::Inter && !first;
    let reads_cur = j > 0 && cfg.deps != Dependency::Independent && !(cfg.deps == Dependency::Inter && first);
    let cur_range = if reads_cur { cfg.vocab[j - 1] } else { 1 };
    let prev_range = if reads_prev { cfg.vocab[j] } else { 1 };
    let mut out = Vec::with_capacity(cur_range * prev_range);
    for c in 0..cur_range as u32 {
        for p in 0..prev_range as u32 {
            let cur = if reads_cur { blank(j - 1, c) } else { vec![0; w] };
            let prev = reads_prev.then(|| blank(j, p));
            out.push((prev, cur));
        }
    }
    out
}

/// Enumerates every conditional of the generating process.
pub fn synth_entropy(cfg: &SynthConfig) -> Result<SynthEntropy> {
    cfg.validate()?;
    let w = cfg.vocab.len();
    let mut states = 0usize;
    for j in 0..w {
        for first in [true, false] {
            states += contexts_len(cfg, j, first) * cfg.vocab[j];
        }
    }
    if states > MAX_STATES {
        return Err(Error::Config(format!(
            "exact entropy needs {states} states, more than {MAX_STATES}"
        )));
    }
    let mut h = [Vec::with_capacity(w), Vec::with_capacity(w)];
    for (k, first) in [true, false].into_iter().enumerate() {
        for j in 0..w {
            let hs: Vec<f64> = contexts(cfg, j, first)
                .iter()
                .map(|(prev, cur)| entropy(&cfg.conditional(j, prev.as_deref(), cur)))
                .collect();
            let (lo, hi) = hs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            // Every conditional of a feature has the same entropy, so the
            // context distribution does not matter.
            if hi - lo > 1e-12 {
                return Err(Error::Config(format!("feature {j}: conditional entropy varies with context")));
            }
            h[k].push(hs[0]);
        }
    }
    let [first, conditional] = h;
    let marginal = match cfg.deps {
        Dependency::Inter => None,
        _ => Some(marginals(cfg).iter().map(|p| entropy(p)).collect()),
    };
    let l = cfg.length as f64;
    let per_feature: Vec<f64> = first
        .iter()
        .zip(&conditional)
        .map(|(a, b)| (a + (l - 1.0) * b) / l)
        .collect();
    Ok(SynthEntropy {
        mean: per_feature.iter().sum::<f64>() / w as f64,
        sequence: per_feature.iter().sum::<f64>() * l,
        first,
        conditional,
        marginal,
        per_feature,
    })
}

fn contexts_len(cfg: &SynthConfig, j: usize, first: bool) -> usize {
    let reads_prev = cfg.deps == Dependency::Inter && !first;
    let reads_cur = j > 0 && cfg.deps != Dependency::Independent && !(cfg.deps == Dependency::Inter && first);
    (if reads_cur { cfg.vocab[j - 1] } else { 1 }) * (if reads_prev { cfg.vocab[j] } else { 1 })
}

/// Value distributions of each feature in the modes without inter-token
/// dependencies: feature `j` only reads feature `j - 1`, so the marginals
/// propagate along the features.
fn marginals(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let w = cfg.vocab.len();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(w);
    for j in 0..w {
        let mut p = vec![0.0; cfg.vocab[j]];
        if j == 0 || cfg.deps == Dependency::Independent {
            p = cfg.conditional(j, None, &vec![0; w]);
        } else {
            for (a, &pa) in out[j - 1].iter().enumerate() {
                let mut cur = vec![0; w];
                cur[j - 1] = a as u32;
                for (x, q) in cfg.conditional(j, None, &cur).iter().enumerate() {
                    p[x] += pa * q;
                }
            }
        }
        out.push(p);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    /// Row-major model indices (raw value + 2).
    pub sequences: Vec<Vec<u32>>,
    pub entropy: SynthEntropy,
}

/// Samples `cfg.sequences` sequences of `cfg.length` tokens.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let entropy = synth_entropy(cfg)?;
    let w = cfg.vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sequences = Vec::with_capacity(cfg.sequences);
    for _ in 0..cfg.sequences {
        let mut raw: Vec<u32> = Vec::with_capacity(cfg.length * w);
        for t in 0..cfg.length {
            let mut cur = vec![0u32; w];
            for j in 0..w {
                let prev = (t > 0).then(|| &raw[(t - 1) * w..t * w]);
                let p = cfg.conditional(j, prev, &cur);
                let dist = WeightedIndex::new(&p).map_err(|e| Error::Config(format!("feature {j}: {e}")))?;
                cur[j] = dist.sample(&mut rng) as u32;
            }
            raw.extend_from_slice(&cur);
        }
        sequences.push(raw.into_iter().map(|v| v + SPECIALS).collect());
    }
    Ok(SynthCorpus {
        config: cfg.clone(),
        sequences,
        entropy,
    })
}

/// A small family of one-instrument pieces: every set of `notes` distinct
/// (onset, pitch) cells from `onsets × pitches`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceFamily {
    pub resolution: u32,
    pub time_signature: TimeSignature,
    pub onsets: Vec<u64>,
    pub pitches: Vec<u8>,
    pub notes: usize,
    pub duration: u64,
}

impl Default for PieceFamily {
    fn default() -> Self {
        Self {
            resolution: 4,
            time_signature: TimeSignature::COMMON,
            onsets: vec![0, 4, 8, 12],
            pitches: vec![60, 64, 67],
            notes: 3,
            duration: 4,
        }
    }
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    if k > n {
        return Some(0);
    }
    (0..k).try_fold(1usize, |acc, i| acc.checked_mul(n - i).map(|x| x / (i + 1)))
}

/// Every member of the family, in lexicographic order of cell subsets.
pub fn piece_family(f: &PieceFamily) -> Result<Vec<Piece>> {
    let cells: Vec<(u64, u8)> = f
        .onsets
        .iter()
        .flat_map(|&o| f.pitches.iter().map(move |&p| (o, p)))
        .collect();
    let mut distinct = cells.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() != cells.len() || f.notes == 0 {
        return Err(Error::Config("family needs distinct onsets and pitches and at least one note".into()));
    }
    let count = binomial(cells.len(), f.notes).filter(|&c| c <= MAX_STATES).ok_or_else(|| {
        Error::Config(format!("family of {} notes over {} cells is too large to enumerate", f.notes, cells.len()))
    })?;
    let mut out = Vec::with_capacity(count);
    let mut pick: Vec<usize> = (0..f.notes).collect();
    loop {
        let mut p = Piece::new(f.resolution, f.time_signature, format!("family{}", out.len()));
        p.notes = pick
            .iter()
            .map(|&i| NoteEvent {
                onset: cells[i].0,
                pitch: cells[i].1,
                duration: f.duration,
                velocity: 64,
                instrument: Instrument::program(0),
            })
            .collect();
        p.sort_notes();
        out.push(p);
        // Next k-subset in lexicographic order.
        let k = f.notes;
        let Some(i) = (0..k).rev().find(|&i| pick[i] < cells.len() - k + i) else { break };
        pick[i] += 1;
        for m in i + 1..k {
            pick[m] = pick[m - 1] + 1;
        }
    }
    Ok(out)
}

/// Exact conditionals of the uniform distribution over `support`: the
/// probability of sub-token `k` is the fraction of support sequences that
/// agree with everything before it and also with it. Sequences must start
/// at the beginning of a support member (one window per sequence).
#[derive(Debug, Clone)]
pub struct SupportOracle {
    vocab_sizes: Vec<usize>,
    support: Vec<Vec<u32>>,
    max_len: usize,
}

impl SupportOracle {
    pub fn new(vocab_sizes: Vec<usize>, support: Vec<Vec<u32>>) -> Result<Self> {
        let w = vocab_sizes.len();
        if w == 0 || support.is_empty() || support.iter().any(|s| s.len() % w != 0) {
            return Err(Error::Data("support must be a non-empty set of whole tokens".into()));
        }
        let max_len = support.iter().map(|s| s.len() / w).max().unwrap_or(0);
        Ok(Self {
            vocab_sizes,
            support,
            max_len,
        })
    }
}

impl Scorer for SupportOracle {
    fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn log_probs(&self, tokens: &[u32]) -> Result<Vec<Option<f64>>> {
        let mut alive: Vec<&[u32]> = self.support.iter().map(|s| &s[..]).collect();
        let mut out = Vec::with_capacity(tokens.len());
        for (k, &v) in tokens.iter().enumerate() {
            alive.retain(|s| s.len() > k);
            let total = alive.len();
            alive.retain(|s| s[k] == v);
            if v == PAD || v == IGNORE {
                out.push(None);
                continue;
            }
            if alive.is_empty() {
                return Err(Error::Data(format!("sub-token {k} leaves the support")));
            }
            out.push(Some((alive.len() as f64 / total as f64).ln()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_entropy_is_the_sum_of_logs() {
        let cfg = SynthConfig {
            vocab: vec![3, 5, 7],
            ..SynthConfig::new(3, 1, Dependency::Independent)
        };
        let h = synth_entropy(&cfg).unwrap();
        let want = [3f64.ln(), 5f64.ln(), 7f64.ln()];
        for j in 0..3 {
            assert!((h.first[j] - want[j]).abs() < 1e-12);
            assert!((h.conditional[j] - want[j]).abs() < 1e-12);
        }
        assert!((h.sequence - 64.0 * 105f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn copied_feature_has_zero_conditional_entropy() {
        let h = synth_entropy(&SynthConfig::new(4, 16, Dependency::Intra)).unwrap();
        assert_eq!(h.conditional[1], 0.0);
        assert!((h.conditional[2] - 2f64.ln()).abs() < 1e-12);
        let m = h.marginal.unwrap();
        assert!(m.iter().all(|x| (x - 16f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let cfg = SynthConfig::new(2, 2000, Dependency::Inter);
        assert!(matches!(synth_entropy(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn family_size_is_a_binomial() {
        let f = PieceFamily::default();
        let pieces = piece_family(&f).unwrap();
        assert_eq!(pieces.len(), 220);
        assert!(pieces.iter().all(|p| p.notes.len() == 3));
    }
}
