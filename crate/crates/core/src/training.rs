//! Optimization loop: random segments, pitch augmentation, AdamW with a
//! warmup + cosine schedule, clipping, validation and checkpoints.

use std::borrow::Cow;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use nmt_tensor::{clip_global_norm, AdamW, AdamWConfig, Grads, Graph, Scalar, StepOutcome};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode, FeatureVocab, Scheme, TokenSequence, PAD};
use crate::error::{Error, Result};
use crate::midi::{augment_pitch, Piece, MAX_PITCH_SHIFT, MIN_PITCH_SHIFT};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_max: f64,
    /// Defaults to `lr_max / 10`.
    pub lr_min: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub seed: u64,
    /// Compound tokens per segment; by default 512, or 1024 for REMI.
    pub segment_len: Option<usize>,
    /// Draw a pitch shift per segment (only for piece corpora).
    pub augment: bool,
    /// 0 disables validation.
    pub validate_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch_size: 8,
            warmup_steps: 2000,
            lr_max: 1e-4,
            lr_min: None,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: 1.0,
            seed: 0,
            segment_len: None,
            augment: true,
            validate_every: 1000,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn lr_min(&self) -> f64 {
        self.lr_min.unwrap_or(self.lr_max / 10.0)
    }

    pub fn segment_len(&self, scheme: Option<Scheme>) -> usize {
        self.segment_len
            .unwrap_or(if scheme == Some(Scheme::Remi) { 1024 } else { 512 })
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return bad(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_max > 0.0) || !(self.lr_min() >= 0.0) || self.lr_min() > self.lr_max {
            return bad(format!("need 0 <= lr_min <= lr_max and lr_max > 0 (got {} and {})", self.lr_min(), self.lr_max));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.clip > 0.0) {
            return bad("clip threshold must be positive".into());
        }
        if self.segment_len == Some(0) {
            return bad("segment_len must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate after `step` updates: linear warmup from 0 to `lr_max`,
/// then cosine decay reaching `lr_min` at `steps`, constant afterwards.
pub fn lr_schedule(cfg: &TrainConfig, step: u64) -> f64 {
    let (hi, lo) = (cfg.lr_max, cfg.lr_min());
    if step < cfg.warmup_steps {
        return hi * (step as f64 / cfg.warmup_steps as f64);
    }
    if step >= cfg.steps {
        return lo;
    }
    if step == cfg.warmup_steps {
        return hi;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.steps - cfg.warmup_steps) as f64;
    0.5 * (hi + lo) + 0.5 * (hi - lo) * (std::f64::consts::PI * progress).cos()
}

/// Sequences to train or validate on.
#[derive(Debug, Clone)]
pub enum TrainData {
    /// Encoded sequences used as they are.
    Tokens(Vec<TokenSequence>),
    /// Row-major token streams without a musical scheme (synthetic corpora).
    Streams { width: usize, sequences: Vec<Vec<u32>> },
    /// Quantized pieces, encoded on demand so that each segment can carry
    /// its own pitch shift.
    Pieces {
        pieces: Vec<Piece>,
        vocab: FeatureVocab,
        scheme: Scheme,
        encoded: Vec<TokenSequence>,
    },
}

impl TrainData {
    pub fn pieces(pieces: Vec<Piece>, vocab: FeatureVocab, scheme: Scheme) -> Result<Self> {
        let encoded = pieces
            .iter()
            .map(|p| encode(p, &vocab, scheme))
            .collect::<Result<_>>()?;
        Ok(TrainData::Pieces {
            pieces,
            vocab,
            scheme,
            encoded,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Tokens(s) => s.len(),
            TrainData::Streams { sequences, .. } => sequences.len(),
            TrainData::Pieces { pieces, .. } => pieces.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        match self {
            TrainData::Tokens(s) => s.first().map_or(1, |s| s.width),
            TrainData::Streams { width, .. } => *width,
            TrainData::Pieces { scheme, .. } => scheme.width(),
        }
    }

    pub fn scheme(&self) -> Option<Scheme> {
        match self {
            TrainData::Tokens(s) => s.first().map(|s| s.scheme),
            TrainData::Streams { .. } => None,
            TrainData::Pieces { scheme, .. } => Some(*scheme),
        }
    }

    fn can_augment(&self) -> bool {
        matches!(self, TrainData::Pieces { .. })
    }

    /// Row-major tokens of sequence `i`, transposed by `shift` semitones.
    pub fn sequence(&self, i: usize, shift: i32) -> Result<Cow<'_, [u32]>> {
        match self {
            TrainData::Tokens(s) => Ok(Cow::Borrowed(&s[i].data)),
            TrainData::Streams { sequences, .. } => Ok(Cow::Borrowed(&sequences[i])),
            TrainData::Pieces { encoded, .. } if shift == 0 => Ok(Cow::Borrowed(&encoded[i].data)),
            TrainData::Pieces {
                pieces, vocab, scheme, ..
            } => Ok(Cow::Owned(encode(&augment_pitch(&pieces[i], shift), vocab, *scheme)?.data)),
        }
    }
}

/// One training segment: `len` real tokens followed by PAD rows up to the
/// segment length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub source: usize,
    pub start: usize,
    pub shift: i32,
    pub len: usize,
    pub tokens: Vec<u32>,
}

impl Segment {
    /// The segment without its padding rows.
    pub fn real(&self, width: usize) -> &[u32] {
        &self.tokens[..self.len * width]
    }
}

fn rng_for(seed: u64, stream: u64, word: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ word.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

const STREAM_ORDER: u64 = 1;
const STREAM_SEGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// The `batch_size` segments of step `step`. Draw `k = step·B + b` takes
/// the next piece of a per-epoch shuffle, a random contiguous window of
/// `segment_len` tokens and, when augmenting, a shift from U{-5..6}. Only
/// `(seed, step)` matters, so any step can be regenerated.
pub fn make_batch(data: &TrainData, cfg: &TrainConfig, segment_len: usize, step: u64) -> Result<Vec<Segment>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    let width = data.width();
    let mut out = Vec::with_capacity(cfg.batch_size);
    let mut order: Option<(u64, Vec<usize>)> = None;
    for b in 0..cfg.batch_size {
        let k = step * cfg.batch_size as u64 + b as u64;
        let epoch = k / n as u64;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(cfg.seed, STREAM_ORDER, epoch));
            order = Some((epoch, perm));
        }
        let source = order.as_ref().expect("filled above").1[(k % n as u64) as usize];
        let mut rng = rng_for(cfg.seed, STREAM_SEGMENT, k);
        let shift = if cfg.augment && data.can_augment() {
            rng.random_range(MIN_PITCH_SHIFT..=MAX_PITCH_SHIFT)
        } else {
            0
        };
        let seq = data.sequence(source, shift)?;
        let total = seq.len() / width;
        let start = if total > segment_len { rng.random_range(0..=total - segment_len) } else { 0 };
        let len = total.min(segment_len);
        let mut tokens = seq[start * width..(start + len) * width].to_vec();
        tokens.resize(segment_len * width, PAD);
        out.push(Segment {
            source,
            start,
            shift,
            len,
            tokens,
        });
    }
    Ok(out)
}

/// Mean NLL of a set of segments, per feature and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct LossStats {
    /// Summed NLL per feature (nats).
    pub sums: Vec<f64>,
    pub counts: Vec<usize>,
}

impl LossStats {
    fn new(width: usize) -> Self {
        Self {
            sums: vec![0.0; width],
            counts: vec![0; width],
        }
    }

    fn add(&mut self, other: &LossStats) {
        for j in 0..self.sums.len() {
            self.sums[j] += other.sums[j];
            self.counts[j] += other.counts[j];
        }
    }

    /// Mean NLL of each feature; `None` where the feature had no targets.
    pub fn per_feature(&self) -> Vec<Option<f64>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }

    /// The training objective: the average over features of each feature's
    /// mean NLL.
    pub fn mean(&self) -> f64 {
        let means: Vec<f64> = self.per_feature().into_iter().flatten().collect();
        if means.is_empty() {
            f64::NAN
        } else {
            means.iter().sum::<f64>() / means.len() as f64
        }
    }

    /// Sum over features of the mean NLL per token.
    pub fn token_nll(&self) -> f64 {
        self.per_feature().into_iter().flatten().sum()
    }
}

/// Loss statistics and gradients of a batch. Each segment gets its own graph
/// (trailing padding dropped) and the objective of [`LossStats::mean`] is
/// differentiated exactly by scaling each feature's summed cross-entropy by
/// `1 / (count_j · active features)`. `dropout_seed` switches the graphs to
/// training mode; gradients are returned only when asked for.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    segments: &[&[u32]],
    dropout_seed: Option<u64>,
    with_grads: bool,
) -> Result<(LossStats, Option<Grads<T>>)> {
    let w = model.width();
    let mut counts = vec![0usize; w];
    for s in segments {
        for (j, targets) in model.targets(s).iter().enumerate() {
            if model.config.classes(j) > 0 {
                counts[j] += targets.iter().flatten().count();
            }
        }
    }
    let active = counts.iter().filter(|&&c| c > 0).count();
    if active == 0 {
        return Err(Error::Data("batch holds no scored sub-tokens".into()));
    }
    let per_segment: Vec<Result<(LossStats, Option<Grads<T>>)>> = segments
        .par_iter()
        .enumerate()
        .map(|(i, tokens)| {
            let mut stats = LossStats::new(w);
            if tokens.is_empty() {
                return Ok((stats, None));
            }
            let mut g = match dropout_seed {
                Some(seed) => Graph::training(seed.wrapping_add(i as u64)),
                None => Graph::new(),
            };
            let fwd = model.forward(&mut g, tokens)?;
            let mut loss = None;
            for (j, (logits, targets)) in fwd.logits.iter().zip(model.targets(tokens)).enumerate() {
                let Some(logits) = logits else { continue };
                let c = targets.iter().flatten().count();
                if c == 0 {
                    continue;
                }
                let nll = g.cross_entropy_scaled(*logits, &targets, T::one())?;
                stats.sums[j] = g.value(nll).data()[0].to_f64_lossy();
                stats.counts[j] = c;
                let scaled = g.scale(nll, T::from_f64_lossy(1.0 / (counts[j] * active) as f64));
                loss = Some(match loss {
                    None => scaled,
                    Some(l) => g.add(l, scaled)?,
                });
            }
            let grads = match (with_grads, loss) {
                (true, Some(l)) => Some(g.backward(l)?.params(&model.store)),
                _ => None,
            };
            Ok((stats, grads))
        })
        .collect();
    let mut stats = LossStats::new(w);
    let mut total: Option<Grads<T>> = with_grads.then(|| Grads::zeros_like(&model.store));
    for r in per_segment {
        let (s, g) = r?;
        stats.add(&s);
        if let (Some(t), Some(g)) = (total.as_mut(), g) {
            t.add_assign(&g);
        }
    }
    Ok((stats, total))
}

/// Strips trailing PAD rows.
fn trimmed(tokens: &[u32], width: usize) -> &[u32] {
    let mut n = tokens.len() / width;
    while n > 0 && tokens[(n - 1) * width..n * width].iter().all(|&v| v == PAD) {
        n -= 1;
    }
    &tokens[..n * width]
}

/// Teacher-forced NLL over every sequence of `data`, cut into consecutive
/// segments of `segment_len` tokens, without dropout or augmentation.
pub fn validation_loss<T: Scalar>(model: &Model<T>, data: &TrainData, segment_len: usize) -> Result<LossStats> {
    let w = data.width();
    let mut pieces = Vec::new();
    for i in 0..data.len() {
        let seq = data.sequence(i, 0)?;
        for chunk in seq.chunks(segment_len * w) {
            pieces.push(chunk.to_vec());
        }
    }
    let refs: Vec<&[u32]> = pieces.iter().map(|p| p.as_slice()).collect();
    Ok(batch_loss(model, &refs, None, false)?.0)
}

/// A row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    /// Number of updates applied when the row was recorded.
    pub step: u64,
    pub split: String,
    pub mean_nll: f64,
    pub per_feature: Vec<Option<f64>>,
    pub lr: f64,
}

fn csv_header(names: &[String]) -> String {
    let mut h = String::from("step,split,mean_nll");
    for n in names {
        h.push(',');
        h.push_str(n);
    }
    h.push_str(",lr\n");
    h
}

fn csv_row(r: &LossRow) -> String {
    let mut s = format!("{},{},{}", r.step, r.split, r.mean_nll);
    for v in &r.per_feature {
        s.push(',');
        if let Some(v) = v {
            s.push_str(&v.to_string());
        }
    }
    s.push_str(&format!(",{}\n", r.lr));
    s
}

/// Where a run keeps its files.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn curve(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
}

/// Checkpoint metadata needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub best_valid: Option<f64>,
    pub optimizer: AdamW,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
    pub best_valid: Option<f64>,
    pub final_train: f64,
    pub rejected_steps: u64,
}

/// Trains `model` in place for `cfg.steps` updates.
///
/// The update made at iteration `s` (0-based) uses `lr_schedule(s + 1)`, so
/// the first update already moves and the last one uses `lr_min`. With
/// `files`, the loss curve goes to `loss.csv`, the latest state to
/// `last.ckpt` every `checkpoint_every` steps and at the end, and the model
/// with the lowest validation NLL so far to `best.ckpt`. With `resume`, an
/// existing `last.ckpt` is loaded and the run continues from its step.
/// `progress` sees every row; returning `Break` ends the run after the
/// current step, with `last.ckpt` written so that it can be resumed.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    train_data: &TrainData,
    valid_data: Option<&TrainData>,
    files: Option<&RunFiles>,
    resume: bool,
    mut progress: impl FnMut(&LossRow) -> ControlFlow<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let seg = cfg.segment_len(train_data.scheme());
    if seg > model.config.max_len {
        return Err(Error::Config(format!(
            "segment_len {seg} exceeds the model's max_len {}",
            model.config.max_len
        )));
    }
    if train_data.width() != model.width() {
        return Err(Error::Config(format!(
            "data has {} features per token, model {}",
            train_data.width(),
            model.width()
        )));
    }
    let width = model.width();
    let adamw = cfg.adamw();
    let mut optimizer = AdamW::default();
    let mut best_valid: Option<f64> = None;
    let mut start = 0;
    let mut rows = Vec::new();

    if let Some(f) = files {
        std::fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
        if resume && f.last().exists() {
            let (loaded, meta) = Model::<T>::load(&f.last())?;
            if loaded.config != model.config {
                return Err(Error::Config("checkpoint model configuration differs from the requested one".into()));
            }
            let state: TrainState = serde_json::from_value(meta)?;
            *model = loaded;
            start = state.step;
            best_valid = state.best_valid;
            optimizer = state.optimizer;
            rows = read_curve(&f.curve(), &model.config.feature_names)?
                .into_iter()
                .filter(|r| r.step <= start)
                .collect();
        }
        let mut text = csv_header(&model.config.feature_names);
        for r in &rows {
            text.push_str(&csv_row(r));
        }
        std::fs::write(f.curve(), text).map_err(|e| Error::io(f.curve(), e))?;
    }

    let save = |model: &Model<T>, path: &Path, state: &TrainState| -> Result<()> {
        model.save(path, serde_json::to_value(state)?)
    };
    // Returns whether `progress` asked to stop.
    let mut record = |row: LossRow, rows: &mut Vec<LossRow>| -> Result<bool> {
        let stop = progress(&row).is_break();
        if let Some(f) = files {
            let mut file = std::fs::OpenOptions::new()
                .append(true)
                .open(f.curve())
                .map_err(|e| Error::io(f.curve(), e))?;
            file.write_all(csv_row(&row).as_bytes())
                .map_err(|e| Error::io(f.curve(), e))?;
        }
        rows.push(row);
        Ok(stop)
    };

    let mut final_train = f64::NAN;
    for step in start..cfg.steps {
        let batch = make_batch(train_data, cfg, seg, step)?;
        let refs: Vec<&[u32]> = batch.iter().map(|s| trimmed(&s.tokens, width)).collect();
        let dropout_seed = cfg.seed ^ step.wrapping_mul(0xd1b5_4a32_d192_ed03) ^ STREAM_DROPOUT;
        let (stats, grads) = batch_loss(model, &refs, Some(dropout_seed), true)?;
        let loss = stats.mean();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = grads.expect("requested");
        clip_global_norm(&mut grads, cfg.clip);
        let lr = lr_schedule(cfg, step + 1);
        if optimizer.step(&mut model.store, &grads, lr, &adamw) == StepOutcome::Rejected {
            return Err(Error::NonFiniteLoss { step });
        }
        final_train = loss;
        let done = step + 1;
        let mut stop = record(
            LossRow {
                step: done,
                split: "train".into(),
                mean_nll: loss,
                per_feature: stats.per_feature(),
                lr,
            },
            &mut rows,
        )?;
        let last = done == cfg.steps;
        if let Some(valid) = valid_data.filter(|v| !v.is_empty()) {
            if cfg.validate_every > 0 && (done % cfg.validate_every == 0 || last) {
                let v = validation_loss(model, valid, seg)?;
                let mean = v.mean();
                stop |= record(
                    LossRow {
                        step: done,
                        split: "valid".into(),
                        mean_nll: mean,
                        per_feature: v.per_feature(),
                        lr,
                    },
                    &mut rows,
                )?;
                if best_valid.is_none_or(|b| mean < b) {
                    best_valid = Some(mean);
                    if let Some(f) = files {
                        let state = TrainState {
                            step: done,
                            best_valid,
                            optimizer: optimizer.clone(),
                            train: cfg.clone(),
                        };
                        save(model, &f.best(), &state)?;
                    }
                }
            }
        }
        if let Some(f) = files {
            if last || stop || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                let state = TrainState {
                    step: done,
                    best_valid,
                    optimizer: optimizer.clone(),
                    train: cfg.clone(),
                };
                save(model, &f.last(), &state)?;
            }
        }
        if stop {
            break;
        }
    }
    Ok(TrainReport {
        rows,
        best_valid,
        final_train,
        rejected_steps: optimizer.rejected_steps,
    })
}

/// Reads a loss curve written by [`train`].
pub fn read_curve(path: &Path, names: &[String]) -> Result<Vec<LossRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Data(format!("{}: malformed line {}", path.display(), i + 1));
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() + 4 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(LossRow {
            step: cells[0].parse().map_err(|_| bad())?,
            split: cells[1].to_string(),
            mean_nll: num(cells[2])?,
            per_feature: cells[3..3 + names.len()]
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { num(c).map(Some) })
                .collect::<Result<_>>()?,
            lr: num(cells[3 + names.len()])?,
        });
    }
    Ok(rows)
}
