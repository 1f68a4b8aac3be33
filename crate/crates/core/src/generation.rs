//! Sampling: nucleus sampling with temperature, per-scheme structural masks
//! so every sample decodes, prompt extraction and the generation loop.
//!
//! All randomness comes from one `ChaCha8Rng` seeded with
//! [`SamplerConfig::seed`]; a sub-token whose mask leaves a single value is
//! filled in without drawing from the generator.

use nmt_tensor::{Graph, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{decode, encode, CpType, Feature, FeatureVocab, Metric, Scheme, TokenSequence, CONTINUE, IGNORE, PAD};
use crate::error::{Error, Result};
use crate::midi::{Piece, TimeSignature};
use crate::model::{Model, SPECIALS};

/// Temperatures worth searching over.
pub const TEMPERATURE_RANGE: (f64, f64) = (1.0, 1.3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub top_p: f64,
    /// 0 selects the most likely value (the zero-temperature limit).
    pub temperature: f64,
    /// Length of the output in tokens, prompt included.
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: 0.99,
            temperature: 1.1,
            max_tokens: 512,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            max_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Smallest set of most likely values whose mass reaches `top_p` after
/// dividing the logits by `temperature`, renormalized, most likely first.
/// `-inf` logits are masked out.
pub fn nucleus_filter(logits: &[f64], top_p: f64, temperature: f64) -> Result<Vec<(usize, f64)>> {
    if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::Data("logits must be finite or -inf".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Data("every value is masked".into()));
    }
    let mut p: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > f64::NEG_INFINITY)
        .map(|(i, &l)| (i, ((l - max) / temperature).exp()))
        .collect();
    let z: f64 = p.iter().map(|x| x.1).sum();
    for x in &mut p {
        x.1 /= z;
    }
    p.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = p.len();
    for (k, x) in p.iter().enumerate() {
        mass += x.1;
        if mass >= top_p {
            keep = k + 1;
            break;
        }
    }
    p.truncate(keep);
    let z: f64 = p.iter().map(|x| x.1).sum();
    for x in &mut p {
        x.1 /= z;
    }
    Ok(p)
}

/// Draws an index from the nucleus of `logits`. Temperature 0 returns the
/// first maximum.
pub fn nucleus_sample(logits: &[f64], top_p: f64, temperature: f64, rng: &mut impl Rng) -> Result<usize> {
    if temperature == 0.0 {
        let (i, &m) = logits
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if m == f64::NEG_INFINITY || logits.iter().any(|l| l.is_nan()) {
            return Err(Error::Data("no value to choose from".into()));
        }
        return Ok(i);
    }
    let kept = nucleus_filter(logits, top_p, temperature)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in &kept {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(kept.last().expect("nucleus is never empty").0)
}

/// Where a REMI stream stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RemiState {
    Start,
    AfterBar,
    AfterBeat,
    AfterChord,
    AfterTempo,
    AfterInstrument,
    AfterPitch,
    AfterDuration,
    NoteDone,
}

/// Structural state shared by the schemes.
#[derive(Debug, Clone)]
pub struct Grammar<'a> {
    vocab: &'a FeatureVocab,
    scheme: Scheme,
    measure: u64,
    tokens: usize,
    /// Current beat, if a position has been opened.
    beat: Option<u64>,
    /// Notes at the current CP position.
    notes_here: usize,
    notes: usize,
    remi: RemiState,
    /// Pitch-first only: the next token is the final flush.
    closing: bool,
}

impl<'a> Grammar<'a> {
    pub fn new(vocab: &'a FeatureVocab, scheme: Scheme, time_signature: TimeSignature) -> Result<Self> {
        let measure = time_signature
            .measure_len(vocab.resolution)
            .filter(|&m| m <= vocab.positions)
            .ok_or_else(|| Error::Config(format!("time signature {time_signature} does not fit the vocabulary")))?;
        Ok(Self {
            vocab,
            scheme,
            measure,
            tokens: 0,
            beat: None,
            notes_here: 0,
            notes: 0,
            remi: RemiState::Start,
            closing: false,
        })
    }

    fn only(&self, f: Feature, values: impl IntoIterator<Item = u32>) -> Vec<bool> {
        let mut m = vec![false; self.vocab.size(f)];
        for v in values {
            m[v as usize] = true;
        }
        m
    }

    /// Musical values of `f`, or IGNORE when inactive.
    fn values(&self, f: Feature) -> Vec<bool> {
        if !self.vocab.config.is_active(f) {
            return self.only(f, [IGNORE]);
        }
        let mut m = vec![true; self.vocab.size(f)];
        for v in m.iter_mut().take(f.first_value() as usize) {
            *v = false;
        }
        m
    }

    /// Chord/tempo: a value or CONTINUE, a value on the first position, only
    /// CONTINUE when `repeat`.
    fn change(&self, f: Feature, first: bool, repeat: bool) -> Vec<bool> {
        if !self.vocab.config.is_active(f) {
            return self.only(f, [IGNORE]);
        }
        if repeat {
            return self.only(f, [CONTINUE]);
        }
        let mut m = self.values(f);
        m[CONTINUE as usize] = !first;
        m
    }

    fn beats(&self, after: Option<u64>) -> Vec<bool> {
        let from = after.map_or(0, |b| b + 1);
        self.only(Feature::Beat, (from..self.measure).map(|b| self.vocab.beat_index(b)))
    }

    /// Metric-first slot `j`.
    fn nb(&self, j: usize, row: &[u32]) -> Vec<bool> {
        let first = self.tokens == 0;
        let metric = row.first().and_then(|&m| Metric::from_index(m));
        match j {
            0 if first => self.only(Feature::Metric, [Metric::Sss.index()]),
            0 => {
                let mut m = self.only(Feature::Metric, [Metric::Nss.index(), Metric::Nnn.index()]);
                let b = self.beat.expect("a position after the first token");
                m[Metric::Nns.index() as usize] = b + 1 < self.measure;
                m
            }
            1 => match metric {
                Some(Metric::Nns) => self.beats(self.beat),
                Some(Metric::Nnn) => self.only(Feature::Beat, [self.vocab.beat_index(self.beat.expect("position"))]),
                _ => self.beats(None),
            },
            2 => self.change(Feature::Chord, first, metric == Some(Metric::Nnn)),
            3 => self.change(Feature::Tempo, first, metric == Some(Metric::Nnn)),
            _ => self.values(Scheme::NbMf.features()[j]),
        }
    }

    fn cp(&self, j: usize, row: &[u32]) -> Vec<bool> {
        let first = self.tokens == 0;
        let f = Scheme::Cp.features()[j];
        if j == 0 {
            if first {
                return self.only(f, [CpType::Bar.index()]);
            }
            if self.notes_here == 0 {
                return self.only(f, [CpType::Note.index()]);
            }
            let mut m = self.only(f, [CpType::Bar.index(), CpType::Note.index()]);
            m[CpType::Metric.index() as usize] = self.beat.is_some_and(|b| b + 1 < self.measure);
            return m;
        }
        let ty = CpType::from_index(row[0]).expect("type sampled first");
        match (ty, j) {
            (CpType::Note, 1..=3) | (CpType::Bar | CpType::Metric, 4..) => self.only(f, [IGNORE]),
            (CpType::Note, _) => self.values(f),
            (CpType::Bar, 1) => self.beats(None),
            (CpType::Metric, 1) => self.beats(self.beat),
            _ => self.change(f, first, false),
        }
    }

    fn remi_ids(&self, f: Feature, from: u32) -> Vec<u32> {
        if !self.vocab.config.is_active(f) {
            return Vec::new();
        }
        (from..self.vocab.size(f) as u32)
            .filter_map(|v| self.vocab.remi_id(f, v))
            .collect()
    }

    fn remi(&self) -> Vec<bool> {
        use RemiState::*;
        let cfg = self.vocab.config;
        let first = self.notes == 0;
        let note_start = || {
            if cfg.instrument {
                self.remi_ids(Feature::Instrument, 2)
            } else {
                self.remi_ids(Feature::Pitch, 2)
            }
        };
        let beat_ids = |after: Option<u64>| {
            let from = after.map_or(0, |b| b + 1);
            (from..self.measure)
                .filter_map(|b| self.vocab.remi_id(Feature::Beat, self.vocab.beat_index(b)))
                .collect::<Vec<_>>()
        };
        let chord = self.remi_ids(Feature::Chord, Feature::Chord.first_value());
        let tempo = self.remi_ids(Feature::Tempo, Feature::Tempo.first_value());
        let ids: Vec<u32> = match self.remi {
            Start => vec![FeatureVocab::REMI_BAR],
            AfterBar => beat_ids(None),
            AfterBeat if first && cfg.chord => chord,
            AfterBeat | AfterChord if first && cfg.tempo => tempo,
            AfterBeat => [chord, tempo, note_start()].concat(),
            AfterChord => [tempo, note_start()].concat(),
            AfterTempo => note_start(),
            AfterInstrument => self.remi_ids(Feature::Pitch, 2),
            AfterPitch => self.remi_ids(Feature::Duration, 2),
            AfterDuration => self.remi_ids(Feature::Velocity, 2),
            NoteDone => [note_start(), beat_ids(self.beat), vec![FeatureVocab::REMI_BAR]].concat(),
        };
        self.only(Feature::Remi, ids)
    }

    /// Values sub-token `j` may take given sub-tokens `row[..j]` of the
    /// current token.
    pub fn allowed(&self, row: &[u32], j: usize) -> Vec<bool> {
        match self.scheme {
            Scheme::Remi => self.remi(),
            Scheme::Cp => self.cp(j, row),
            Scheme::NbMf => self.nb(j, row),
            Scheme::NbPf => {
                const SHIFT: usize = 3;
                let f = Scheme::NbPf.features()[j];
                if (j < SHIFT && self.tokens == 0) || (j >= SHIFT && self.closing) {
                    self.only(f, [IGNORE])
                } else if j < SHIFT {
                    self.values(f)
                } else {
                    // Slots 3.. of pitch-first are metric-first slots 0..5.
                    self.nb(j - SHIFT, row.get(SHIFT..).unwrap_or(&[]))
                }
            }
        }
    }

    /// Marks the next pitch-first token as the flush token.
    pub fn close(&mut self) {
        self.closing = true;
    }

    /// Checks a complete token against the masks and advances.
    pub fn push(&mut self, token: &[u32]) -> Result<()> {
        for (j, &v) in token.iter().enumerate() {
            let ok = self.allowed(&token[..j], j).get(v as usize).copied().unwrap_or(false);
            if !ok {
                return Err(Error::Decode {
                    position: self.tokens,
                    msg: format!("{} sub-token {v} breaks the {} grammar", self.scheme.features()[j].name(), self.scheme),
                });
            }
        }
        match self.scheme {
            Scheme::NbMf => self.advance_nb(token[0], token[1]),
            Scheme::NbPf if !self.closing => self.advance_nb(token[3], token[4]),
            Scheme::NbPf => {}
            Scheme::Cp => match CpType::from_index(token[0]).expect("checked") {
                CpType::Note => {
                    self.notes_here += 1;
                    self.notes += 1;
                }
                _ => {
                    self.beat = Some((token[1] - 2) as u64);
                    self.notes_here = 0;
                }
            },
            Scheme::Remi => self.advance_remi(token[0]),
        }
        self.tokens += 1;
        Ok(())
    }

    fn advance_nb(&mut self, _metric: u32, beat: u32) {
        self.beat = Some((beat - 2) as u64);
        self.notes += 1;
    }

    fn advance_remi(&mut self, id: u32) {
        use RemiState::*;
        let (f, v) = self.vocab.remi_feature(id).expect("masked to events");
        let velocity = self.vocab.config.velocity;
        self.remi = match f {
            Feature::Metric => {
                self.beat = None;
                AfterBar
            }
            Feature::Beat => {
                self.beat = Some((v - 2) as u64);
                AfterBeat
            }
            Feature::Chord => AfterChord,
            Feature::Tempo => AfterTempo,
            Feature::Instrument => AfterInstrument,
            Feature::Pitch => AfterPitch,
            Feature::Duration if velocity => AfterDuration,
            _ => {
                self.notes += 1;
                NoteDone
            }
        };
    }

    /// Whether the sequence so far decodes.
    pub fn can_end(&self) -> bool {
        match self.scheme {
            Scheme::NbMf => self.tokens > 0,
            Scheme::NbPf => self.closing && self.tokens > 1,
            Scheme::Cp => self.notes_here > 0,
            Scheme::Remi => self.remi == RemiState::NoteDone,
        }
    }
}

/// First `measures` measures of a piece as a prefix of its encoding. In
/// pitch-first order the last prompt note's pitch, duration and velocity
/// open the next token, so they are kept in `tail`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub sequence: TokenSequence,
    pub tail: Vec<u32>,
    pub notes: usize,
}

impl Prompt {
    pub fn sub_tokens(&self) -> Vec<u32> {
        [self.sequence.data.clone(), self.tail.clone()].concat()
    }
}

pub fn extract_prompt(piece: &Piece, vocab: &FeatureVocab, scheme: Scheme, measures: u64) -> Result<Prompt> {
    let full = encode(piece, vocab, scheme)?;
    let canonical = vocab.canonicalize(piece)?.piece;
    let len = canonical.measure_len().expect("checked by canonicalize");
    let have = canonical.notes.last().map_or(0, |n| n.onset / len + 1);
    if have < measures || measures == 0 {
        return Err(Error::Data(format!(
            "{}: {have} measures, prompt needs {measures}",
            piece.source_id
        )));
    }
    let starts_measure = |t: &[u32]| match scheme {
        Scheme::Remi => t[0] == FeatureVocab::REMI_BAR,
        Scheme::Cp => CpType::from_index(t[0]) == Some(CpType::Bar),
        Scheme::NbMf => Metric::from_index(t[0]).is_some_and(Metric::starts_measure),
        Scheme::NbPf => Metric::from_index(t[3]).is_some_and(Metric::starts_measure),
    };
    let mut seen = 0;
    let mut cut = full.len();
    for (i, t) in full.tokens().enumerate() {
        if starts_measure(t) {
            seen += 1;
            if seen > measures {
                cut = i;
                break;
            }
        }
    }
    let notes = canonical.notes.iter().filter(|n| n.onset < measures * len).count();
    let mut sequence = full.prefix(cut);
    let mut tail = Vec::new();
    if scheme == Scheme::NbPf {
        // The flush token (or the first note of the next measure) carries
        // the last prompt note's pitch, duration and velocity.
        tail = full.token(cut.min(full.len() - 1))[..3].to_vec();
        if cut == full.len() {
            sequence = full.prefix(cut - 1);
        }
    }
    Ok(Prompt { sequence, tail, notes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub sequence: TokenSequence,
    /// Sub-tokens that came from the prompt.
    pub prompt_len: usize,
    /// Decoded piece, cut at the start of its last (possibly unfinished)
    /// measure when it spans more than one.
    pub piece: Piece,
}

/// Drops the notes of the last measure unless it is the only one.
pub fn truncate_to_measures(mut piece: Piece) -> Piece {
    let Some(len) = piece.measure_len() else { return piece };
    let last = piece.notes.iter().map(|n| n.onset / len).max().unwrap_or(0);
    if last > 0 {
        piece.notes.retain(|n| n.onset / len < last);
        piece.chords.retain(|c| c.0 / len < last);
        piece.tempo_changes.retain(|t| t.tick / len < last);
    }
    piece
}

/// Continues `prompt` (sub-tokens, possibly ending inside a token) up to
/// `cfg.max_tokens` tokens. Unconditional generation passes an empty
/// prompt. The output is cut back to the last point where it decodes;
/// pitch-first output ends with a flush token.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    vocab: &FeatureVocab,
    scheme: Scheme,
    time_signature: TimeSignature,
    prompt: &[u32],
    cfg: &SamplerConfig,
) -> Result<Generated> {
    cfg.validate()?;
    let w = scheme.width();
    if model.config.vocab_sizes != vocab.scheme_sizes(scheme) {
        return Err(Error::Config(format!("model vocabulary does not match the {scheme} vocabulary")));
    }
    let max_len = model.config.max_len;
    let prompt_tokens = prompt.len().div_ceil(w);
    if prompt_tokens > max_len {
        return Err(Error::Data(format!("prompt of {prompt_tokens} tokens exceeds max_len {max_len}")));
    }
    if cfg.max_tokens > max_len {
        return Err(Error::Config(format!("max_tokens {} exceeds max_len {max_len}", cfg.max_tokens)));
    }
    if cfg.max_tokens < prompt_tokens + (scheme == Scheme::NbPf) as usize {
        return Err(Error::Config(format!(
            "max_tokens {} leaves no room after a prompt of {prompt_tokens} tokens",
            cfg.max_tokens
        )));
    }
    let mut grammar = Grammar::new(vocab, scheme, time_signature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data: Vec<u32> = Vec::with_capacity(cfg.max_tokens * w);
    let mut good = 0;
    for t in 0..cfg.max_tokens {
        if scheme == Scheme::NbPf && t + 1 == cfg.max_tokens {
            grammar.close();
        }
        let given = prompt.get(t * w..).map_or(&[][..], |p| &p[..p.len().min(w)]);
        let mut row: Vec<u32> = Vec::with_capacity(w);
        let mut graph: Option<(Graph<T>, nmt_tensor::Var)> = None;
        for j in 0..w {
            if let Some(&v) = given.get(j) {
                row.push(v);
                continue;
            }
            let mask = grammar.allowed(&row, j);
            let choices: Vec<usize> = (0..mask.len()).filter(|&v| mask[v]).collect();
            let v = match choices[..] {
                [] => {
                    return Err(Error::Decode {
                        position: t,
                        msg: format!("no legal value for {}", scheme.features()[j].name()),
                    })
                }
                [only] => only as u32,
                _ => {
                    if graph.is_none() {
                        let mut g = Graph::new();
                        let mut input = data.clone();
                        input.resize((t + 1) * w, PAD);
                        let h = model.hidden(&mut g, &input)?;
                        graph = Some((g, h));
                    }
                    let (g, h) = graph.as_mut().expect("built above");
                    let logits = model
                        .step_logits(g, *h, t, &row, j)?
                        .ok_or_else(|| Error::Data(format!("feature {j} has no output layer")))?;
                    let scores: Vec<f64> = g.value(logits).data().iter().map(|x| x.to_f64_lossy()).collect();
                    let masked: Vec<f64> = scores
                        .iter()
                        .enumerate()
                        .map(|(c, &s)| if mask[c + SPECIALS as usize] { s } else { f64::NEG_INFINITY })
                        .collect();
                    nucleus_sample(&masked, cfg.top_p, cfg.temperature, &mut rng)? as u32 + SPECIALS
                }
            };
            row.push(v);
        }
        grammar.push(&row).map_err(|e| match e {
            Error::Decode { msg, .. } if t < prompt_tokens => Error::Data(format!("prompt token {t}: {msg}")),
            e => e,
        })?;
        data.extend_from_slice(&row);
        if grammar.can_end() {
            good = t + 1;
        }
    }
    if good == 0 || good < prompt_tokens {
        return Err(Error::Config(format!(
            "{} tokens are too few to finish a note after the prompt",
            cfg.max_tokens
        )));
    }
    data.truncate(good * w);
    let mut sequence = TokenSequence::new(scheme, time_signature, "generated");
    sequence.data = data;
    let piece = truncate_to_measures(decode(&sequence, vocab)?);
    Ok(Generated {
        sequence,
        prompt_len: prompt.len(),
        piece,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_keeps_the_smallest_sufficient_prefix() {
        let logits: Vec<f64> = [0.7f64, 0.2, 0.05, 0.05].iter().map(|p| p.ln()).collect();
        let kept = nucleus_filter(&logits, 0.75, 1.0).unwrap();
        assert_eq!(kept.len(), 2);
        assert!((kept[0].1 - 7.0 / 9.0).abs() < 1e-12);
        assert!((kept[1].1 - 2.0 / 9.0).abs() < 1e-12);
        let all = nucleus_filter(&logits, 1.0, 1.0).unwrap();
        assert_eq!(all.len(), 4);
        assert!((all.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_and_invalid_logits_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let masked = [f64::NEG_INFINITY; 3];
        assert!(nucleus_sample(&masked, 0.9, 1.0, &mut rng).is_err());
        assert!(nucleus_sample(&masked, 0.9, 0.0, &mut rng).is_err());
        assert!(nucleus_sample(&[0.0, f64::NAN], 0.9, 1.0, &mut rng).is_err());
        assert_eq!(nucleus_sample(&[0.0, 2.0, 2.0, f64::NEG_INFINITY], 0.9, 0.0, &mut rng).unwrap(), 1);
    }
}
