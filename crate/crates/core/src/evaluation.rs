//! Cross-encoding NLL: moving-window scoring, folding of sub-tokens REMI
//! leaves implicit into the next compared one, and per-category reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{align_to_remi, AlignEntry, Feature, FeatureVocab, RemiAlignment, Scheme, TokenSequence};
use crate::error::{Error, Result};
use crate::model::Model;
use nmt_tensor::Scalar;

/// Anything that assigns teacher-forced log-probabilities to a token window.
pub trait Scorer: Sync {
    fn vocab_sizes(&self) -> &[usize];

    /// Longest window the scorer accepts, in tokens.
    fn max_len(&self) -> usize;

    /// Natural-log probability of every sub-token of `tokens` given everything
    /// before it in the window, row-major; `None` for PAD and IGNORE.
    fn log_probs(&self, tokens: &[u32]) -> Result<Vec<Option<f64>>>;
}

impl<T: Scalar> Scorer for Model<T> {
    fn vocab_sizes(&self) -> &[usize] {
        &self.config.vocab_sizes
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn log_probs(&self, tokens: &[u32]) -> Result<Vec<Option<f64>>> {
        Model::log_probs(self, tokens)
    }
}

/// Tokens `start..end` are fed; `score_from..end` are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub end: usize,
    pub score_from: usize,
}

/// Windows over `n` tokens. The first covers `0..min(window, n)` and scores
/// everything; each later one ends `stride` tokens further (the last is cut
/// at `n`) and scores only its new tokens.
pub fn window_plan(n: usize, window: usize, stride: usize) -> Result<Vec<WindowSpan>> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::Config(format!(
            "need 1 <= stride <= window, got window {window} stride {stride}"
        )));
    }
    let first = n.min(window);
    let mut plan = vec![WindowSpan {
        start: 0,
        end: first,
        score_from: 0,
    }];
    let mut done = first;
    while done < n {
        let end = (done + stride).min(n);
        plan.push(WindowSpan {
            start: end - window,
            end,
            score_from: done,
        });
        done = end;
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub log_probs: Vec<Option<f64>>,
    pub windows: usize,
    /// The piece was shorter than one window.
    pub short: bool,
}

pub fn moving_window_nll(scorer: &dyn Scorer, tokens: &[u32], window: usize, stride: usize) -> Result<WindowScores> {
    let w = scorer.vocab_sizes().len();
    if w == 0 || tokens.len() % w != 0 {
        return Err(Error::Data(format!("{} sub-tokens do not form tokens of width {w}", tokens.len())));
    }
    if window > scorer.max_len() {
        return Err(Error::Config(format!(
            "window {window} exceeds the model's maximum length {}",
            scorer.max_len()
        )));
    }
    let n = tokens.len() / w;
    let plan = window_plan(n, window, stride)?;
    let parts = plan
        .par_iter()
        .map(|s| {
            let lp = scorer.log_probs(&tokens[s.start * w..s.end * w])?;
            Ok(lp[(s.score_from - s.start) * w..].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowScores {
        log_probs: parts.concat(),
        windows: plan.len(),
        short: n < window,
    })
}

/// One REMI-comparable prediction: the matched sub-token at `(token, slot)`
/// with the log-probability of everything folded into it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub token: usize,
    pub slot: usize,
    pub remi: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adjusted {
    pub events: Vec<Event>,
    /// Omitted sub-tokens folded into a later event.
    pub folded: usize,
    /// Omitted sub-tokens after the last matched one, added to the final event.
    pub leftover: usize,
}

/// Adds the log-probability of each omitted sub-token to the next matched
/// one. Omitted mass after the last match goes to the last event.
pub fn adjust_compound_nll(log_probs: &[Option<f64>], alignment: &RemiAlignment) -> Result<Adjusted> {
    if log_probs.len() != alignment.entries.len() {
        return Err(Error::Alignment(format!(
            "{} scores for {} aligned sub-tokens",
            log_probs.len(),
            alignment.entries.len()
        )));
    }
    let w = alignment.width;
    let mut events = Vec::with_capacity(alignment.remi_len);
    let (mut carry, mut pending, mut folded) = (0.0, 0usize, 0usize);
    for (k, (&e, &lp)) in alignment.entries.iter().zip(log_probs).enumerate() {
        if e == AlignEntry::Ignored {
            continue;
        }
        let lp = lp.ok_or_else(|| Error::Data(format!("sub-token {k} is compared but has no score")))?;
        match e {
            AlignEntry::Omitted => {
                carry += lp;
                pending += 1;
            }
            AlignEntry::Matched(remi) => {
                events.push(Event {
                    token: k / w,
                    slot: k % w,
                    remi,
                    log_prob: lp + carry,
                });
                folded += pending;
                carry = 0.0;
                pending = 0;
            }
            AlignEntry::Ignored => unreachable!(),
        }
    }
    if pending > 0 {
        let last = events
            .last_mut()
            .ok_or_else(|| Error::Data("no sub-token has a REMI counterpart".into()))?;
        last.log_prob += carry;
    }
    Ok(Adjusted {
        events,
        folded,
        leftover: pending,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNll {
    pub feature: String,
    pub mean_nll: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub scheme: Scheme,
    pub window: usize,
    pub stride: usize,
    /// REMI-comparable categories (bar, beat, chord, ...), after folding.
    pub features: Vec<FeatureNll>,
    /// Mean over all comparable predictions (count-weighted).
    pub mean_nll: f64,
    /// Unweighted average of the per-category means.
    pub feature_mean_nll: f64,
    pub total_nll: f64,
    /// Per sub-token slot of the scheme, before folding.
    pub raw: Vec<FeatureNll>,
    pub pieces: usize,
    pub windows: usize,
    pub short_pieces: Vec<String>,
    /// Pieces whose trailing omitted sub-tokens went to the last event.
    pub leftover_pieces: Vec<String>,
}

impl NllReport {
    pub fn feature(&self, name: &str) -> Option<&FeatureNll> {
        self.features.iter().find(|f| f.feature == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,feature,mean_nll,count\n");
        for (kind, rows) in [("comparable", &self.features), ("raw", &self.raw)] {
            for f in rows {
                let _ = writeln!(s, "{kind},{},{},{}", f.feature, f.mean_nll, f.count);
            }
        }
        let count: usize = self.features.iter().map(|f| f.count).sum();
        let _ = writeln!(s, "summary,mean,{},{count}", self.mean_nll);
        let _ = writeln!(s, "summary,feature_mean,{},{}", self.feature_mean_nll, self.features.len());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub window: usize,
    /// Defaults to `window / 2`.
    pub stride: Option<usize>,
}

impl EvalOptions {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.window / 2).max(1))
    }
}

/// Comparable category of a matched sub-token. Bars are reported under
/// `Metric`.
fn category(scheme: Scheme, vocab: &FeatureVocab, slot: usize, value: u32) -> Result<Feature> {
    let f = match scheme {
        Scheme::Remi => {
            vocab
                .remi_feature(value)
                .ok_or_else(|| Error::Data(format!("REMI id {value} is not a value token")))?
                .0
        }
        _ => scheme.features()[slot],
    };
    Ok(if f == Feature::Type { Feature::Metric } else { f })
}

fn category_name(f: Feature) -> &'static str {
    if f == Feature::Metric {
        "bar"
    } else {
        f.name()
    }
}

#[derive(Default)]
struct Sums {
    nll: BTreeMap<Feature, (f64, usize)>,
    raw: Vec<(f64, usize)>,
}

/// Scores every sequence with moving windows, folds compound scores onto
/// REMI events and averages per category.
pub fn evaluate_corpus(
    scorer: &dyn Scorer,
    sequences: &[TokenSequence],
    vocab: &FeatureVocab,
    opts: EvalOptions,
) -> Result<NllReport> {
    let first = sequences.first().ok_or_else(|| Error::Data("nothing to evaluate".into()))?;
    let scheme = first.scheme;
    if let Some(s) = sequences.iter().find(|s| s.scheme != scheme) {
        return Err(Error::Data(format!("{} is {}, expected {scheme}", s.source_id, s.scheme)));
    }
    let expected = vocab.scheme_sizes(scheme);
    if scorer.vocab_sizes() != expected {
        return Err(Error::Config(format!(
            "model vocabulary {:?} does not match {scheme} vocabulary {expected:?}",
            scorer.vocab_sizes()
        )));
    }
    let stride = opts.stride();
    let width = scheme.width();
    let per_piece = sequences
        .par_iter()
        .map(|seq| {
            let scores = moving_window_nll(scorer, &seq.data, opts.window, stride)?;
            let alignment = align_to_remi(seq, vocab);
            let adjusted = adjust_compound_nll(&scores.log_probs, &alignment)?;
            Ok((scores, adjusted))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sums = Sums {
        raw: vec![(0.0, 0); width],
        ..Sums::default()
    };
    let mut report = NllReport {
        scheme,
        window: opts.window,
        stride,
        features: Vec::new(),
        mean_nll: 0.0,
        feature_mean_nll: 0.0,
        total_nll: 0.0,
        raw: Vec::new(),
        pieces: sequences.len(),
        windows: 0,
        short_pieces: Vec::new(),
        leftover_pieces: Vec::new(),
    };
    for (seq, (scores, adjusted)) in sequences.iter().zip(per_piece) {
        report.windows += scores.windows;
        if scores.short {
            report.short_pieces.push(seq.source_id.clone());
        }
        if adjusted.leftover > 0 {
            report.leftover_pieces.push(seq.source_id.clone());
        }
        for (k, lp) in scores.log_probs.iter().enumerate() {
            if let Some(lp) = lp {
                let r = &mut sums.raw[k % width];
                r.0 -= lp;
                r.1 += 1;
            }
        }
        for e in &adjusted.events {
            let c = category(scheme, vocab, e.slot, seq.data[e.token * width + e.slot])?;
            let s = sums.nll.entry(c).or_default();
            s.0 -= e.log_prob;
            s.1 += 1;
        }
    }
    let count: usize = sums.nll.values().map(|s| s.1).sum();
    if count == 0 {
        return Err(Error::Data("no scored tokens".into()));
    }
    report.total_nll = sums.nll.values().map(|s| s.0).sum();
    report.mean_nll = report.total_nll / count as f64;
    report.features = sums
        .nll
        .iter()
        .map(|(&f, &(nll, n))| FeatureNll {
            feature: category_name(f).into(),
            mean_nll: nll / n as f64,
            count: n,
        })
        .collect();
    report.feature_mean_nll =
        report.features.iter().map(|f| f.mean_nll).sum::<f64>() / report.features.len() as f64;
    report.raw = scheme
        .features()
        .iter()
        .zip(&sums.raw)
        .filter(|(_, r)| r.1 > 0)
        .map(|(f, &(nll, n))| FeatureNll {
            feature: f.name().into(),
            mean_nll: nll / n as f64,
            count: n,
        })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn covered(n: usize, window: usize, stride: usize) -> Vec<usize> {
        let mut hits = vec![0; n];
        for s in window_plan(n, window, stride).unwrap() {
            assert!(s.start <= s.score_from && s.score_from < s.end.max(1) && s.end <= n);
            assert!(s.end - s.start <= window);
            if s.start > 0 {
                assert!(s.score_from - s.start >= window - stride);
            }
            for h in &mut hits[s.score_from..s.end] {
                *h += 1;
            }
        }
        hits
    }

    #[test]
    fn every_position_is_scored_once() {
        for n in 1..40 {
            for window in 1..12 {
                for stride in 1..=window {
                    assert!(covered(n, window, stride).iter().all(|&h| h == 1), "{n} {window} {stride}");
                }
            }
        }
        assert_eq!(window_plan(8, 8, 4).unwrap().len(), 1);
        assert_eq!(window_plan(16, 8, 4).unwrap().len(), 3);
        assert!(window_plan(8, 4, 5).is_err());
        assert!(window_plan(8, 4, 0).is_err());
    }

    #[test]
    fn folding_multiplies_into_the_next_match() {
        let alignment = RemiAlignment {
            width: 2,
            entries: vec![
                AlignEntry::Matched(0),
                AlignEntry::Matched(1),
                AlignEntry::Omitted,
                AlignEntry::Matched(2),
                AlignEntry::Ignored,
                AlignEntry::Omitted,
            ],
            remi_len: 3,
        };
        let lp = [Some(-0.1), Some(-0.2), Some(0.5f64.ln()), Some(0.8f64.ln()), None, Some(-0.3)];
        let a = adjust_compound_nll(&lp, &alignment).unwrap();
        assert_eq!(a.events.len(), 3);
        assert!((a.events[2].log_prob.exp() - 0.4 * (-0.3f64).exp()).abs() < 1e-12);
        assert_eq!((a.folded, a.leftover), (1, 1));
        assert_eq!((a.events[2].token, a.events[2].slot), (1, 1));
    }
}
