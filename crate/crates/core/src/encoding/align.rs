//! Which compound sub-tokens have a counterpart in the REMI stream.

use serde::{Deserialize, Serialize};

use super::vocab::{Feature, FeatureVocab, Metric, IGNORE, PAD};
use super::{Scheme, TokenSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignEntry {
    /// Index of the REMI token this sub-token corresponds to.
    Matched(usize),
    /// Scored sub-token that REMI leaves implicit (CONTINUE, a repeated beat,
    /// a metric value without a Bar, a CP type other than Bar). Its
    /// probability folds into the next matched sub-token.
    Omitted,
    /// PAD or IGNORE: not predicted at all.
    Ignored,
}

/// One entry per sub-token, row-major like [`TokenSequence::data`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemiAlignment {
    pub width: usize,
    pub entries: Vec<AlignEntry>,
    /// Length of the REMI stream of the same piece.
    pub remi_len: usize,
}

impl RemiAlignment {
    pub fn entry(&self, token: usize, slot: usize) -> AlignEntry {
        self.entries[token * self.width + slot]
    }

    pub fn matched(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e, AlignEntry::Matched(_))).count()
    }

    pub fn omitted(&self) -> usize {
        self.entries.iter().filter(|e| **e == AlignEntry::Omitted).count()
    }
}

/// Aligns every sub-token of `seq` to the REMI encoding of the same piece.
/// For REMI input the alignment is the identity.
pub fn align_to_remi(seq: &TokenSequence, vocab: &FeatureVocab) -> RemiAlignment {
    let features = seq.scheme.features();
    let metric_slot = features.iter().position(|&f| f == Feature::Metric);
    let mut entries = Vec::with_capacity(seq.data.len());
    let mut next = 0usize;
    for t in seq.tokens() {
        for (&f, &v) in features.iter().zip(t) {
            if v == PAD || v == IGNORE {
                entries.push(AlignEntry::Ignored);
                continue;
            }
            let counterpart = match f {
                Feature::Remi => true,
                // An NB beat is only written to REMI when the position moves.
                Feature::Beat => metric_slot.is_none_or(|m| Metric::from_index(t[m]) != Some(Metric::Nnn)),
                _ => vocab.remi_id(f, v).is_some(),
            };
            if counterpart {
                entries.push(AlignEntry::Matched(next));
                next += 1;
            } else {
                entries.push(AlignEntry::Omitted);
            }
        }
    }
    RemiAlignment {
        width: seq.width,
        entries,
        remi_len: next,
    }
}

/// Test hook: checks an alignment against the actual REMI encoding, sub-token
/// by sub-token.
pub fn verify_alignment(
    seq: &TokenSequence,
    alignment: &RemiAlignment,
    remi: &TokenSequence,
    vocab: &FeatureVocab,
) -> Result<()> {
    if remi.scheme != Scheme::Remi {
        return Err(Error::Alignment(format!("reference sequence is {}, not remi", remi.scheme)));
    }
    if alignment.entries.len() != seq.data.len() || alignment.width != seq.width {
        return Err(Error::Alignment(format!(
            "alignment covers {} sub-tokens, sequence has {}",
            alignment.entries.len(),
            seq.data.len()
        )));
    }
    let matched = alignment.matched();
    if matched != remi.len() || alignment.remi_len != remi.len() {
        return Err(Error::Alignment(format!(
            "{matched} matched sub-tokens for {} REMI tokens",
            remi.len()
        )));
    }
    let features = seq.scheme.features();
    let mut expected = 0usize;
    for (k, (&e, &v)) in alignment.entries.iter().zip(&seq.data).enumerate() {
        let AlignEntry::Matched(r) = e else { continue };
        if r != expected {
            return Err(Error::Alignment(format!("sub-token {k} matched out of order ({r}, expected {expected})")));
        }
        expected += 1;
        let f = features[k % seq.width];
        let want = if f == Feature::Remi { Some(v) } else { vocab.remi_id(f, v) };
        if want != Some(remi.data[r]) {
            return Err(Error::Alignment(format!(
                "sub-token {k} ({}) does not match REMI token {r} ({})",
                f.name(),
                vocab.remi_name(remi.data[r])
            )));
        }
    }
    Ok(())
}
