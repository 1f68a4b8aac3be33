//! Compound-word encoding: a metric token at each new position followed by
//! one note token per note.

use super::canonical::note_slots;
use super::vocab::{CpType, Feature, FeatureVocab, Metric, IGNORE};
use super::{change_value, check, decoded_note, expect_value, DecodedNote, Scheme, TokenSequence};
use crate::error::{Error, Result};
use crate::midi::Piece;

pub fn encode(piece: &Piece, vocab: &FeatureVocab) -> Result<TokenSequence> {
    let c = vocab.canonicalize(piece)?;
    if c.piece.notes.is_empty() {
        return Err(Error::Data(format!("{}: no notes to encode", piece.source_id)));
    }
    let mut seq = TokenSequence::new(Scheme::Cp, c.piece.time_signature, c.piece.source_id.clone());
    seq.clamped = c.clamped;
    for s in note_slots(vocab, &c.piece) {
        if s.metric != Metric::Nnn {
            let ty = if s.metric.starts_measure() { CpType::Bar } else { CpType::Metric };
            seq.push(&[ty.index(), vocab.beat_index(s.position), s.chord, s.tempo, IGNORE, IGNORE, IGNORE, IGNORE]);
        }
        seq.push(&[CpType::Note.index(), IGNORE, IGNORE, IGNORE, s.instrument, s.pitch, s.duration, s.velocity]);
    }
    Ok(seq)
}

struct Position {
    measure: u64,
    beat: u64,
    chord: Option<u32>,
    tempo: Option<u32>,
    notes: usize,
    at: usize,
}

pub(crate) fn decode(seq: &TokenSequence, vocab: &FeatureVocab) -> Result<Vec<DecodedNote>> {
    let mut notes = Vec::new();
    let mut cur: Option<Position> = None;
    for (i, t) in seq.tokens().enumerate() {
        let ty = CpType::from_index(t[0]).ok_or_else(|| Error::Decode {
            position: i,
            msg: format!("type sub-token {} is not a value", t[0]),
        })?;
        match ty {
            CpType::Bar | CpType::Metric => {
                check(t[4..].iter().all(|&v| v == IGNORE), i, || "metric token carries note sub-tokens".into())?;
                if let Some(p) = &cur {
                    check(p.notes > 0, p.at, || "metric token without notes".into())?;
                }
                expect_value(vocab, Feature::Beat, t[1], i)?;
                let beat = (t[1] - 2) as u64;
                let first = cur.is_none();
                check(!first || ty == CpType::Bar, i, || "sequence must open with a bar".into())?;
                let measure = match (&cur, ty) {
                    (None, _) => 0,
                    (Some(p), CpType::Bar) => p.measure + 1,
                    (Some(p), _) => {
                        check(beat > p.beat, i, || {
                            format!("beat moves backwards from {} to {beat} within a measure", p.beat)
                        })?;
                        p.measure
                    }
                };
                cur = Some(Position {
                    measure,
                    beat,
                    chord: change_value(vocab, Feature::Chord, t[2], i, first)?,
                    tempo: change_value(vocab, Feature::Tempo, t[3], i, first)?,
                    notes: 0,
                    at: i,
                });
            }
            CpType::Note => {
                let p = cur.as_mut().ok_or_else(|| Error::Decode {
                    position: i,
                    msg: "note before any metric token".into(),
                })?;
                check(t[1..4].iter().all(|&v| v == IGNORE), i, || "note token carries metric sub-tokens".into())?;
                // Chord and tempo belong to the first note of the position.
                let (chord, tempo) = if p.notes == 0 { (p.chord, p.tempo) } else { (None, None) };
                notes.push(decoded_note(vocab, p.measure, p.beat, i, chord, tempo, [t[4], t[5], t[6], t[7]])?);
                p.notes += 1;
            }
        }
    }
    if let Some(p) = &cur {
        check(p.notes > 0, p.at, || "metric token without notes".into())?;
    }
    Ok(notes)
}
