//! Note-based encoding: one compound token per note.

use super::canonical::note_slots;
use super::vocab::{Feature, FeatureVocab, Metric, CONTINUE, IGNORE};
use super::{change_value, check, decoded_note, expect_value, DecodedNote, Scheme, TokenSequence};
use crate::error::{Error, Result};
use crate::midi::Piece;

/// Sub-tokens a pitch-first token carries for the previous note.
pub const SHIFT: usize = 3;

pub fn encode(piece: &Piece, vocab: &FeatureVocab, pitch_first: bool) -> Result<TokenSequence> {
    let c = vocab.canonicalize(piece)?;
    if c.piece.notes.is_empty() {
        return Err(Error::Data(format!("{}: no notes to encode", piece.source_id)));
    }
    let scheme = if pitch_first { Scheme::NbPf } else { Scheme::NbMf };
    let mut seq = TokenSequence::new(scheme, c.piece.time_signature, c.piece.source_id.clone());
    seq.clamped = c.clamped;
    let rows: Vec<[u32; 8]> = note_slots(vocab, &c.piece)
        .iter()
        .map(|s| {
            [
                s.metric.index(),
                vocab.beat_index(s.position),
                s.chord,
                s.tempo,
                s.instrument,
                s.pitch,
                s.duration,
                s.velocity,
            ]
        })
        .collect();
    if !pitch_first {
        for r in &rows {
            seq.push(r);
        }
        return Ok(seq);
    }
    let mut carry = [IGNORE; SHIFT];
    for r in &rows {
        let mut t = [0u32; 8];
        t[..SHIFT].copy_from_slice(&carry);
        t[SHIFT..].copy_from_slice(&r[..5]);
        seq.push(&t);
        carry.copy_from_slice(&r[5..]);
    }
    let mut flush = [IGNORE; 8];
    flush[..SHIFT].copy_from_slice(&carry);
    seq.push(&flush);
    Ok(seq)
}

/// Regroups pitch-first tokens into metric-first rows, checking the IGNORE
/// slots at both ends.
fn unshift(seq: &TokenSequence) -> Result<Vec<[u32; 8]>> {
    let n = seq.len();
    check(n >= 2, n, || "pitch-first sequence needs a note token and a flush token".into())?;
    check(seq.token(0)[..SHIFT].iter().all(|&v| v == IGNORE), 0, || {
        "first pitch-first token must not carry a previous note".into()
    })?;
    check(seq.token(n - 1)[SHIFT..].iter().all(|&v| v == IGNORE), n - 1, || {
        "final pitch-first token must only flush the last note".into()
    })?;
    Ok((0..n - 1)
        .map(|i| {
            let (cur, next) = (seq.token(i), seq.token(i + 1));
            let mut r = [0u32; 8];
            r[..5].copy_from_slice(&cur[SHIFT..]);
            r[5..].copy_from_slice(&next[..SHIFT]);
            r
        })
        .collect())
}

pub(crate) fn decode(seq: &TokenSequence, vocab: &FeatureVocab, pitch_first: bool) -> Result<Vec<DecodedNote>> {
    let rows = if pitch_first {
        unshift(seq)?
    } else {
        seq.tokens().map(|t| t.try_into().expect("width 8")).collect()
    };
    let mut notes = Vec::with_capacity(rows.len());
    let (mut measure, mut position) = (0u64, 0u64);
    for (i, r) in rows.iter().enumerate() {
        let metric = Metric::from_index(r[0]).ok_or_else(|| Error::Decode {
            position: i,
            msg: format!("metric sub-token {} is not a value", r[0]),
        })?;
        check((i == 0) == (metric == Metric::Sss), i, || {
            format!("metric {} at token {i}", vocab.name(Feature::Metric, r[0]))
        })?;
        expect_value(vocab, Feature::Beat, r[1], i)?;
        let beat = (r[1] - 2) as u64;
        match metric {
            Metric::Sss => {}
            Metric::Nss => measure += 1,
            Metric::Nns => check(beat > position, i, || {
                format!("beat moves backwards from {position} to {beat} within a measure")
            })?,
            Metric::Nnn => check(beat == position, i, || {
                format!("same-position note changes beat from {position} to {beat}")
            })?,
        }
        position = beat;
        if metric == Metric::Nnn {
            for (f, v) in [(Feature::Chord, r[2]), (Feature::Tempo, r[3])] {
                check(!vocab.config.is_active(f) || v == CONTINUE, i, || {
                    format!("{} change on a same-position note", f.name())
                })?;
            }
        }
        let chord = change_value(vocab, Feature::Chord, r[2], i, i == 0)?;
        let tempo = change_value(vocab, Feature::Tempo, r[3], i, i == 0)?;
        notes.push(decoded_note(vocab, measure, position, i, chord, tempo, [r[4], r[5], r[6], r[7]])?);
    }
    Ok(notes)
}
