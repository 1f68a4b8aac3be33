//! REMI: one flat token per event.
//!
//! Grammar: `(Bar (Beat Chord? Tempo? (Instrument? Pitch Duration Velocity?)+)+)+`
//! with instrument and velocity present exactly when those features are
//! active, beats increasing within a measure, and the first position carrying
//! chord and tempo.

use super::canonical::note_slots;
use super::vocab::{Feature, FeatureVocab, Metric};
use super::{check, decoded_note, DecodedNote, Scheme, TokenSequence};
use crate::error::{Error, Result};
use crate::midi::Piece;

pub fn encode(piece: &Piece, vocab: &FeatureVocab) -> Result<TokenSequence> {
    let c = vocab.canonicalize(piece)?;
    if c.piece.notes.is_empty() {
        return Err(Error::Data(format!("{}: no notes to encode", piece.source_id)));
    }
    let mut seq = TokenSequence::new(Scheme::Remi, c.piece.time_signature, c.piece.source_id.clone());
    seq.clamped = c.clamped;
    let mut push = |f: Feature, index: u32| {
        if let Some(id) = vocab.remi_id(f, index) {
            seq.push(&[id]);
        }
    };
    for s in note_slots(vocab, &c.piece) {
        push(Feature::Metric, s.metric.index());
        if s.metric != Metric::Nnn {
            push(Feature::Beat, vocab.beat_index(s.position));
        }
        push(Feature::Chord, s.chord);
        push(Feature::Tempo, s.tempo);
        push(Feature::Instrument, s.instrument);
        push(Feature::Pitch, s.pitch);
        push(Feature::Duration, s.duration);
        push(Feature::Velocity, s.velocity);
    }
    Ok(seq)
}

struct Reader<'a> {
    events: &'a [(Feature, u32)],
    vocab: &'a FeatureVocab,
    i: usize,
}

impl Reader<'_> {
    fn peek(&self) -> Option<Feature> {
        self.events.get(self.i).map(|e| e.0)
    }

    fn expect(&mut self, f: Feature) -> Result<u32> {
        match self.events.get(self.i) {
            Some(&(g, index)) if g == f => {
                self.i += 1;
                Ok(index)
            }
            Some(&(g, index)) => Err(Error::Decode {
                position: self.i,
                msg: format!("expected {}, found {}_{}", label(f), g.name(), self.vocab.name(g, index)),
            }),
            None => Err(Error::Decode {
                position: self.i,
                msg: format!("sequence ends where {} is expected", label(f)),
            }),
        }
    }

    fn optional(&mut self, f: Feature) -> Option<u32> {
        (self.peek() == Some(f)).then(|| {
            self.i += 1;
            self.events[self.i - 1].1
        })
    }
}

fn label(f: Feature) -> &'static str {
    if f == Feature::Metric {
        "Bar"
    } else {
        f.name()
    }
}

pub(crate) fn decode(seq: &TokenSequence, vocab: &FeatureVocab) -> Result<Vec<DecodedNote>> {
    let events = seq
        .data
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            vocab.remi_feature(id).ok_or_else(|| Error::Decode {
                position: i,
                msg: format!("token {} is not an event", vocab.remi_name(id)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = vocab.config;
    let mut r = Reader { events: &events, vocab, i: 0 };
    let mut notes = Vec::new();
    let mut measure = 0u64;
    while r.i < events.len() {
        r.expect(Feature::Metric)?;
        let mut prev: Option<u64> = None;
        loop {
            let at = r.i;
            let beat = (r.expect(Feature::Beat)? - 2) as u64;
            check(prev.is_none_or(|p| beat > p), at, || {
                format!("beat moves backwards from {} to {beat} within a measure", prev.unwrap_or(0))
            })?;
            prev = Some(beat);
            let first = notes.is_empty();
            let mut chord = r.optional(Feature::Chord);
            let mut tempo = r.optional(Feature::Tempo);
            for (f, v) in [(Feature::Chord, chord), (Feature::Tempo, tempo)] {
                check(!first || !cfg.is_active(f) || v.is_some(), r.i, || {
                    format!("first position must carry a {}", f.name())
                })?;
            }
            let mut count = 0;
            while matches!(r.peek(), Some(Feature::Instrument | Feature::Pitch)) || count == 0 {
                let at = r.i;
                let instrument = if cfg.instrument { r.expect(Feature::Instrument)? } else { super::IGNORE };
                let pitch = r.expect(Feature::Pitch)?;
                let duration = r.expect(Feature::Duration)?;
                let velocity = if cfg.velocity { r.expect(Feature::Velocity)? } else { super::IGNORE };
                notes.push(decoded_note(
                    vocab,
                    measure,
                    beat,
                    at,
                    chord.take(),
                    tempo.take(),
                    [instrument, pitch, duration, velocity],
                )?);
                count += 1;
            }
            if matches!(r.peek(), None | Some(Feature::Metric)) {
                break;
            }
        }
        measure += 1;
    }
    Ok(notes)
}
