//! Canonical pieces: the exact set of pieces the encoders can reproduce.
//!
//! Encoding first maps a piece onto the vocabulary grid: instruments to class
//! representatives, velocities to bin representatives, durations into range,
//! empty measures removed (a new-measure metric value means "the next
//! measure"), and tempo/chord annotations projected onto note onsets with
//! repeats dropped. Decoding any token sequence yields a canonical piece, and
//! `decode(encode(p)) == canonicalize(p)`.

use std::collections::BTreeMap;

use super::instruments;
use super::vocab::{
    tempo_bin, tempo_representative, velocity_bin, velocity_representative, FeatureVocab, Metric,
    DEFAULT_TEMPO_MICROS, DEFAULT_VELOCITY,
};
use crate::encoding::chords::Chord;
use crate::error::{Error, Result};
use crate::midi::{Instrument, NoteEvent, Piece, TempoChange};

/// Canonical form plus how many durations had to be clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Canonical {
    pub piece: Piece,
    pub clamped: usize,
}

fn value_at<T: Copy>(changes: &BTreeMap<u64, T>, tick: u64) -> Option<T> {
    changes.range(..=tick).next_back().map(|(_, &v)| v)
}

impl FeatureVocab {
    pub fn canonicalize(&self, piece: &Piece) -> Result<Canonical> {
        if piece.resolution != self.resolution {
            return Err(Error::Data(format!(
                "{}: resolution {} differs from the vocabulary's {}",
                piece.source_id, piece.resolution, self.resolution
            )));
        }
        let measure = piece.measure_len().ok_or_else(|| {
            Error::Data(format!(
                "{}: time signature {} does not fit the grid",
                piece.source_id, piece.time_signature
            ))
        })?;
        if measure > self.positions {
            return Err(Error::Data(format!(
                "{}: measure of {measure} positions exceeds the vocabulary's {}",
                piece.source_id, self.positions
            )));
        }
        let cfg = self.config;
        let mut clamped = 0;
        let mut merged: BTreeMap<(u64, Instrument, u8), NoteEvent> = BTreeMap::new();
        for n in &piece.notes {
            let instrument = if cfg.instrument {
                instruments::representative(instruments::class_of(n.instrument))
            } else {
                Instrument::program(0)
            };
            let velocity = if cfg.velocity {
                velocity_representative(velocity_bin(n.velocity))
            } else {
                DEFAULT_VELOCITY
            };
            let mut duration = n.duration.max(1);
            if duration > self.max_duration {
                duration = self.max_duration;
                clamped += 1;
            }
            merged
                .entry((n.onset, instrument, n.pitch))
                .and_modify(|m| {
                    m.duration = m.duration.max(duration);
                    m.velocity = m.velocity.max(velocity);
                })
                .or_insert(NoteEvent {
                    onset: n.onset,
                    pitch: n.pitch,
                    duration,
                    velocity,
                    instrument,
                });
        }
        let notes: Vec<NoteEvent> = merged.into_values().collect();

        // Keep only measures that contain an onset, renumbered consecutively.
        let mut measures: Vec<u64> = notes.iter().map(|n| n.onset / measure).collect();
        measures.sort_unstable();
        measures.dedup();
        let remap = |tick: u64| -> u64 {
            let m = measures.binary_search(&(tick / measure)).expect("onset measure");
            m as u64 * measure + tick % measure
        };
        let mut onsets: Vec<u64> = notes.iter().map(|n| n.onset).collect();
        onsets.sort_unstable();
        onsets.dedup();

        let mut tempo_changes = Vec::new();
        if cfg.tempo && !onsets.is_empty() {
            let map: BTreeMap<u64, u32> = piece
                .tempo_changes
                .iter()
                .map(|t| (t.tick, t.micros_per_quarter))
                .collect();
            let mut last = None;
            for &t in &onsets {
                let bin = tempo_bin(value_at(&map, t).unwrap_or(DEFAULT_TEMPO_MICROS));
                if last != Some(bin) {
                    tempo_changes.push(TempoChange {
                        tick: remap(t),
                        micros_per_quarter: tempo_representative(bin),
                    });
                    last = Some(bin);
                }
            }
        }

        let mut chords: Vec<(u64, Option<Chord>)> = Vec::new();
        if cfg.chord && !onsets.is_empty() {
            let map: BTreeMap<u64, Option<Chord>> = piece.chords.iter().copied().collect();
            let mut last: Option<Option<Chord>> = None;
            for &t in &onsets {
                let c = value_at(&map, t).flatten();
                if last != Some(c) {
                    chords.push((remap(t), c));
                    last = Some(c);
                }
            }
        }

        let mut out = Piece {
            notes: notes
                .into_iter()
                .map(|mut n| {
                    n.onset = remap(n.onset);
                    n
                })
                .collect(),
            time_signature: piece.time_signature,
            tempo_changes,
            chords,
            resolution: piece.resolution,
            source_id: piece.source_id.clone(),
        };
        out.sort_notes();
        Ok(Canonical { piece: out, clamped })
    }
}

/// One note's compound sub-token values, feature by feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoteSlots {
    pub metric: Metric,
    /// Measure index and position within it.
    pub measure: u64,
    pub position: u64,
    pub chord: u32,
    pub tempo: u32,
    pub instrument: u32,
    pub pitch: u32,
    pub duration: u32,
    pub velocity: u32,
}

/// Sub-token values of every note of a canonical piece, in note order.
pub fn note_slots(vocab: &FeatureVocab, piece: &Piece) -> Vec<NoteSlots> {
    use super::vocab::{CONTINUE, IGNORE};
    let cfg = vocab.config;
    let measure = piece.measure_len().expect("canonical piece");
    let chords: BTreeMap<u64, Option<Chord>> = piece.chords.iter().copied().collect();
    let tempi: BTreeMap<u64, u32> = piece
        .tempo_changes
        .iter()
        .map(|t| (t.tick, t.micros_per_quarter))
        .collect();
    let mut out: Vec<NoteSlots> = Vec::with_capacity(piece.notes.len());
    for n in &piece.notes {
        let (m, pos) = (n.onset / measure, n.onset % measure);
        let metric = match out.last() {
            None => Metric::Sss,
            Some(prev) if prev.measure != m => Metric::Nss,
            Some(prev) if prev.position != pos => Metric::Nns,
            Some(_) => Metric::Nnn,
        };
        let fresh = metric != Metric::Nnn;
        let chord = if !cfg.chord {
            IGNORE
        } else {
            match chords.get(&n.onset) {
                Some(&c) if fresh => vocab.chord_index(c),
                _ => CONTINUE,
            }
        };
        let tempo = if !cfg.tempo {
            IGNORE
        } else {
            match tempi.get(&n.onset) {
                Some(&t) if fresh => vocab.tempo_index(t),
                _ => CONTINUE,
            }
        };
        out.push(NoteSlots {
            metric,
            measure: m,
            position: pos,
            chord,
            tempo,
            instrument: if cfg.instrument {
                vocab.instrument_index(n.instrument)
            } else {
                IGNORE
            },
            pitch: vocab.pitch_index(n.pitch),
            duration: vocab.duration_index(n.duration),
            velocity: if cfg.velocity {
                vocab.velocity_index(n.velocity)
            } else {
                IGNORE
            },
        });
    }
    out
}
