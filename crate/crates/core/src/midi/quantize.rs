use std::collections::BTreeMap;

use super::{NoteEvent, Piece, TempoChange};
use crate::error::{Error, Result};

/// Nearest grid unit, halves rounding up.
fn snap(ticks: u64, from: u32, to: u32) -> u64 {
    let (from, to) = (from as u128, to as u128);
    ((ticks as u128 * to * 2 + from) / (2 * from)) as u64
}

/// Snaps onsets and durations to `resolution` grid units per beat.
///
/// Durations are clamped to at least one unit. Notes that coincide after
/// snapping (same onset, pitch and instrument) merge into one keeping the
/// longest duration and the loudest velocity. Tempo changes and chord labels
/// snap too; when several land on one unit the last wins.
pub fn quantize(piece: &Piece, resolution: u32) -> Result<Piece> {
    if resolution == 0 {
        return Err(Error::Config("quantization resolution must be positive".into()));
    }
    if piece.resolution == 0 {
        return Err(Error::Data("piece has zero ticks per beat".into()));
    }
    let from = piece.resolution;
    let mut merged: BTreeMap<(u64, super::Instrument, u8), NoteEvent> = BTreeMap::new();
    for n in &piece.notes {
        let onset = snap(n.onset, from, resolution);
        let duration = snap(n.duration, from, resolution).max(1);
        merged
            .entry((onset, n.instrument, n.pitch))
            .and_modify(|m| {
                m.duration = m.duration.max(duration);
                m.velocity = m.velocity.max(n.velocity);
            })
            .or_insert(NoteEvent {
                onset,
                pitch: n.pitch,
                duration,
                velocity: n.velocity,
                instrument: n.instrument,
            });
    }
    let mut tempo: BTreeMap<u64, u32> = BTreeMap::new();
    for t in &piece.tempo_changes {
        tempo.insert(snap(t.tick, from, resolution), t.micros_per_quarter);
    }
    let mut chords = BTreeMap::new();
    for &(tick, c) in &piece.chords {
        chords.insert(snap(tick, from, resolution), c);
    }
    let mut out = Piece {
        notes: merged.into_values().collect(),
        time_signature: piece.time_signature,
        tempo_changes: tempo
            .into_iter()
            .map(|(tick, micros_per_quarter)| TempoChange {
                tick,
                micros_per_quarter,
            })
            .collect(),
        chords: chords.into_iter().collect(),
        resolution,
        source_id: piece.source_id.clone(),
    };
    out.sort_notes();
    Ok(out)
}
