#![allow(dead_code)]

pub mod models;

use nmt_core::encoding::{build_vocab, Chord, FeatureConfig, FeatureVocab};
use nmt_core::midi::{Instrument, NoteEvent, Piece, TempoChange, TimeSignature};
use rand::Rng;

pub const RESOLUTION: u32 = 4;

const PROGRAMS: [u8; 8] = [0, 24, 33, 40, 56, 73, 81, 105];

/// Arbitrary quantized piece: several instruments, chords of notes sharing
/// onsets, empty measures, tempo and chord annotations at arbitrary ticks.
pub fn random_piece(rng: &mut impl Rng, id: usize) -> Piece {
    let ts = if rng.random_bool(0.7) {
        TimeSignature::COMMON
    } else {
        TimeSignature {
            numerator: 3,
            denominator: 4,
        }
    };
    let mut p = Piece::new(RESOLUTION, ts, format!("piece{id}"));
    let measure = p.measure_len().unwrap();
    let measures = rng.random_range(1..8u64);
    let instruments: Vec<Instrument> = (0..rng.random_range(1..4))
        .map(|_| {
            if rng.random_bool(0.15) {
                Instrument::DRUMS
            } else {
                Instrument::program(PROGRAMS[rng.random_range(0..PROGRAMS.len())])
            }
        })
        .collect();
    let notes = rng.random_range(1..60);
    for _ in 0..notes {
        let onset = rng.random_range(0..measures * measure);
        let stack = if rng.random_bool(0.4) { rng.random_range(2..4) } else { 1 };
        for _ in 0..stack {
            p.notes.push(NoteEvent {
                onset,
                pitch: rng.random_range(0..128),
                duration: rng.random_range(1..80),
                velocity: rng.random_range(1..128),
                instrument: instruments[rng.random_range(0..instruments.len())],
            });
        }
    }
    for _ in 0..rng.random_range(0..4) {
        let tick = rng.random_range(0..measures * measure);
        p.tempo_changes.push(TempoChange::from_bpm(tick, rng.random_range(40.0..200.0)));
    }
    p.tempo_changes.sort_by_key(|t| t.tick);
    p.tempo_changes.dedup_by_key(|t| t.tick);
    for _ in 0..rng.random_range(0..6) {
        let tick = rng.random_range(0..measures * measure);
        let c = (!rng.random_bool(0.2)).then(|| Chord::from_index(rng.random_range(0..84)));
        p.chords.push((tick, c));
    }
    p.chords.sort_by_key(|c| c.0);
    p.chords.dedup_by_key(|c| c.0);
    p.sort_notes();
    p
}

pub fn random_corpus(rng: &mut impl Rng, n: usize) -> Vec<Piece> {
    (0..n).map(|i| random_piece(rng, i)).collect()
}

pub fn vocab_for(corpus: &[Piece], config: FeatureConfig) -> FeatureVocab {
    build_vocab(corpus, config).unwrap()
}
