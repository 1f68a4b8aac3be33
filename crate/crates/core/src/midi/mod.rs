//! Quantized multi-instrument scores and the Standard MIDI File boundary.

mod corpus;
mod quantize;
mod smf;

use serde::{Deserialize, Serialize};

use crate::encoding::chords::Chord;

pub use corpus::{
    augment_pitch, filter_corpus, read_manifest, split_corpus, write_manifest, CorpusSplit,
    FilterCriteria, FilterReport, ManifestEntry, MAX_PITCH_SHIFT, MIN_PITCH_SHIFT,
};
pub use quantize::quantize;
pub use smf::{parse_midi, write_midi, ParsedMidi};

/// General MIDI program plus the channel-10 drum flag. Drums always carry
/// program 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instrument {
    pub program: u8,
    pub is_drum: bool,
}

impl Instrument {
    pub const DRUMS: Instrument = Instrument {
        program: 0,
        is_drum: true,
    };

    pub fn program(program: u8) -> Self {
        Self {
            program,
            is_drum: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset: u64,
    pub pitch: u8,
    pub duration: u64,
    pub velocity: u8,
    pub instrument: Instrument,
}

impl NoteEvent {
    /// Ordering key: `(onset, instrument, pitch)`, then the remaining fields so
    /// that sorting is total.
    pub fn sort_key(&self) -> (u64, Instrument, u8, u64, u8) {
        (self.onset, self.instrument, self.pitch, self.duration, self.velocity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeSignature {
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    pub const COMMON: TimeSignature = TimeSignature {
        numerator: 4,
        denominator: 4,
    };

    /// Measure length in grid units, `None` when it is not a whole number.
    pub fn measure_len(&self, resolution: u32) -> Option<u64> {
        let num = self.numerator as u64 * resolution as u64 * 4;
        let den = self.denominator as u64;
        (den > 0 && num % den == 0 && num > 0).then(|| num / den)
    }
}

impl std::fmt::Display for TimeSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TempoChange {
    pub tick: u64,
    pub micros_per_quarter: u32,
}

impl TempoChange {
    pub fn bpm(&self) -> f64 {
        60_000_000.0 / self.micros_per_quarter as f64
    }

    pub fn from_bpm(tick: u64, bpm: f64) -> Self {
        Self {
            tick,
            micros_per_quarter: (60_000_000.0 / bpm).round() as u32,
        }
    }
}

/// A score. `resolution` is ticks per quarter note: the file's division right
/// after parsing, grid units per beat after [`quantize`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub notes: Vec<NoteEvent>,
    pub time_signature: TimeSignature,
    pub tempo_changes: Vec<TempoChange>,
    /// Chord annotations as `(tick, label)`; `None` marks a stretch without a
    /// recognizable chord.
    #[serde(default)]
    pub chords: Vec<(u64, Option<Chord>)>,
    pub resolution: u32,
    pub source_id: String,
}

impl Piece {
    pub fn new(resolution: u32, time_signature: TimeSignature, source_id: impl Into<String>) -> Self {
        Self {
            notes: Vec::new(),
            time_signature,
            tempo_changes: Vec::new(),
            chords: Vec::new(),
            resolution,
            source_id: source_id.into(),
        }
    }

    pub fn sort_notes(&mut self) {
        self.notes.sort_by_key(|n| n.sort_key());
    }

    /// Distinct instruments in ascending order.
    pub fn instruments(&self) -> Vec<Instrument> {
        let mut v: Vec<Instrument> = self.notes.iter().map(|n| n.instrument).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn measure_len(&self) -> Option<u64> {
        self.time_signature.measure_len(self.resolution)
    }

    /// Ticks covered by the notes (last note end).
    pub fn end_tick(&self) -> u64 {
        self.notes.iter().map(|n| n.onset + n.duration).max().unwrap_or(0)
    }
}
