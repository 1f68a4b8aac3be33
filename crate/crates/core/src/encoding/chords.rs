//! Rule-based chord labels: pitch-class profile matching against 84 templates.

use serde::{Deserialize, Serialize};

use crate::midi::Piece;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quality {
    Maj,
    Min,
    Dim,
    Aug,
    Dom7,
    Maj7,
    Min7,
}

impl Quality {
    pub const ALL: [Quality; 7] = [
        Quality::Maj,
        Quality::Min,
        Quality::Dim,
        Quality::Aug,
        Quality::Dom7,
        Quality::Maj7,
        Quality::Min7,
    ];

    /// Semitones above the root.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            Quality::Maj => &[0, 4, 7],
            Quality::Min => &[0, 3, 7],
            Quality::Dim => &[0, 3, 6],
            Quality::Aug => &[0, 4, 8],
            Quality::Dom7 => &[0, 4, 7, 10],
            Quality::Maj7 => &[0, 4, 7, 11],
            Quality::Min7 => &[0, 3, 7, 10],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Maj => "maj",
            Quality::Min => "min",
            Quality::Dim => "dim",
            Quality::Aug => "aug",
            Quality::Dom7 => "7",
            Quality::Maj7 => "maj7",
            Quality::Min7 => "min7",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chord {
    /// Pitch class of the root, 0 = C.
    pub root: u8,
    pub quality: Quality,
}

pub const NUM_CHORDS: usize = 84;

const PITCH_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

impl Chord {
    /// Position in the root-major enumeration of all 84 chords.
    pub fn index(self) -> usize {
        self.root as usize * 7 + Quality::ALL.iter().position(|&q| q == self.quality).unwrap()
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            root: (i / 7) as u8,
            quality: Quality::ALL[i % 7],
        }
    }

    /// 12-bit pitch-class set.
    pub fn mask(self) -> u16 {
        self.quality
            .intervals()
            .iter()
            .fold(0, |m, &iv| m | 1 << ((self.root + iv) % 12))
    }

    pub fn name(self) -> String {
        format!("{}:{}", PITCH_NAMES[self.root as usize], self.quality.name())
    }
}

/// Window length in beats.
pub const WINDOW_BEATS: u64 = 2;

/// Integer template score: ten points per unit of in-chord weight, minus ten
/// per unit outside, minus the total weight for each chord tone that is absent.
fn score(profile: &[u64; 12], mask: u16) -> i64 {
    let total: u64 = profile.iter().sum();
    let mut inside = 0i64;
    let mut missing = 0i64;
    for (pc, &w) in profile.iter().enumerate() {
        let member = mask & (1 << pc) != 0;
        if member {
            inside += w as i64;
            if w == 0 {
                missing += 1;
            }
        }
    }
    let outside = total as i64 - inside;
    10 * (inside - outside) - missing * total as i64
}

/// Best-scoring chord for a duration-weighted pitch-class profile; ties go to
/// the lowest chord index. `None` when fewer than two pitch classes sound.
pub fn classify(profile: &[u64; 12]) -> Option<Chord> {
    if profile.iter().filter(|&&w| w > 0).count() < 2 {
        return None;
    }
    let mut best: Option<(i64, Chord)> = None;
    for i in 0..NUM_CHORDS {
        let c = Chord::from_index(i);
        let s = score(profile, c.mask());
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, c));
        }
    }
    best.map(|(_, c)| c)
}

/// One label per beat from a window of [`WINDOW_BEATS`] beats starting at
/// that beat, weighting each pitch class by how many ticks it sounds inside
/// the window. Drums are ignored. Only changes are emitted, starting with
/// the first beat.
pub fn detect_chords(piece: &Piece) -> Vec<(u64, Option<Chord>)> {
    let beat = piece.resolution.max(1) as u64;
    let end = piece.end_tick();
    let beats = end.div_ceil(beat);
    let mut out: Vec<(u64, Option<Chord>)> = Vec::new();
    for b in 0..beats {
        let lo = b * beat;
        let hi = lo + WINDOW_BEATS * beat;
        let mut profile = [0u64; 12];
        for n in &piece.notes {
            if n.instrument.is_drum {
                continue;
            }
            let s = n.onset.max(lo);
            let e = (n.onset + n.duration).min(hi);
            if e > s {
                profile[(n.pitch % 12) as usize] += e - s;
            }
        }
        let label = classify(&profile);
        if out.last().is_none_or(|&(_, prev)| prev != label) {
            out.push((lo, label));
        }
    }
    out
}
