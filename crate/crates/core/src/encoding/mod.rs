//! The four token encodings (REMI, compound word, note-based metric-first and
//! pitch-first), their decoders, and the sub-token alignment to REMI.
//!
//! | scheme | token | features |
//! |---|---|---|
//! | REMI | one flat id | `remi` |
//! | CP | metric or note family | type, beat, chord, tempo, instrument, pitch, duration, velocity |
//! | NB-MF | one per note | metric, beat, chord, tempo, instrument, pitch, duration, velocity |
//! | NB-PF | one per note + flush | pitch, duration, velocity (previous note), metric, beat, chord, tempo, instrument |

mod align;
mod canonical;
pub mod chords;
mod cp;
mod dump;
pub mod instruments;
mod nb;
mod remi;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::midi::{Instrument, NoteEvent, Piece, TempoChange, TimeSignature};

pub use align::{align_to_remi, verify_alignment, AlignEntry, RemiAlignment};
pub use canonical::{note_slots, Canonical, NoteSlots};
pub use chords::{detect_chords, Chord, Quality};
pub use dump::{dump_tokens, length_stats, LengthStats};
pub use vocab::{
    build_vocab, tempo_bin, tempo_edges, tempo_representative, velocity_bin,
    velocity_representative, CpType, Feature, FeatureConfig, FeatureVocab, Metric, VocabFile,
    CONTINUE, DEFAULT_TEMPO_MICROS, DEFAULT_VELOCITY, IGNORE, PAD, TEMPO_BINS, TEMPO_MAX_BPM,
    TEMPO_MIN_BPM, VELOCITY_BINS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "remi")]
    Remi,
    #[serde(rename = "cp")]
    Cp,
    #[serde(rename = "nb-mf")]
    NbMf,
    #[serde(rename = "nb-pf")]
    NbPf,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Remi, Scheme::Cp, Scheme::NbMf, Scheme::NbPf];

    pub fn features(self) -> &'static [Feature] {
        use Feature::*;
        match self {
            Scheme::Remi => &[Remi],
            Scheme::Cp => &[Type, Beat, Chord, Tempo, Instrument, Pitch, Duration, Velocity],
            Scheme::NbMf => &[Metric, Beat, Chord, Tempo, Instrument, Pitch, Duration, Velocity],
            Scheme::NbPf => &[Pitch, Duration, Velocity, Metric, Beat, Chord, Tempo, Instrument],
        }
    }

    pub fn width(self) -> usize {
        self.features().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Remi => "remi",
            Scheme::Cp => "cp",
            Scheme::NbMf => "nb-mf",
            Scheme::NbPf => "nb-pf",
        }
    }

    pub fn is_compound(self) -> bool {
        self != Scheme::Remi
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?} (expected remi, cp, nb-mf or nb-pf)")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FeatureVocab {
    pub fn scheme_sizes(&self, scheme: Scheme) -> Vec<usize> {
        scheme.features().iter().map(|&f| self.size(f)).collect()
    }
}

/// Encoded piece: `len()` tokens of `width` sub-token indices each, stored
/// row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub scheme: Scheme,
    pub width: usize,
    pub data: Vec<u32>,
    pub time_signature: TimeSignature,
    pub source_id: String,
    /// Durations clamped into the vocabulary while encoding.
    #[serde(default)]
    pub clamped: usize,
}

impl TokenSequence {
    pub fn new(scheme: Scheme, time_signature: TimeSignature, source_id: impl Into<String>) -> Self {
        Self {
            scheme,
            width: scheme.width(),
            data: Vec::new(),
            time_signature,
            source_id: source_id.into(),
            clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn token(&self, i: usize) -> &[u32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[u32]> {
        self.data.chunks(self.width)
    }

    pub fn push(&mut self, token: &[u32]) {
        assert_eq!(token.len(), self.width, "token width");
        self.data.extend_from_slice(token);
    }

    /// First `n` tokens.
    pub fn prefix(&self, n: usize) -> TokenSequence {
        let mut out = self.clone();
        out.data.truncate(n.min(self.len()) * self.width);
        out
    }
}

/// Detects chords when the chord feature is on and the piece has no
/// annotations yet.
pub fn annotate_chords(piece: &mut Piece, vocab: &FeatureVocab) {
    if vocab.config.chord && piece.chords.is_empty() {
        piece.chords = detect_chords(piece);
    }
}

pub fn encode(piece: &Piece, vocab: &FeatureVocab, scheme: Scheme) -> Result<TokenSequence> {
    match scheme {
        Scheme::Remi => remi::encode(piece, vocab),
        Scheme::Cp => cp::encode(piece, vocab),
        Scheme::NbMf => nb::encode(piece, vocab, false),
        Scheme::NbPf => nb::encode(piece, vocab, true),
    }
}

pub fn encode_nb(piece: &Piece, vocab: &FeatureVocab, pitch_first: bool) -> Result<TokenSequence> {
    nb::encode(piece, vocab, pitch_first)
}

pub fn encode_cp(piece: &Piece, vocab: &FeatureVocab) -> Result<TokenSequence> {
    cp::encode(piece, vocab)
}

pub fn encode_remi(piece: &Piece, vocab: &FeatureVocab) -> Result<TokenSequence> {
    remi::encode(piece, vocab)
}

/// Reconstructs the (canonical) piece a sequence encodes.
pub fn decode(seq: &TokenSequence, vocab: &FeatureVocab) -> Result<Piece> {
    if seq.is_empty() {
        return Err(Error::Decode {
            position: 0,
            msg: "empty sequence".into(),
        });
    }
    if seq.width != seq.scheme.width() || seq.data.len() % seq.width != 0 {
        return Err(Error::Decode {
            position: 0,
            msg: format!("token width {} does not fit scheme {}", seq.width, seq.scheme),
        });
    }
    let notes = match seq.scheme {
        Scheme::Remi => remi::decode(seq, vocab)?,
        Scheme::Cp => cp::decode(seq, vocab)?,
        Scheme::NbMf => nb::decode(seq, vocab, false)?,
        Scheme::NbPf => nb::decode(seq, vocab, true)?,
    };
    build_piece(seq, vocab, notes)
}

/// A note as read back from tokens, before it becomes a [`NoteEvent`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct DecodedNote {
    pub measure: u64,
    pub position: u64,
    /// Token index, for error messages.
    pub at: usize,
    pub chord: Option<Option<Chord>>,
    pub tempo: Option<u32>,
    pub instrument: u32,
    pub pitch: u32,
    pub duration: u32,
    pub velocity: u32,
}

fn check(cond: bool, at: usize, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Decode {
            position: at,
            msg: msg(),
        })
    }
}

fn build_piece(seq: &TokenSequence, vocab: &FeatureVocab, notes: Vec<DecodedNote>) -> Result<Piece> {
    let mut piece = Piece::new(vocab.resolution, seq.time_signature, seq.source_id.clone());
    let measure = piece.measure_len().ok_or_else(|| Error::Decode {
        position: 0,
        msg: format!("time signature {} does not fit the grid", seq.time_signature),
    })?;
    check(!notes.is_empty(), 0, || "sequence holds no notes".into())?;
    let cfg = vocab.config;
    for n in notes {
        check(n.position < measure, n.at, || {
            format!("beat {} outside a measure of {measure}", n.position)
        })?;
        let onset = n.measure * measure + n.position;
        // Restating the current chord or tempo is not a change.
        if let Some(c) = n.chord {
            if piece.chords.last().is_none_or(|&(_, prev)| prev != c) {
                piece.chords.push((onset, c));
            }
        }
        if let Some(t) = n.tempo {
            if piece.tempo_changes.last().is_none_or(|prev| prev.micros_per_quarter != t) {
                piece.tempo_changes.push(TempoChange {
                    tick: onset,
                    micros_per_quarter: t,
                });
            }
        }
        let instrument = if cfg.instrument {
            let class = n.instrument.checked_sub(2).filter(|&c| (c as usize) < instruments::NUM_CLASSES);
            let class = class.ok_or_else(|| Error::Decode {
                position: n.at,
                msg: format!("instrument index {}", n.instrument),
            })?;
            instruments::representative(class as usize)
        } else {
            Instrument::program(0)
        };
        let pitch = n.pitch.checked_sub(2).filter(|&p| p < 128).ok_or_else(|| Error::Decode {
            position: n.at,
            msg: format!("pitch index {}", n.pitch),
        })?;
        let duration = (n.duration as u64)
            .checked_sub(1)
            .filter(|&d| d >= 1 && d <= vocab.max_duration)
            .ok_or_else(|| Error::Decode {
                position: n.at,
                msg: format!("duration index {}", n.duration),
            })?;
        let velocity = if cfg.velocity {
            let bin = n
                .velocity
                .checked_sub(2)
                .filter(|&b| (b as usize) < VELOCITY_BINS)
                .ok_or_else(|| Error::Decode {
                    position: n.at,
                    msg: format!("velocity index {}", n.velocity),
                })?;
            velocity_representative(bin as usize)
        } else {
            DEFAULT_VELOCITY
        };
        piece.notes.push(NoteEvent {
            onset,
            pitch: pitch as u8,
            duration,
            velocity,
            instrument,
        });
    }
    piece.sort_notes();
    Ok(piece)
}

/// Checks the value class of a sub-token and returns a decode error naming
/// the token otherwise.
pub(crate) fn expect_value(vocab: &FeatureVocab, f: Feature, index: u32, at: usize) -> Result<()> {
    let active = vocab.config.is_active(f);
    let ok = if active {
        index >= f.first_value() && (index as usize) < vocab.size(f)
    } else {
        index == IGNORE
    };
    check(ok, at, || {
        format!("{} sub-token {index} is not a valid {}", f.name(), if active { "value" } else { "IGNORE" })
    })
}

/// Chord or tempo slot: a value, CONTINUE, or IGNORE when inactive.
pub(crate) fn change_value(vocab: &FeatureVocab, f: Feature, index: u32, at: usize, first: bool) -> Result<Option<u32>> {
    if !vocab.config.is_active(f) {
        expect_value(vocab, f, index, at)?;
        return Ok(None);
    }
    if index == CONTINUE {
        check(!first, at, || format!("first {} must carry a value", f.name()))?;
        return Ok(None);
    }
    expect_value(vocab, f, index, at)?;
    Ok(Some(index))
}

pub(crate) fn decoded_note(
    vocab: &FeatureVocab,
    measure: u64,
    position: u64,
    at: usize,
    chord: Option<u32>,
    tempo: Option<u32>,
    note: [u32; 4],
) -> Result<DecodedNote> {
    let [instrument, pitch, duration, velocity] = note;
    expect_value(vocab, Feature::Instrument, instrument, at)?;
    expect_value(vocab, Feature::Pitch, pitch, at)?;
    expect_value(vocab, Feature::Duration, duration, at)?;
    expect_value(vocab, Feature::Velocity, velocity, at)?;
    Ok(DecodedNote {
        measure,
        position,
        at,
        chord: chord.map(|c| vocab.chord_value(c).expect("checked chord")),
        tempo: tempo.map(|t| tempo_representative((t - 3) as usize)),
        instrument,
        pitch,
        duration,
        velocity,
    })
}
