//! Per-feature vocabularies and the flat REMI vocabulary built from them.
//!
//! Every feature reserves index 0 for PAD and 1 for IGNORE. Chord and tempo
//! also reserve 2 for CONTINUE. Musical values follow.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::chords::{Chord, NUM_CHORDS};
use super::instruments::{self, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::midi::{Instrument, Piece};

pub const PAD: u32 = 0;
pub const IGNORE: u32 = 1;
pub const CONTINUE: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Metric,
    Type,
    Beat,
    Chord,
    Tempo,
    Instrument,
    Pitch,
    Duration,
    Velocity,
    /// The single flat feature of REMI.
    Remi,
}

impl Feature {
    pub fn name(self) -> &'static str {
        match self {
            Feature::Metric => "metric",
            Feature::Type => "type",
            Feature::Beat => "beat",
            Feature::Chord => "chord",
            Feature::Tempo => "tempo",
            Feature::Instrument => "instrument",
            Feature::Pitch => "pitch",
            Feature::Duration => "duration",
            Feature::Velocity => "velocity",
            Feature::Remi => "remi",
        }
    }

    fn has_continue(self) -> bool {
        matches!(self, Feature::Chord | Feature::Tempo)
    }

    /// First index carrying a musical value.
    pub fn first_value(self) -> u32 {
        if self.has_continue() {
            3
        } else {
            2
        }
    }
}

/// Values of the metric feature, relative to the previous note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    /// First note: new time signature, new measure, new position.
    Sss,
    /// Next measure, new position.
    Nss,
    /// Same measure, later position.
    Nns,
    /// Same position.
    Nnn,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Sss, Metric::Nss, Metric::Nns, Metric::Nnn];

    pub fn index(self) -> u32 {
        2 + self as u32
    }

    pub fn from_index(i: u32) -> Option<Self> {
        i.checked_sub(2).and_then(|k| Self::ALL.get(k as usize).copied())
    }

    pub fn starts_measure(self) -> bool {
        matches!(self, Metric::Sss | Metric::Nss)
    }
}

/// Values of the compound-word type feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CpType {
    Note,
    /// Metric token at a new position in the current measure.
    Metric,
    /// Metric token that also opens a new measure.
    Bar,
}

impl CpType {
    pub const ALL: [CpType; 3] = [CpType::Note, CpType::Metric, CpType::Bar];

    pub fn index(self) -> u32 {
        2 + self as u32
    }

    pub fn from_index(i: u32) -> Option<Self> {
        i.checked_sub(2).and_then(|k| Self::ALL.get(k as usize).copied())
    }
}

/// Which optional features a dataset uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub instrument: bool,
    pub chord: bool,
    pub tempo: bool,
    pub velocity: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            instrument: true,
            chord: true,
            tempo: true,
            velocity: true,
        }
    }
}

impl FeatureConfig {
    pub fn none() -> Self {
        Self {
            instrument: false,
            chord: false,
            tempo: false,
            velocity: false,
        }
    }

    pub fn is_active(&self, f: Feature) -> bool {
        match f {
            Feature::Instrument => self.instrument,
            Feature::Chord => self.chord,
            Feature::Tempo => self.tempo,
            Feature::Velocity => self.velocity,
            _ => true,
        }
    }
}

pub const TEMPO_BINS: usize = 24;
pub const TEMPO_MIN_BPM: f64 = 30.0;
pub const TEMPO_MAX_BPM: f64 = 240.0;
pub const VELOCITY_BINS: usize = 32;
/// Velocity given to notes when the velocity feature is off.
pub const DEFAULT_VELOCITY: u8 = 64;
/// Tempo assumed before the first tempo event (the MIDI default).
pub const DEFAULT_TEMPO_MICROS: u32 = 500_000;

/// Edges of the geometric tempo bins in BPM, `TEMPO_BINS + 1` values.
pub fn tempo_edges() -> Vec<f64> {
    let ratio = TEMPO_MAX_BPM / TEMPO_MIN_BPM;
    (0..=TEMPO_BINS)
        .map(|k| TEMPO_MIN_BPM * ratio.powf(k as f64 / TEMPO_BINS as f64))
        .collect()
}

pub fn tempo_bin(micros_per_quarter: u32) -> usize {
    let bpm = 60_000_000.0 / micros_per_quarter.max(1) as f64;
    let pos = (bpm / TEMPO_MIN_BPM).ln() / (TEMPO_MAX_BPM / TEMPO_MIN_BPM).ln() * TEMPO_BINS as f64;
    (pos.floor().max(0.0) as usize).min(TEMPO_BINS - 1)
}

/// Geometric bin center, stored as microseconds per quarter note.
pub fn tempo_representative(bin: usize) -> u32 {
    let ratio = TEMPO_MAX_BPM / TEMPO_MIN_BPM;
    let bpm = TEMPO_MIN_BPM * ratio.powf((bin as f64 + 0.5) / TEMPO_BINS as f64);
    (60_000_000.0 / bpm).round() as u32
}

pub fn velocity_bin(velocity: u8) -> usize {
    let v = velocity.clamp(1, 127) as usize;
    (v - 1) * VELOCITY_BINS / 127
}

/// Middle member of the bin.
pub fn velocity_representative(bin: usize) -> u8 {
    let members: Vec<u8> = (1..=127u8).filter(|&v| velocity_bin(v) == bin).collect();
    members[members.len() / 2]
}

/// Vocabulary of every feature for one corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVocab {
    /// Grid units per beat shared by the corpus.
    pub resolution: u32,
    /// Beat positions: the longest measure of the corpus in grid units.
    pub positions: u64,
    /// Largest representable duration; longer notes are clamped.
    pub max_duration: u64,
    pub config: FeatureConfig,
}

impl FeatureVocab {
    pub fn new(resolution: u32, positions: u64, config: FeatureConfig) -> Self {
        Self {
            resolution,
            positions,
            max_duration: 4 * positions,
            config,
        }
    }

    /// Number of indices, specials included. Inactive optional features keep
    /// only PAD and IGNORE.
    pub fn size(&self, f: Feature) -> usize {
        if !self.config.is_active(f) {
            return 2;
        }
        let values = match f {
            Feature::Metric => 4,
            Feature::Type => 3,
            Feature::Beat => self.positions as usize,
            Feature::Chord => 1 + NUM_CHORDS,
            Feature::Tempo => TEMPO_BINS,
            Feature::Instrument => NUM_CLASSES,
            Feature::Pitch => 128,
            Feature::Duration => self.max_duration as usize,
            Feature::Velocity => VELOCITY_BINS,
            Feature::Remi => return self.remi_size(),
        };
        f.first_value() as usize + values
    }

    pub fn beat_index(&self, position: u64) -> u32 {
        2 + position as u32
    }

    pub fn chord_index(&self, chord: Option<Chord>) -> u32 {
        match chord {
            None => 3,
            Some(c) => 4 + c.index() as u32,
        }
    }

    pub fn chord_value(&self, index: u32) -> Option<Option<Chord>> {
        match index {
            3 => Some(None),
            i if i >= 4 && ((i - 4) as usize) < NUM_CHORDS => Some(Some(Chord::from_index((i - 4) as usize))),
            _ => None,
        }
    }

    pub fn tempo_index(&self, micros_per_quarter: u32) -> u32 {
        3 + tempo_bin(micros_per_quarter) as u32
    }

    pub fn instrument_index(&self, inst: Instrument) -> u32 {
        2 + instruments::class_of(inst) as u32
    }

    pub fn pitch_index(&self, pitch: u8) -> u32 {
        2 + pitch as u32
    }

    /// Index of a duration, clamped into `1..=max_duration`.
    pub fn duration_index(&self, duration: u64) -> u32 {
        1 + duration.clamp(1, self.max_duration) as u32
    }

    pub fn velocity_index(&self, velocity: u8) -> u32 {
        2 + velocity_bin(velocity) as u32
    }

    /// Human-readable name of an index.
    pub fn name(&self, f: Feature, index: u32) -> String {
        match index {
            PAD => return "<pad>".into(),
            IGNORE => return "<ignore>".into(),
            CONTINUE if f.has_continue() => return "<continue>".into(),
            _ => {}
        }
        let v = index - f.first_value();
        match f {
            Feature::Metric => ["SSS", "NSS", "NNS", "NNN"][v as usize].into(),
            Feature::Type => ["note", "metric", "bar"][v as usize].into(),
            Feature::Beat | Feature::Pitch => v.to_string(),
            Feature::Duration => (v + 1).to_string(),
            Feature::Chord => match self.chord_value(index).flatten() {
                None => "N".into(),
                Some(c) => c.name(),
            },
            Feature::Tempo => {
                format!("{:.1}bpm", 60_000_000.0 / tempo_representative(v as usize) as f64)
            }
            Feature::Instrument => instruments::class_name(v as usize),
            Feature::Velocity => velocity_representative(v as usize).to_string(),
            Feature::Remi => self.remi_name(index),
        }
    }

    /// Ordered names of every index of `f`.
    pub fn names(&self, f: Feature) -> Vec<String> {
        (0..self.size(f) as u32).map(|i| self.name(f, i)).collect()
    }

    /// Flat REMI layout: PAD, IGNORE, Bar, then each active feature's musical
    /// values in the order beat, chord, tempo, instrument, pitch, duration,
    /// velocity.
    fn remi_blocks(&self) -> Vec<(Feature, u32, u32)> {
        let mut blocks = Vec::new();
        let mut next = 3u32;
        for f in [
            Feature::Beat,
            Feature::Chord,
            Feature::Tempo,
            Feature::Instrument,
            Feature::Pitch,
            Feature::Duration,
            Feature::Velocity,
        ] {
            if !self.config.is_active(f) {
                continue;
            }
            let n = self.size(f) as u32 - f.first_value();
            blocks.push((f, next, n));
            next += n;
        }
        blocks
    }

    pub const REMI_BAR: u32 = 2;

    pub fn remi_size(&self) -> usize {
        self.remi_blocks()
            .last()
            .map(|&(_, start, n)| (start + n) as usize)
            .unwrap_or(3)
    }

    /// REMI token for a compound sub-token value, `None` for specials.
    /// Metric values that open a measure map to Bar.
    pub fn remi_id(&self, f: Feature, index: u32) -> Option<u32> {
        if f == Feature::Metric {
            return Metric::from_index(index)
                .filter(|m| m.starts_measure())
                .map(|_| Self::REMI_BAR);
        }
        if f == Feature::Type {
            return (CpType::from_index(index) == Some(CpType::Bar)).then_some(Self::REMI_BAR);
        }
        if index < f.first_value() {
            return None;
        }
        self.remi_blocks()
            .into_iter()
            .find(|&(bf, _, _)| bf == f)
            .filter(|&(_, _, n)| index - f.first_value() < n)
            .map(|(_, start, _)| start + index - f.first_value())
    }

    /// Inverse of [`remi_id`](Self::remi_id) for value tokens: the feature and
    /// its compound index. Bar maps to `(Metric, NSS)`.
    pub fn remi_feature(&self, id: u32) -> Option<(Feature, u32)> {
        if id == Self::REMI_BAR {
            return Some((Feature::Metric, Metric::Nss.index()));
        }
        self.remi_blocks()
            .into_iter()
            .find(|&(_, start, n)| id >= start && id < start + n)
            .map(|(f, start, _)| (f, id - start + f.first_value()))
    }

    pub fn remi_name(&self, id: u32) -> String {
        match id {
            PAD => "<pad>".into(),
            IGNORE => "<ignore>".into(),
            Self::REMI_BAR => "Bar".into(),
            _ => match self.remi_feature(id) {
                Some((f, i)) => format!("{}_{}", f.name(), self.name(f, i)),
                None => format!("<invalid {id}>"),
            },
        }
    }

    pub fn to_file(&self) -> VocabFile {
        let mut features = BTreeMap::new();
        for f in [
            Feature::Metric,
            Feature::Type,
            Feature::Beat,
            Feature::Chord,
            Feature::Tempo,
            Feature::Instrument,
            Feature::Pitch,
            Feature::Duration,
            Feature::Velocity,
        ] {
            features.insert(f.name().to_string(), self.names(f));
        }
        VocabFile {
            resolution: self.resolution,
            features,
        }
    }

    /// Rebuilds the vocabulary from its file form and checks that every list
    /// matches what these parameters generate.
    pub fn from_file(file: &VocabFile) -> Result<Self> {
        let get = |name: &str| {
            file.features
                .get(name)
                .ok_or_else(|| Error::Data(format!("vocabulary file lacks feature {name}")))
        };
        let beat = get("beat")?;
        let active = |name: &str| -> Result<bool> { Ok(get(name)?.len() > 2) };
        let config = FeatureConfig {
            instrument: active("instrument")?,
            chord: active("chord")?,
            tempo: active("tempo")?,
            velocity: active("velocity")?,
        };
        if beat.len() < 3 {
            return Err(Error::Data("beat vocabulary is empty".into()));
        }
        let mut v = FeatureVocab::new(file.resolution, beat.len() as u64 - 2, config);
        v.max_duration = get("duration")?.len().saturating_sub(2) as u64;
        if v.to_file() != *file {
            return Err(Error::Data(
                "vocabulary file does not match the generated value lists".into(),
            ));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(&serde_json::from_str(&text)?)
    }
}

/// On-disk vocabulary: feature name → ordered value names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabFile {
    pub resolution: u32,
    pub features: BTreeMap<String, Vec<String>>,
}

/// Vocabulary covering every piece of a quantized corpus.
pub fn build_vocab(corpus: &[Piece], config: FeatureConfig) -> Result<FeatureVocab> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::Data("cannot build a vocabulary from an empty corpus".into()))?;
    let resolution = first.resolution;
    let mut positions = 0;
    for p in corpus {
        if p.resolution != resolution {
            return Err(Error::Data(format!(
                "mixed resolutions in corpus: {} and {} ({})",
                resolution, p.resolution, p.source_id
            )));
        }
        let m = p.measure_len().ok_or_else(|| {
            Error::Data(format!(
                "{}: time signature {} does not fit a grid of {} per beat",
                p.source_id, p.time_signature, p.resolution
            ))
        })?;
        positions = positions.max(m);
    }
    Ok(FeatureVocab::new(resolution, positions, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remi_ids_are_a_bijection_on_values() {
        let v = FeatureVocab::new(4, 16, FeatureConfig::default());
        let mut seen = vec![false; v.remi_size()];
        seen[0] = true;
        seen[1] = true;
        seen[2] = true;
        for f in [
            Feature::Beat,
            Feature::Chord,
            Feature::Tempo,
            Feature::Instrument,
            Feature::Pitch,
            Feature::Duration,
            Feature::Velocity,
        ] {
            for i in f.first_value()..v.size(f) as u32 {
                let id = v.remi_id(f, i).unwrap() as usize;
                assert!(!seen[id]);
                seen[id] = true;
                assert_eq!(v.remi_feature(id as u32), Some((f, i)));
            }
            assert_eq!(v.remi_id(f, IGNORE), None);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn tempo_representatives_stay_in_their_bins() {
        for k in 0..TEMPO_BINS {
            assert_eq!(tempo_bin(tempo_representative(k)), k);
        }
        assert_eq!(tempo_bin(60_000_000 / 10), 0);
        assert_eq!(tempo_bin(60_000_000 / 1000), TEMPO_BINS - 1);
    }

    #[test]
    fn velocity_bins_cover_the_range() {
        assert_eq!(velocity_bin(1), 0);
        assert_eq!(velocity_bin(127), VELOCITY_BINS - 1);
        for k in 0..VELOCITY_BINS {
            assert_eq!(velocity_bin(velocity_representative(k)), k);
        }
    }

    #[test]
    fn inactive_features_keep_only_specials() {
        let v = FeatureVocab::new(4, 16, FeatureConfig::none());
        assert_eq!(v.size(Feature::Velocity), 2);
        assert_eq!(v.size(Feature::Beat), 18);
        assert_eq!(v.remi_size(), 3 + 16 + 128 + 64);
    }
}
