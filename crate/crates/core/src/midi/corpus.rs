//! Corpus-level preprocessing: filtering, pitch augmentation, splits, manifest.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Instrument, ParsedMidi, Piece};
use crate::error::{Error, Result};

pub const MIN_PITCH_SHIFT: i32 = -5;
pub const MAX_PITCH_SHIFT: i32 = 6;

/// Thresholds for [`filter_corpus`]. `Default` accepts everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterCriteria {
    pub require_time_signature: bool,
    /// Drop files whose time-signature events disagree.
    pub single_time_signature: bool,
    pub max_tempo_changes: Option<usize>,
    /// Every tempo event must fall on a beat.
    pub beat_aligned_tempo: bool,
    pub min_notes: usize,
    pub max_notes: Option<usize>,
    pub min_instruments: usize,
}

impl FilterCriteria {
    /// What `ingest` applies unless told otherwise.
    pub fn ingest_defaults() -> Self {
        Self {
            require_time_signature: true,
            single_time_signature: true,
            max_tempo_changes: Some(8),
            beat_aligned_tempo: true,
            min_notes: 64,
            max_notes: Some(20_000),
            min_instruments: 1,
        }
    }

    /// Names of the criteria `m` fails, in a fixed order.
    pub fn failures(&self, m: &ParsedMidi) -> Vec<&'static str> {
        let p = &m.piece;
        let mut out = Vec::new();
        if self.require_time_signature && m.time_signatures.is_empty() {
            out.push("no_time_signature");
        }
        if self.single_time_signature && m.time_signatures.iter().any(|&(_, ts)| ts != p.time_signature) {
            out.push("time_signature_change");
        }
        if self.max_tempo_changes.is_some_and(|k| p.tempo_changes.len() > k) {
            out.push("too_many_tempo_changes");
        }
        if self.beat_aligned_tempo && p.tempo_changes.iter().any(|t| t.tick % p.resolution as u64 != 0) {
            out.push("unaligned_tempo");
        }
        if p.notes.len() < self.min_notes {
            out.push("too_few_notes");
        }
        if self.max_notes.is_some_and(|k| p.notes.len() > k) {
            out.push("too_many_notes");
        }
        if p.instruments().len() < self.min_instruments {
            out.push("too_few_instruments");
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    /// How many pieces failed each criterion; a piece can fail several.
    pub rejections: BTreeMap<String, usize>,
}

/// Keeps the pieces passing every criterion, in input order.
pub fn filter_corpus(pieces: Vec<ParsedMidi>, criteria: &FilterCriteria) -> (Vec<ParsedMidi>, FilterReport) {
    let mut report = FilterReport {
        input: pieces.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for m in pieces {
        let fails = criteria.failures(&m);
        if fails.is_empty() {
            kept.push(m);
        } else {
            for f in fails {
                *report.rejections.entry(f.to_string()).or_default() += 1;
            }
        }
    }
    report.kept = kept.len();
    (kept, report)
}

fn shift_pitch(pitch: u8, shift: i32) -> u8 {
    let mut p = pitch as i32 + shift;
    while p > 127 {
        p -= 12;
    }
    while p < 0 {
        p += 12;
    }
    p as u8
}

/// Transposes every pitched note by `shift` semitones and rotates chord roots
/// to match. Drums are untouched. Notes pushed outside 0..=127 move back by
/// octaves until they fit, so the note count never changes.
pub fn augment_pitch(piece: &Piece, shift: i32) -> Piece {
    let mut out = piece.clone();
    if shift == 0 {
        return out;
    }
    for n in &mut out.notes {
        if !n.instrument.is_drum {
            n.pitch = shift_pitch(n.pitch, shift);
        }
    }
    for (_, c) in &mut out.chords {
        if let Some(c) = c {
            c.root = (c.root as i32 + shift).rem_euclid(12) as u8;
        }
    }
    out.sort_notes();
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Seeded shuffle, then `⌊n/10⌋` pieces each to validation and test and the
/// rest to training.
pub fn split_corpus(ids: &[String], seed: u64) -> Result<CorpusSplit> {
    if ids.len() < 10 {
        return Err(Error::Config(format!(
            "need at least 10 pieces to split, got {}",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = ids.len() / 10;
    let test = order.split_off(order.len() - tenth);
    let valid = order.split_off(order.len() - tenth);
    Ok(CorpusSplit {
        train: order,
        valid,
        test,
        seed,
    })
}

/// One line of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    pub path: String,
    pub note_count: usize,
    pub instruments: Vec<Instrument>,
    pub time_signature: String,
}

impl ManifestEntry {
    pub fn new(piece: &Piece, path: impl Into<String>) -> Self {
        Self {
            source_id: piece.source_id.clone(),
            path: path.into(),
            note_count: piece.notes.len(),
            instruments: piece.instruments(),
            time_signature: piece.time_signature.to_string(),
        }
    }
}

/// JSON lines, one entry per piece.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
