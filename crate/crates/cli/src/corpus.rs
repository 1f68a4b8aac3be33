//! `ingest`, `vocab`, `encode` and `stats`, plus the on-disk corpus layout.
//!
//! An ingested corpus directory holds `pieces/<id>.json` (quantized pieces
//! with chord labels), `manifest.jsonl`, `split.json` and `filter.json`.

use std::path::{Path, PathBuf};

use nmt_core::encoding::{
    build_vocab, detect_chords, dump_tokens, encode, length_stats, FeatureConfig, FeatureVocab, Scheme, TokenSequence,
};
use nmt_core::midi::{
    filter_corpus, parse_midi, quantize, read_manifest, split_corpus, write_manifest, CorpusSplit, FilterCriteria,
    ManifestEntry, ParsedMidi, Piece,
};
use nmt_core::{Error, Result};
use serde_json::json;

use crate::manifest::RunManifest;

pub const MANIFEST: &str = "manifest.jsonl";
pub const SPLIT: &str = "split.json";
pub const VOCAB: &str = "vocab.json";
pub const SEQUENCES: &str = "sequences.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Valid,
    Test,
    All,
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// MIDI files under `dir`, in sorted path order.
fn midi_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Piece id from the path relative to the input root.
fn source_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("__")
}

pub struct IngestOptions {
    pub input: PathBuf,
    pub out: PathBuf,
    pub resolution: u32,
    pub criteria: FilterCriteria,
    pub seed: u64,
}

pub fn ingest(opts: &IngestOptions) -> Result<()> {
    if opts.resolution == 0 {
        return Err(Error::Config("--resolution must be positive".into()));
    }
    if !opts.input.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", opts.input.display())));
    }
    let files = midi_files(&opts.input)?;
    let mut parsed: Vec<ParsedMidi> = Vec::new();
    let mut unreadable = Vec::new();
    for path in &files {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        match parse_midi(&bytes) {
            Ok(mut m) => {
                m.piece.source_id = source_id(&opts.input, path);
                parsed.push(m);
            }
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                unreadable.push(path.display().to_string());
            }
        }
    }
    let (kept, report) = filter_corpus(parsed, &opts.criteria);
    let ids: Vec<String> = kept.iter().map(|m| m.piece.source_id.clone()).collect();
    let split = split_corpus(&ids, opts.seed)?;

    let pieces_dir = opts.out.join("pieces");
    create_dir(&pieces_dir)?;
    let mut entries = Vec::with_capacity(kept.len());
    for m in kept {
        let mut piece = quantize(&m.piece, opts.resolution)?;
        piece.chords = detect_chords(&piece);
        let rel = format!("pieces/{}.json", piece.source_id);
        write_json(&opts.out.join(&rel), &piece)?;
        entries.push(ManifestEntry::new(&piece, rel));
    }
    write_manifest(&opts.out.join(MANIFEST), &entries)?;
    write_json(&opts.out.join(SPLIT), &split)?;
    let filter = json!({ "files": files.len(), "unreadable": unreadable, "report": report });
    write_json(&opts.out.join("filter.json"), &filter)?;

    println!(
        "{} files, {} unreadable, {} kept ({} train / {} valid / {} test)",
        files.len(),
        unreadable.len(),
        entries.len(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    for (k, v) in &report.rejections {
        println!("  rejected {k}: {v}");
    }
    let mut manifest = RunManifest::new("ingest");
    manifest.seed = Some(opts.seed);
    manifest.inputs = vec![opts.input.clone()];
    manifest.outputs = vec![opts.out.clone()];
    manifest.summary = json!({ "resolution": opts.resolution, "criteria": opts.criteria, "filter": filter });
    manifest.write(&opts.out.join("run.json"))
}

/// Every piece of an ingested corpus, in manifest order.
pub fn load_pieces(dir: &Path) -> Result<Vec<Piece>> {
    let manifest = dir.join(MANIFEST);
    if !manifest.is_file() {
        return Err(Error::Data(format!("{} is not an ingested corpus (no {MANIFEST})", dir.display())));
    }
    read_manifest(&manifest)?
        .iter()
        .map(|e| read_json::<Piece>(&dir.join(&e.path)))
        .collect()
}

pub fn load_split(dir: &Path) -> Result<CorpusSplit> {
    read_json(&dir.join(SPLIT))
}

/// Pieces of one split, in manifest order.
pub fn split_pieces(dir: &Path, split: Split) -> Result<Vec<Piece>> {
    let pieces = load_pieces(dir)?;
    if split == Split::All {
        return Ok(pieces);
    }
    let s = load_split(dir)?;
    let ids = match split {
        Split::Train => &s.train,
        Split::Valid => &s.valid,
        Split::Test => &s.test,
        Split::All => unreachable!(),
    };
    Ok(pieces.into_iter().filter(|p| ids.contains(&p.source_id)).collect())
}

pub fn vocab(input: &Path, out: &Path, config: FeatureConfig) -> Result<()> {
    let pieces = load_pieces(input)?;
    let vocab = build_vocab(&pieces, config)?;
    vocab.save(out)?;
    let sizes: Vec<String> = Scheme::ALL
        .iter()
        .map(|&s| format!("{s} {:?}", vocab.scheme_sizes(s)))
        .collect();
    println!("vocabulary of {} pieces at resolution {}", pieces.len(), vocab.resolution);
    for s in &sizes {
        println!("  {s}");
    }
    let mut manifest = RunManifest::new("vocab");
    manifest.inputs = vec![input.to_path_buf()];
    manifest.outputs = vec![out.to_path_buf()];
    manifest.summary = json!({ "features": config, "sizes": sizes });
    manifest.write(&out.with_extension("run.json"))
}

pub fn encode_corpus(scheme: Scheme, vocab_path: &Path, input: &Path, out: &Path) -> Result<()> {
    let vocab = FeatureVocab::load(vocab_path)?;
    let pieces = load_pieces(input)?;
    let dumps = out.join("tokens");
    create_dir(&dumps)?;
    let mut lines = String::new();
    let mut lengths = Vec::with_capacity(pieces.len());
    let mut clamped = 0;
    for p in &pieces {
        let seq = encode(p, &vocab, scheme)?;
        clamped += seq.clamped;
        lengths.push(seq.len());
        lines.push_str(&serde_json::to_string(&seq)?);
        lines.push('\n');
        let path = dumps.join(format!("{}.txt", p.source_id));
        std::fs::write(&path, dump_tokens(&seq, &vocab)).map_err(|e| Error::io(&path, e))?;
    }
    let seq_path = out.join(SEQUENCES);
    std::fs::write(&seq_path, lines).map_err(|e| Error::io(&seq_path, e))?;
    if input.join(SPLIT).is_file() {
        write_json(&out.join(SPLIT), &load_split(input)?)?;
    }
    let stats = length_stats(&lengths);
    println!("{scheme}: {} pieces, length {stats}, {clamped} durations clamped", pieces.len());
    let mut manifest = RunManifest::new("encode");
    manifest.inputs = vec![input.to_path_buf(), vocab_path.to_path_buf()];
    manifest.outputs = vec![out.to_path_buf()];
    manifest.summary = json!({ "scheme": scheme, "lengths": stats, "clamped": clamped });
    manifest.write(&out.join("run.json"))
}

pub fn load_sequences(dir: &Path) -> Result<Vec<TokenSequence>> {
    let path = dir.join(SEQUENCES);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Length table. An encoded directory reports its own scheme; an ingested
/// corpus is encoded in all four schemes.
pub fn stats(input: &Path, vocab_path: Option<&Path>, json_out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    if input.join(SEQUENCES).is_file() {
        let seqs = load_sequences(input)?;
        let scheme = seqs.first().map(|s| s.scheme).ok_or_else(|| Error::Data("no sequences".into()))?;
        rows.push((scheme, length_stats(&seqs.iter().map(|s| s.len()).collect::<Vec<_>>())));
    } else {
        let pieces = load_pieces(input)?;
        let vocab = match vocab_path.map(Path::to_path_buf).or_else(|| Some(input.join(VOCAB)).filter(|p| p.is_file())) {
            Some(p) => FeatureVocab::load(&p)?,
            None => build_vocab(&pieces, FeatureConfig::default())?,
        };
        for scheme in Scheme::ALL {
            let lengths = pieces
                .iter()
                .map(|p| encode(p, &vocab, scheme).map(|s| s.len()))
                .collect::<Result<Vec<_>>>()?;
            rows.push((scheme, length_stats(&lengths)));
        }
    }
    println!("{:<8}{:>8}{:>18}{:>8}{:>8}", "scheme", "pieces", "length mean(±std)", "min", "max");
    for (scheme, s) in &rows {
        println!("{:<8}{:>8}{:>18}{:>8}{:>8}", scheme.name(), s.count, s.to_string(), s.min, s.max);
    }
    if let Some(path) = json_out {
        let map: serde_json::Map<String, serde_json::Value> = rows
            .iter()
            .map(|(s, st)| Ok((s.name().to_string(), serde_json::to_value(st)?)))
            .collect::<Result<_>>()?;
        write_json(path, &map)?;
    }
    Ok(())
}
