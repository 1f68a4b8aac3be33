use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nmt_core::midi::{write_midi, Instrument, NoteEvent, Piece, TempoChange, TimeSignature};

fn nmt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A 12-measure two-voice piece on an eighth-note grid; `k` varies the
/// melody.
fn piece(k: u64) -> Piece {
    let mut p = Piece::new(480, TimeSignature::COMMON, format!("p{k}"));
    p.tempo_changes.push(TempoChange::from_bpm(0, 100.0 + k as f64));
    for i in 0..96u64 {
        p.notes.push(NoteEvent {
            onset: i * 240,
            pitch: 60 + ((i * (k + 3) + k) % 12) as u8,
            duration: 240,
            velocity: 64 + (i % 4) as u8 * 8,
            instrument: Instrument::program(0),
        });
        if i % 4 == 0 {
            p.notes.push(NoteEvent {
                onset: i * 240,
                pitch: 36 + (k % 5) as u8,
                duration: 960,
                velocity: 80,
                instrument: Instrument::program(33),
            });
        }
    }
    p.sort_notes();
    p
}

fn write_corpus(dir: &Path) {
    std::fs::create_dir_all(dir.join("sub")).unwrap();
    for k in 0..12 {
        let path = if k % 3 == 0 {
            dir.join("sub").join(format!("p{k}.mid"))
        } else {
            dir.join(format!("p{k}.mid"))
        };
        std::fs::write(path, write_midi(&piece(k)).unwrap()).unwrap();
    }
    std::fs::write(dir.join("broken.mid"), b"not a midi file").unwrap();
}

fn read_json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn missing_checkpoint_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nmt(&["eval", "--model", "nowhere/best.ckpt"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("missing checkpoint: nowhere/best.ckpt"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let text = include_str!("../../../configs/example.toml").replace("weight_decay", "weight_decy");
    std::fs::write(tmp.path().join("bad.toml"), text).unwrap();
    let out = nmt(&["train", "--config", "bad.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("weight_decy"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nmt(&["encode", "--scheme", "midi-like", "--vocab", "v", "--in", "a", "--out", "b"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_corpus_and_entropy() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&nmt(
        &["synth", "--features", "2", "--vocab", "4", "--deps", "independent", "--length", "5", "--sequences", "7", "--out", "s"],
        tmp.path(),
    ));
    // Two independent uniform features over four values.
    let expected = 4f64.ln();
    assert!(stdout.contains(&format!("{expected:.6}")), "{stdout}");
    let corpus = read_json(tmp.path().join("s/corpus.json"));
    assert_eq!(corpus["sequences"].as_array().unwrap().len(), 7);
    assert_eq!(corpus["sequences"][0].as_array().unwrap().len(), 10);
    assert_eq!(read_json(tmp.path().join("s/run.json"))["command"], "synth");
}

#[test]
fn corpus_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_corpus(&root.join("midi"));

    let stdout = ok(&nmt(&["ingest", "--in", "midi", "--out", "corpus", "--seed", "5"], root));
    assert!(stdout.contains("13 files, 1 unreadable, 12 kept"), "{stdout}");
    let split = read_json(root.join("corpus/split.json"));
    let total: usize = ["train", "valid", "test"].iter().map(|s| split[s].as_array().unwrap().len()).sum();
    assert_eq!(total, 12);
    assert!(root.join("corpus/pieces/sub__p0.json").is_file());

    ok(&nmt(&["vocab", "--in", "corpus"], root));
    assert!(root.join("corpus/vocab.json").is_file());

    let stdout = ok(&nmt(&["encode", "--scheme", "nb-pf", "--vocab", "corpus/vocab.json", "--in", "corpus", "--out", "enc"], root));
    assert!(stdout.starts_with("nb-pf: 12 pieces"), "{stdout}");
    assert_eq!(std::fs::read_dir(root.join("enc/tokens")).unwrap().count(), 12);

    let stdout = ok(&nmt(&["stats", "--in", "corpus", "--json", "stats.json"], root));
    for scheme in ["remi", "cp", "nb-mf", "nb-pf"] {
        assert!(stdout.contains(scheme), "{stdout}");
    }
    let stats = read_json(root.join("stats.json"));
    let mean = |s: &str| stats[s]["mean"].as_f64().unwrap();
    assert!(mean("nb-mf") < mean("cp") && mean("cp") < mean("remi"));

    let config = r#"
seed = 3
[data]
corpus = "corpus"
scheme = "nb-pf"
out = "run"
[model]
dim = 16
heads = 2
main_layers = 1
window = 4
max_len = 256
[train]
steps = 4
batch_size = 2
warmup_steps = 1
lr_max = 1e-3
segment_len = 32
validate_every = 2
[sample]
max_tokens = 40
"#;
    std::fs::write(root.join("run.toml"), config).unwrap();
    ok(&nmt(&["train", "--config", "run.toml"], root));
    for f in ["last.ckpt", "best.ckpt", "loss.csv", "config.toml", "run.json"] {
        assert!(root.join("run").join(f).is_file(), "{f}");
    }
    let manifest = read_json(root.join("run/run.json"));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);

    // Resuming a finished run keeps its step count.
    ok(&nmt(&["train", "--config", "run.toml", "--resume"], root));

    let stdout = ok(&nmt(&["eval", "--model", "run/best.ckpt", "--split", "all", "--window", "64", "--stride", "32"], root));
    assert!(stdout.contains("nb-pf 12 pieces"), "{stdout}");
    let report = read_json(root.join("run/best.eval.json"));
    assert!(report["mean_nll"].as_f64().unwrap().is_finite());
    assert!(root.join("run/best.eval.csv").is_file());

    let prompt = root.join("midi/p1.mid");
    let args = ["generate", "--model", "run/last.ckpt", "--prompt", prompt.to_str().unwrap(), "--measures", "1", "--seed", "9", "--out", "gen.mid"];
    ok(&nmt(&args, root));
    let first = std::fs::read(root.join("gen.mid")).unwrap();
    let parsed = nmt_core::midi::parse_midi(&first).unwrap();
    assert!(!parsed.piece.notes.is_empty());
    assert!(root.join("gen.tokens.txt").is_file());
    assert_eq!(read_json(root.join("gen.run.json"))["seed"], 9);
    // Same seed, same output.
    ok(&nmt(&args, root));
    assert_eq!(std::fs::read(root.join("gen.mid")).unwrap(), first);

    ok(&nmt(&["generate", "--model", "run/last.ckpt", "--temperature", "0", "--out", "free.mid"], root));
    assert!(root.join("free.mid").is_file());
}
