//! `synth`: synthetic corpora with known dependencies and exact entropies.

use std::path::{Path, PathBuf};

use nmt_core::synth::{synth_corpus, Dependency, SynthConfig, SynthCorpus};
use nmt_core::{Error, Result};
use serde_json::json;

use crate::corpus::create_dir;
use crate::manifest::RunManifest;

pub const CORPUS_FILE: &str = "corpus.json";

pub struct SynthOptions {
    pub features: usize,
    /// One size for every feature, or one per feature.
    pub vocab: Vec<usize>,
    pub deps: Dependency,
    pub length: usize,
    pub sequences: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn synth(opts: &SynthOptions) -> Result<()> {
    let vocab = match opts.vocab.as_slice() {
        [v] => vec![*v; opts.features],
        v if v.len() == opts.features => v.to_vec(),
        v => {
            return Err(Error::Config(format!(
                "--vocab lists {} sizes for {} features",
                v.len(),
                opts.features
            )))
        }
    };
    let cfg = SynthConfig {
        vocab,
        deps: opts.deps,
        length: opts.length,
        sequences: opts.sequences,
        epsilon: opts.epsilon,
        seed: opts.seed,
    };
    cfg.validate()?;
    let corpus = synth_corpus(&cfg)?;
    create_dir(&opts.out)?;
    let path = opts.out.join(CORPUS_FILE);
    let text = serde_json::to_string(&corpus)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let entropy_path = opts.out.join("entropy.json");
    let text = serde_json::to_string_pretty(&corpus.entropy)?;
    std::fs::write(&entropy_path, text + "\n").map_err(|e| Error::io(&entropy_path, e))?;

    let h = &corpus.entropy;
    println!("{} sequences of {} tokens, {} features", cfg.sequences, cfg.length, cfg.vocab.len());
    println!("entropy per sub-token {:.6} nats", h.mean);
    for (j, e) in h.per_feature.iter().enumerate() {
        println!("  f{j} {:.6}", e + 0.0);
    }
    let mut manifest = RunManifest::new("synth");
    manifest.seed = Some(opts.seed);
    manifest.outputs = vec![path, entropy_path];
    manifest.summary = json!({ "config": cfg, "entropy": h });
    manifest.write(&opts.out.join("run.json"))
}

pub fn load(dir: &Path) -> Result<SynthCorpus> {
    let path = dir.join(CORPUS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
