//! `eval`: moving-window NLL of a checkpoint on one corpus split.

use std::path::{Path, PathBuf};

use nmt_core::encoding::encode;
use nmt_core::evaluation::{evaluate_corpus, EvalOptions};
use nmt_core::model::Model;
use nmt_core::training::{validation_loss, TrainData};
use nmt_core::{Error, Result};
use nmt_tensor::checkpoint::read_header;
use nmt_tensor::{DType, Scalar};
use serde_json::{json, Value};

use crate::config::{RunConfig, Source};
use crate::corpus::{split_pieces, Split};
use crate::manifest::RunManifest;
use crate::train::RUN_CONFIG;

pub struct EvalOptionsCli {
    pub model: PathBuf,
    pub config: Option<PathBuf>,
    pub split: Split,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Precision a checkpoint was saved in.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_header(&bytes)?.0.dtype)
}

/// The run configuration next to a checkpoint, unless one is given.
pub fn run_config(model: &Path, config: Option<&Path>) -> Result<RunConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => model.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG),
    };
    if !path.is_file() {
        return Err(Error::Config(format!(
            "no run configuration at {} (pass --config)",
            path.display()
        )));
    }
    RunConfig::load(&path)
}

/// The report as JSON, plus its CSV form for corpus runs.
fn score<T: Scalar>(opts: &EvalOptionsCli, cfg: &RunConfig) -> Result<(Value, Option<String>)> {
    let (model, _) = Model::<T>::load(&opts.model)?;
    match cfg.source()? {
        Source::Corpus { dir, vocab } => {
            let scheme = cfg.data.scheme;
            let sequences = split_pieces(&dir, opts.split)?
                .iter()
                .map(|p| encode(p, &vocab, scheme))
                .collect::<Result<Vec<_>>>()?;
            let window = opts.window.unwrap_or(model.config.max_len);
            let report = evaluate_corpus(
                &model,
                &sequences,
                &vocab,
                EvalOptions {
                    window,
                    stride: opts.stride,
                },
            )?;
            println!(
                "{scheme} {} pieces: mean nll {:.4}, feature mean {:.4}",
                report.pieces, report.mean_nll, report.feature_mean_nll
            );
            for f in &report.features {
                println!("  {:<12}{:>10.4}{:>10}", f.feature, f.mean_nll, f.count);
            }
            Ok((serde_json::to_value(&report)?, Some(report.to_csv())))
        }
        Source::Synth { dir } => {
            let corpus = crate::synth::load(&dir)?;
            let n_valid = (corpus.sequences.len() / 10).max(1);
            let held_out = corpus.sequences[corpus.sequences.len() - n_valid..].to_vec();
            let data = TrainData::Streams {
                width: corpus.config.vocab.len(),
                sequences: held_out,
            };
            let stats = validation_loss(&model, &data, corpus.config.length.min(model.config.max_len))?;
            println!("held-out nll {:.4} (entropy {:.4})", stats.mean(), corpus.entropy.mean);
            let report = json!({
                "mean_nll": stats.mean(),
                "per_feature": stats.per_feature(),
                "entropy": corpus.entropy.per_feature,
            });
            Ok((report, None))
        }
    }
}

pub fn run(opts: &EvalOptionsCli) -> Result<()> {
    let dtype = checkpoint_dtype(&opts.model)?;
    let cfg = run_config(&opts.model, opts.config.as_deref())?;
    let (report, csv) = match dtype {
        DType::F32 => score::<f32>(opts, &cfg)?,
        DType::F64 => score::<f64>(opts, &cfg)?,
    };
    let out = opts.out.clone().unwrap_or_else(|| opts.model.with_extension("eval.json"));
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&out, text + "\n").map_err(|e| Error::io(&out, e))?;
    let mut manifest = RunManifest::new("eval").with_config(&cfg);
    manifest.inputs = vec![opts.model.clone()];
    manifest.outputs = vec![out.clone()];
    if let Some(csv) = csv {
        let path = out.with_extension("csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        manifest.outputs.push(path);
    }
    manifest.summary = report;
    manifest.write(&out.with_extension("run.json"))
}
