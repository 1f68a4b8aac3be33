//! `train`: fits a model described by a run configuration.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use nmt_core::encoding::Scheme;
use nmt_core::model::{Model, ModelConfig, SubDecoderKind};
use nmt_core::training::{train, RunFiles, TrainConfig, TrainData, TrainReport};
use nmt_core::{Error, Result};
use nmt_tensor::{DType, Scalar};
use serde_json::json;

use crate::config::{RunConfig, Source};
use crate::corpus::{create_dir, split_pieces, Split};
use crate::manifest::RunManifest;

/// File name of the resolved configuration inside a run directory.
pub const RUN_CONFIG: &str = "config.toml";

pub struct TrainOptions {
    pub config: PathBuf,
    pub scheme: Option<Scheme>,
    pub subdecoder: Option<SubDecoderKind>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
    pub resume: bool,
}

/// Everything a training run needs, resolved from the configuration.
struct Plan {
    model: ModelConfig,
    train: TrainConfig,
    data: TrainData,
    valid: TrainData,
}

fn plan(cfg: &RunConfig) -> Result<Plan> {
    let mut train = cfg.train_config();
    match cfg.source()? {
        Source::Corpus { dir, vocab } => {
            let scheme = cfg.data.scheme;
            let model = cfg.model.clone().with_scheme(&vocab, scheme);
            let data = TrainData::pieces(split_pieces(&dir, Split::Train)?, vocab.clone(), scheme)?;
            let valid = TrainData::pieces(split_pieces(&dir, Split::Valid)?, vocab, scheme)?;
            Ok(Plan {
                model,
                train,
                data,
                valid,
            })
        }
        Source::Synth { dir } => {
            let corpus = crate::synth::load(&dir)?;
            let sc = &corpus.config;
            let mut sequences = corpus.sequences.clone();
            // The last tenth (at least one sequence) validates.
            let n_valid = (sequences.len() / 10).max(1);
            if sequences.len() <= n_valid {
                return Err(Error::Data("synthetic corpus needs at least two sequences".into()));
            }
            let valid = sequences.split_off(sequences.len() - n_valid);
            train.segment_len.get_or_insert(sc.length.min(cfg.model.max_len));
            train.augment = false;
            let model = cfg.model_config(sc.model_sizes(), sc.feature_names());
            let width = sc.vocab.len();
            Ok(Plan {
                model,
                train,
                data: TrainData::Streams { width, sequences },
                valid: TrainData::Streams {
                    width,
                    sequences: valid,
                },
            })
        }
    }
}

fn fit<T: Scalar>(p: &Plan, seed: u64, files: &RunFiles, resume: bool) -> Result<(TrainReport, usize)> {
    let mut model = Model::<T>::new(p.model.clone(), seed)?;
    let params = model.num_params();
    eprintln!("{params} parameters, {} training sequences", p.data.len());
    let every = (p.train.steps / 20).max(1);
    let report = train(&mut model, &p.train, &p.data, Some(&p.valid), Some(files), resume, |row| {
        if row.split != "train" || row.step % every == 0 {
            eprintln!(
                "step {:>7} {:<5} nll {:.4} lr {:.3e}",
                row.step, row.split, row.mean_nll, row.lr
            );
        }
        ControlFlow::Continue(())
    })?;
    Ok((report, params))
}

pub fn run(opts: &TrainOptions) -> Result<()> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(s) = opts.scheme {
        cfg.data.scheme = s;
    }
    if let Some(k) = opts.subdecoder {
        cfg.model.subdecoder = k;
    }
    if let Some(n) = opts.steps {
        cfg.train.steps = n;
    }
    if let Some(out) = &opts.out {
        cfg.data.out = Some(std::path::absolute(out).unwrap_or_else(|_| out.clone()));
    }
    let out = cfg
        .data
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(format!("{}-{}", cfg.data.scheme, cfg.model.subdecoder)));
    cfg.data.out = Some(out.clone());
    let p = plan(&cfg)?;

    create_dir(&out)?;
    let cfg_path = out.join(RUN_CONFIG);
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let files = RunFiles::new(&out);
    let (report, params) = match cfg.precision {
        DType::F32 => fit::<f32>(&p, cfg.seed, &files, opts.resume)?,
        DType::F64 => fit::<f64>(&p, cfg.seed, &files, opts.resume)?,
    };
    println!(
        "final train nll {:.4}, best valid nll {}",
        report.final_train,
        report.best_valid.map_or("n/a".into(), |v| format!("{v:.4}"))
    );

    let mut manifest = RunManifest::new("train").with_config(&cfg);
    manifest.inputs = vec![opts.config.clone()];
    manifest.outputs = vec![cfg_path, files.last(), files.best(), files.curve()];
    manifest.summary = json!({
        "parameters": params,
        "final_train_nll": report.final_train,
        "best_valid_nll": report.best_valid,
        "rejected_steps": report.rejected_steps,
        "model_digest": p.model.digest(),
    });
    manifest.write(&out.join("run.json"))
}
