//! `nmt`: command-line front end for corpus preparation, training,
//! evaluation and generation.
//!
//! Exit codes: 0 success, 2 bad configuration or usage, 3 missing or bad
//! data, 4 runtime failure.

mod config;
mod corpus;
mod eval;
mod generate;
mod manifest;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nmt_core::encoding::{FeatureConfig, Scheme};
use nmt_core::midi::FilterCriteria;
use nmt_core::model::SubDecoderKind;
use nmt_core::synth::Dependency;
use nmt_core::{ErrorKind, Result};

#[derive(Parser)]
#[command(name = "nmt", version, about = "Symbolic music language modelling with nested sub-token decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter, quantize and split a directory of MIDI files.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid positions per quarter note.
        #[arg(long, default_value_t = 12)]
        resolution: u32,
        #[arg(long, default_value_t = 1)]
        min_instruments: usize,
        #[arg(long, default_value_t = 64)]
        min_notes: usize,
        #[arg(long, default_value_t = 20_000)]
        max_notes: usize,
        #[arg(long, default_value_t = 8)]
        max_tempo_changes: usize,
        /// Seed of the train/valid/test split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the feature vocabulary of an ingested corpus.
    Vocab {
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to <in>/vocab.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_instrument: bool,
        #[arg(long)]
        no_chord: bool,
        #[arg(long)]
        no_tempo: bool,
        #[arg(long)]
        no_velocity: bool,
    },
    /// Encode an ingested corpus and dump readable token listings.
    Encode {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequence-length statistics of an ingested or encoded corpus.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long)]
        subdecoder: Option<SubDecoderKind>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from <out>/last.ckpt if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Moving-window NLL of a checkpoint, comparable across encodings.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: corpus::Split,
        /// Window length in tokens; defaults to the model's max_len.
        #[arg(long)]
        window: Option<usize>,
        /// Defaults to half the window.
        #[arg(long)]
        stride: Option<usize>,
        /// Report path; defaults to <model>.eval.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample music, optionally continuing the first measures of a MIDI file.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Measures of the prompt to keep.
        #[arg(long, default_value_t = 4)]
        measures: u64,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_tokens: Option<usize>,
        /// Defaults to the run configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus with known dependencies and entropy.
    Synth {
        #[arg(long, default_value_t = 4)]
        features: usize,
        /// Values per feature: one size, or a comma-separated list.
        #[arg(long, value_delimiter = ',', default_value = "16")]
        vocab: Vec<usize>,
        /// independent, intra or inter.
        #[arg(long, default_value = "intra")]
        deps: Dependency,
        #[arg(long, default_value_t = 64)]
        length: usize,
        #[arg(long, default_value_t = 256)]
        sequences: usize,
        /// Noise level of the inter-token mode.
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            input,
            out,
            resolution,
            min_instruments,
            min_notes,
            max_notes,
            max_tempo_changes,
            seed,
        } => corpus::ingest(&corpus::IngestOptions {
            input,
            out,
            resolution,
            criteria: FilterCriteria {
                min_instruments,
                min_notes,
                max_notes: Some(max_notes),
                max_tempo_changes: Some(max_tempo_changes),
                ..FilterCriteria::ingest_defaults()
            },
            seed,
        }),
        Command::Vocab {
            input,
            out,
            no_instrument,
            no_chord,
            no_tempo,
            no_velocity,
        } => {
            let config = FeatureConfig {
                instrument: !no_instrument,
                chord: !no_chord,
                tempo: !no_tempo,
                velocity: !no_velocity,
            };
            let out = out.unwrap_or_else(|| input.join(corpus::VOCAB));
            corpus::vocab(&input, &out, config)
        }
        Command::Encode {
            scheme,
            vocab,
            input,
            out,
        } => corpus::encode_corpus(scheme, &vocab, &input, &out),
        Command::Stats { input, vocab, json } => corpus::stats(&input, vocab.as_deref(), json.as_deref()),
        Command::Train {
            config,
            scheme,
            subdecoder,
            steps,
            out,
            resume,
        } => train::run(&train::TrainOptions {
            config,
            scheme,
            subdecoder,
            steps,
            out,
            resume,
        }),
        Command::Eval {
            model,
            config,
            split,
            window,
            stride,
            out,
        } => eval::run(&eval::EvalOptionsCli {
            model,
            config,
            split,
            window,
            stride,
            out,
        }),
        Command::Generate {
            model,
            config,
            prompt,
            measures,
            top_p,
            temperature,
            max_tokens,
            seed,
            out,
        } => generate::run(&generate::GenerateOptions {
            model,
            config,
            prompt,
            measures,
            top_p,
            temperature,
            max_tokens,
            seed,
            out,
        }),
        Command::Synth {
            features,
            vocab,
            deps,
            length,
            sequences,
            epsilon,
            seed,
            out,
        } => synth::synth(&synth::SynthOptions {
            features,
            vocab,
            deps,
            length,
            sequences,
            epsilon,
            seed,
            out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Runtime => 4,
            })
        }
    }
}
