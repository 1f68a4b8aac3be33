//! `generate`: samples a continuation (or a fresh piece) and writes MIDI.

use std::path::PathBuf;

use nmt_core::encoding::{annotate_chords, dump_tokens};
use nmt_core::generation::{extract_prompt, generate, Generated, SamplerConfig};
use nmt_core::midi::{parse_midi, quantize, write_midi, TimeSignature};
use nmt_core::model::Model;
use nmt_core::{Error, Result};
use nmt_tensor::{DType, Scalar};
use serde_json::json;

use crate::config::Source;
use crate::eval::{checkpoint_dtype, run_config};
use crate::manifest::RunManifest;

pub struct GenerateOptions {
    pub model: PathBuf,
    pub config: Option<PathBuf>,
    pub prompt: Option<PathBuf>,
    pub measures: u64,
    pub top_p: Option<f64>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn sample<T: Scalar>(
    opts: &GenerateOptions,
    vocab: &nmt_core::encoding::FeatureVocab,
    scheme: nmt_core::encoding::Scheme,
    sampler: &SamplerConfig,
) -> Result<(Generated, usize)> {
    let (model, _) = Model::<T>::load(&opts.model)?;
    let (prompt, ts, notes) = match &opts.prompt {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let parsed = parse_midi(&bytes)?;
            let mut piece = quantize(&parsed.piece, vocab.resolution)?;
            annotate_chords(&mut piece, vocab);
            let p = extract_prompt(&piece, vocab, scheme, opts.measures)?;
            (p.sub_tokens(), piece.time_signature, p.notes)
        }
        None => (Vec::new(), TimeSignature::COMMON, 0),
    };
    let out = generate(&model, vocab, scheme, ts, &prompt, sampler)?;
    Ok((out, notes))
}

pub fn run(opts: &GenerateOptions) -> Result<()> {
    let dtype = checkpoint_dtype(&opts.model)?;
    let cfg = run_config(&opts.model, opts.config.as_deref())?;
    let vocab = match cfg.source()? {
        Source::Corpus { vocab, .. } => vocab,
        Source::Synth { .. } => {
            return Err(Error::Config("generate needs a model trained on a MIDI corpus".into()));
        }
    };
    let scheme = cfg.data.scheme;
    let mut sampler = SamplerConfig {
        seed: opts.seed.unwrap_or(cfg.seed),
        ..cfg.sample.clone()
    };
    if let Some(p) = opts.top_p {
        sampler.top_p = p;
    }
    if let Some(t) = opts.temperature {
        sampler.temperature = t;
    }
    if let Some(n) = opts.max_tokens {
        sampler.max_tokens = n;
    }
    sampler.validate()?;
    let (out, prompt_notes) = match dtype {
        DType::F32 => sample::<f32>(opts, &vocab, scheme, &sampler)?,
        DType::F64 => sample::<f64>(opts, &vocab, scheme, &sampler)?,
    };

    let midi = write_midi(&out.piece)?;
    std::fs::write(&opts.out, midi).map_err(|e| Error::io(&opts.out, e))?;
    let tokens_path = opts.out.with_extension("tokens.txt");
    std::fs::write(&tokens_path, dump_tokens(&out.sequence, &vocab)).map_err(|e| Error::io(&tokens_path, e))?;
    println!(
        "{} tokens ({} from the prompt), {} notes -> {}",
        out.sequence.len(),
        out.prompt_len,
        out.piece.notes.len(),
        opts.out.display()
    );

    let mut manifest = RunManifest::new("generate").with_config(&cfg);
    manifest.seed = Some(sampler.seed);
    manifest.inputs = std::iter::once(opts.model.clone()).chain(opts.prompt.clone()).collect();
    manifest.outputs = vec![opts.out.clone(), tokens_path];
    manifest.summary = json!({
        "sampler": sampler,
        "scheme": scheme,
        "tokens": out.sequence.len(),
        "prompt_tokens": out.prompt_len,
        "prompt_notes": prompt_notes,
        "notes": out.piece.notes.len(),
    });
    manifest.write(&opts.out.with_extension("run.json"))
}
