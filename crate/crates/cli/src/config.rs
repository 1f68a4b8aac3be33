//! Run configuration: one TOML file holding every setting of a training or
//! sampling run. See `configs/example.toml` for the documented key set.

use std::path::{Path, PathBuf};

use nmt_core::encoding::{FeatureConfig, FeatureVocab, Scheme};
use nmt_core::generation::SamplerConfig;
use nmt_core::model::ModelConfig;
use nmt_core::training::TrainConfig;
use nmt_core::{Error, Result};
use nmt_tensor::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives weight initialization, batching, augmentation, dropout and
    /// sampling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: DType,
    pub data: DataConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SamplerConfig,
}

fn default_precision() -> DType {
    DType::F32
}

fn default_scheme() -> Scheme {
    Scheme::NbPf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Output directory of `nmt ingest`.
    pub corpus: Option<PathBuf>,
    /// Vocabulary file from `nmt vocab`; defaults to `<corpus>/vocab.json`.
    pub vocab: Option<PathBuf>,
    /// Output directory of `nmt synth`, used instead of a MIDI corpus.
    pub synth: Option<PathBuf>,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Run directory for `nmt train`.
    pub out: Option<PathBuf>,
}

/// Where the training sequences come from.
pub enum Source {
    Corpus { dir: PathBuf, vocab: FeatureVocab },
    Synth { dir: PathBuf },
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        let joined = base.join(&*p);
        *p = std::path::absolute(&joined).unwrap_or(joined);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {}", e.message().trim_end())))
    }

    /// Reads `path`, resolving relative data paths against its directory and
    /// making them absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.corpus, &mut cfg.data.vocab, &mut cfg.data.synth, &mut cfg.data.out] {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the JSON form of the resolved configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        format!("{:x}", Sha256::digest(json))
    }

    /// Checks everything that does not need the data on disk.
    pub fn validate(&self) -> Result<()> {
        if self.train.seed != 0 {
            return Err(Error::Config("train.seed: use the top-level `seed` key".into()));
        }
        if self.sample.seed != 0 {
            return Err(Error::Config("sample.seed: use the top-level `seed` key".into()));
        }
        if !self.model.vocab_sizes.is_empty() || !self.model.feature_names.is_empty() {
            return Err(Error::Config(
                "model.vocab_sizes / model.feature_names: derived from the vocabulary, do not set them".into(),
            ));
        }
        match (&self.data.corpus, &self.data.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("data.corpus and data.synth: set only one".into()));
            }
            (None, None) => return Err(Error::Config("data.corpus: no corpus (or data.synth) given".into())),
            _ => {}
        }
        let mut train = self.train.clone();
        train.seed = self.seed;
        train.validate()?;
        self.sample.validate()
    }

    /// Resolves the data source, loading and checking the vocabulary.
    pub fn source(&self) -> Result<Source> {
        self.validate()?;
        if let Some(dir) = &self.data.synth {
            if !dir.join(crate::synth::CORPUS_FILE).is_file() {
                return Err(Error::Config(format!("data.synth: no synthetic corpus in {}", dir.display())));
            }
            return Ok(Source::Synth { dir: dir.clone() });
        }
        let dir = self.data.corpus.clone().expect("checked by validate");
        if !dir.join(crate::corpus::MANIFEST).is_file() {
            return Err(Error::Config(format!("data.corpus: {} is not an ingested corpus", dir.display())));
        }
        let vocab_path = self.data.vocab.clone().unwrap_or_else(|| dir.join(crate::corpus::VOCAB));
        if !vocab_path.is_file() {
            return Err(Error::Config(format!("data.vocab: {} does not exist", vocab_path.display())));
        }
        let vocab = FeatureVocab::load(&vocab_path)?;
        check_features(&self.features, &vocab.config)?;
        Ok(Source::Corpus { dir, vocab })
    }

    /// Model settings with the vocabulary of the data filled in.
    pub fn model_config(&self, vocab_sizes: Vec<usize>, feature_names: Vec<String>) -> ModelConfig {
        ModelConfig {
            vocab_sizes,
            feature_names,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// The `[features]` table must describe the vocabulary it is used with.
pub fn check_features(want: &FeatureConfig, have: &FeatureConfig) -> Result<()> {
    let pairs = [
        ("instrument", want.instrument, have.instrument),
        ("chord", want.chord, have.chord),
        ("tempo", want.tempo, have.tempo),
        ("velocity", want.velocity, have.velocity),
    ];
    for (name, w, h) in pairs {
        if w != h {
            return Err(Error::Config(format!(
                "features.{name} = {w} but the vocabulary was built with {name} {}",
                if h { "active" } else { "inactive" }
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = include_str!("../../../configs/example.toml");

    #[test]
    fn example_config_parses_and_validates() {
        let cfg = RunConfig::parse(EXAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.data.scheme, Scheme::NbPf);
        assert_eq!(cfg.sample.top_p, 0.99);
        let again = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = EXAMPLE.replace("lr_max", "lr_maxx");
        match RunConfig::parse(&text) {
            Err(Error::Config(m)) => assert!(m.contains("lr_maxx"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn section_seeds_are_rejected() {
        let mut cfg = RunConfig::parse(EXAMPLE).unwrap();
        cfg.train.seed = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.starts_with("train.seed")));
    }

    #[test]
    fn feature_mismatch_is_a_config_error() {
        let have = FeatureConfig {
            velocity: false,
            ..FeatureConfig::default()
        };
        let err = check_features(&FeatureConfig::default(), &have).unwrap_err();
        assert!(err.to_string().contains("features.velocity"));
    }
}
