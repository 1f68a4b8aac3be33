//! Human-readable token dumps and length statistics.
//!
//! A dump has one line per token. Compound tokens list `feature=value` for
//! every sub-token, separated by `|`; REMI tokens are a single name such as
//! `Bar` or `pitch_60`.

use serde::{Deserialize, Serialize};

use super::vocab::FeatureVocab;
use super::TokenSequence;

pub fn dump_tokens(seq: &TokenSequence, vocab: &FeatureVocab) -> String {
    let features = seq.scheme.features();
    let mut out = String::new();
    for t in seq.tokens() {
        let parts: Vec<String> = features
            .iter()
            .zip(t)
            .map(|(&f, &v)| {
                if seq.scheme.is_compound() {
                    format!("{}={}", f.name(), vocab.name(f, v))
                } else {
                    vocab.remi_name(v)
                }
            })
            .collect();
        out.push_str(&parts.join("|"));
        out.push('\n');
    }
    out
}

/// Mean and (population) standard deviation of sequence lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub max: usize,
}

impl std::fmt::Display for LengthStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.0}(±{:.0})", self.mean, self.std)
    }
}

pub fn length_stats(lengths: &[usize]) -> LengthStats {
    let n = lengths.len();
    if n == 0 {
        return LengthStats { count: 0, mean: 0.0, std: 0.0, min: 0, max: 0 };
    }
    let mean = lengths.iter().sum::<usize>() as f64 / n as f64;
    let var = lengths.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    LengthStats {
        count: n,
        mean,
        std: var.sqrt(),
        min: *lengths.iter().min().unwrap(),
        max: *lengths.iter().max().unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_known_lengths() {
        let s = length_stats(&[2, 4, 4, 4, 5, 5, 7, 9]);
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, 2.0);
        assert_eq!((s.min, s.max), (2, 9));
        assert_eq!(s.to_string(), "5(±2)");
    }
}
