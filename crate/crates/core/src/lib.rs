//! Symbolic-music language modelling with nested sub-token decoding.
//!
//! Pipeline: [`midi`] reads and quantizes Standard MIDI Files, [`encoding`]
//! turns pieces into REMI, compound-word or note-based token sequences,
//! [`model`] predicts them with a transformer main decoder plus one of six
//! sub-decoders, [`training`] fits it, [`evaluation`] reports NLL that is
//! comparable across encodings, and [`generation`] samples new music.

pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod midi;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorKind, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/configuration.md")]
    struct Configuration;
    #[doc = include_str!("../../../book/src/encodings.md")]
    struct Encodings;
    #[doc = include_str!("../../../book/src/model.md")]
    struct ModelChapter;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/generation.md")]
    struct Generation;
    #[doc = include_str!("../../../book/src/synthetic.md")]
    struct Synthetic;
}
