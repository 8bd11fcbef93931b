//! Manifest ingestion, preprocessing and the synthetic glyph corpus.

pub mod augment;
pub mod manifest;
pub mod synth;

pub use augment::{augment, augment_box, AugmentConfig};
pub use manifest::{Class, Manifest, Sample, VOCABULARY};
pub use synth::{synth_generate, SynthConfig, SynthCorpus};
