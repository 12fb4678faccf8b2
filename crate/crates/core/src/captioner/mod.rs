//! Copy-augmented transformer captioner.
//!
//! Objects are embedded as `LN(r W_r + e) + LN(p W_p)`, encoded by a
//! post-LN transformer, and decoded by a transformer decoder whose output
//! head scores vocabulary words and copyable objects in one softmax. A
//! per-step selector distributes each copy probability over the label's
//! inflected forms.

mod checkpoint;
mod inputs;
mod model;
mod output;

pub use checkpoint::{Manifest, MANIFEST_FORMAT};
pub use inputs::{positional_features, CopyObject, ObjectInputs, VisualObject, POS_DIM};
pub use model::{Captioner, DecState, Session, StepMask, TeacherForced};
pub use output::OutputDistribution;

use serde::{Deserialize, Serialize};

use crate::numcore::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CaptionerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token `{0}` has no embedding row")]
    UnregisteredForm(String),
    #[error("target `{0}` is neither a vocabulary word nor a copyable form")]
    Unrepresentable(String),
    #[error("copy of object {object} form {form} is out of range")]
    BadCopy { object: usize, form: usize },
    #[error("sequence of {len} steps exceeds the positional table ({max})")]
    TooLong { len: usize, max: usize },
    #[error("image has no objects to encode")]
    NoObjects,
    #[error("model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How copied labels choose an inflected form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MorphMode {
    /// One selector matrix per form count, shared by all labels.
    Shared,
    /// One selector matrix per label.
    PerLabel,
    /// No selector: a copy always emits the base form.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub ffn: usize,
    pub heads: usize,
    pub dropout: f64,
    pub d_roi: usize,
    pub max_len: usize,
    /// Seed for trainable parameter initialization.
    pub seed: u64,
    /// Seed for the frozen word and positional tables.
    pub embedding_seed: u64,
    pub abstract_labels: bool,
    pub morph: MorphMode,
    /// Optional JSON map `word -> vector` overriding rows of the frozen table.
    pub embedding_file: Option<std::path::PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 768,
            n_enc: 3,
            n_dec: 3,
            ffn: 2048,
            heads: 8,
            dropout: 0.1,
            d_roi: 2048,
            max_len: 20,
            seed: 0,
            embedding_seed: 7,
            abstract_labels: true,
            morph: MorphMode::Shared,
            embedding_file: None,
        }
    }
}

impl ModelConfig {
    /// Small profile used by tests and the synthetic experiments.
    pub fn desk() -> Self {
        Self { d: 64, n_enc: 1, n_dec: 1, ffn: 128, heads: 4, d_roi: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CaptionerError> {
        let bad = |m: &str| Err(CaptionerError::Config(m.to_string()));
        if self.d < 2 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be at least 2 and divisible by heads");
        }
        if self.n_dec == 0 || self.ffn == 0 || self.d_roi == 0 || self.max_len == 0 {
            return bad("n_dec, ffn, d_roi and max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}
