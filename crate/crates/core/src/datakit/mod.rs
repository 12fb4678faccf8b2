//! Dataset files, caption deduplication, morphology tables, and the
//! synthetic zero-shot corpus.

mod dataset;
mod morph;
pub mod synth;

pub use dataset::{caption_label_counts, dedup_captions, Dataset, DedupReport, Image, Split};
pub use morph::{build_morph_table, MorphTable, PluralRules};
pub use synth::{generate_synthetic, GeneratorConfig, SyntheticCorpus};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Taxonomy(#[from] crate::taxonomy::TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema { path: path.into(), message: message.into() }
    }
}
