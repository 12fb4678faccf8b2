//! Cross-entropy pre-training and self-critical fine-tuning with
//! copy-encouraging rewards.

mod data;
mod optim;
mod reward;
mod run;
mod scst;

pub use data::{align, prepare_dataset, prepare_image, prepare_references, split_file, voa_filter, voa_fraction, Corpus, PreparedImage, MORPH_FILE, TAXONOMY_FILE};
pub use optim::{clip_gradients, lr_schedule_ce, lr_schedule_scst, Adam, AdamConfig, ClipMode, Plateau};
pub use reward::{reward, reward_value, RewardConfig, RewardKind};
pub use run::{
    ce_step, decode_images, evaluate, f1_labels, greedy_cider, init_model, prepare_corpus, run_stage, score_split, train, train_ce, train_scst,
    write_log, CeConfig, EvalConfig, EvalRow, LogRecord, OptimConfig, PreparedCorpus, RunConfig, ScstConfig, Stage, TrainOutcome, CONFIG_FILE,
    LOG_FILE,
};
pub use scst::{scst_step, Baseline, CaptionPolicy, Policy, ScstOutcome};

use crate::captioner::CaptionerError;
use crate::datakit::DataError;
use crate::decoder::DecodeError;
use crate::metrics::MetricError;
use crate::numcore::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] CaptionerError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}
