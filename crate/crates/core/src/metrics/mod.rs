//! CIDEr-D and the copy-quantity metrics: Object F1, Object CIDEr and the
//! average number of copied objects.

mod cider;
mod report;

pub use cider::{cider_d, CiderRefs, CorpusStats, N_MAX, SIGMA};
pub use report::{evaluate_split, ImageRow, MetricReport, SplitReport};

use std::collections::BTreeSet;

use crate::datakit::MorphTable;
use crate::decoder::DecodeRecord;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("corpus has no images")]
    EmptyCorpus,
    #[error("image {0} has no references")]
    NoReferences(usize),
    #[error("{0} captions but {1} gold sets")]
    Mismatch(usize, usize),
}

/// Micro-F1 over (image, label) pairs. A label is predicted for an image
/// when any of its forms occurs in the caption. Labels outside the morph
/// table are ignored. Returns 0 when there is nothing to count.
pub fn object_f1(captions: &[Vec<String>], gold: &[BTreeSet<String>], morph: &MorphTable) -> Result<f64, MetricError> {
    if captions.len() != gold.len() {
        return Err(MetricError::Mismatch(captions.len(), gold.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (cap, g) in captions.iter().zip(gold) {
        for label in morph.labels() {
            let said = morph.mentions(label, cap);
            match (said, g.contains(label)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Caption made only of the copied words of the top caption.
pub fn dummy_caption(record: &DecodeRecord) -> Vec<String> {
    record.top().map(|c| c.copied_words()).unwrap_or_default()
}

/// Mean CIDEr-D of the copied-words-only captions.
pub fn object_cider(records: &[DecodeRecord], refs: &[Vec<Vec<String>>], stats: &CorpusStats) -> Result<f64, MetricError> {
    if records.len() != refs.len() {
        return Err(MetricError::Mismatch(records.len(), refs.len()));
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = records.iter().zip(refs).map(|(r, rs)| cider::score_quiet(&dummy_caption(r), &stats.prepare(rs))).sum();
    Ok(total / records.len() as f64)
}

/// Mean number of copy events in each image's top caption.
pub fn avg_objects(records: &[DecodeRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.top().map_or(0, |c| c.copies())).sum::<usize>() as f64 / records.len() as f64
}
