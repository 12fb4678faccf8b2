use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{avg_objects, cider::score_quiet, dummy_caption, object_f1, CorpusStats, MetricError};
use crate::datakit::MorphTable;
use crate::decoder::DecodeRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image_id: String,
    pub caption: String,
    pub cider_d: f64,
    pub object_cider: f64,
    pub copies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub images: usize,
    pub cider_d: f64,
    pub object_f1: f64,
    pub object_cider: f64,
    pub avg_objects: f64,
    pub rows: Vec<ImageRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub splits: Vec<SplitReport>,
}

impl MetricReport {
    pub fn split(&self, name: &str) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Scores one split's decode records. Document frequencies come from the
/// split's own references; `f1_labels` restricts Object F1 to a label
/// subset.
pub fn evaluate_split(
    split: &str,
    records: &[DecodeRecord],
    refs: &[Vec<Vec<String>>],
    gold: &[BTreeSet<String>],
    f1_labels: &MorphTable,
) -> Result<SplitReport, MetricError> {
    if records.len() != refs.len() || records.len() != gold.len() {
        return Err(MetricError::Mismatch(records.len(), refs.len()));
    }
    let stats = CorpusStats::build(refs)?;
    let rows: Vec<ImageRow> = records
        .iter()
        .zip(refs)
        .map(|(r, rs)| {
            let prepared = stats.prepare(rs);
            let top = r.top();
            let words = top.map(|c| c.words()).unwrap_or_default();
            ImageRow {
                image_id: r.image_id.clone(),
                caption: top.map(|c| c.text.clone()).unwrap_or_default(),
                cider_d: prepared.score(&words),
                object_cider: score_quiet(&dummy_caption(r), &prepared),
                copies: top.map_or(0, |c| c.copies()),
            }
        })
        .collect();
    let n = rows.len().max(1) as f64;
    let captions: Vec<Vec<String>> = records.iter().map(|r| r.top().map(|c| c.words()).unwrap_or_default()).collect();
    Ok(SplitReport {
        split: split.to_string(),
        images: rows.len(),
        cider_d: rows.iter().map(|r| r.cider_d).sum::<f64>() / n,
        object_f1: object_f1(&captions, gold, f1_labels)?,
        object_cider: rows.iter().map(|r| r.object_cider).sum::<f64>() / n,
        avg_objects: avg_objects(records),
        rows,
    })
}
