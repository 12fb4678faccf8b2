use crate::datakit::MorphTable;
use crate::taxonomy::{BBox, DetectedObject, Taxonomy};

use super::CaptionerError;

pub const POS_DIM: usize = 8;

/// `(x1, y1, x2, y2, w, h, area, confidence)`.
pub fn positional_features(bbox: &BBox, confidence: f64) -> [f64; POS_DIM] {
    [bbox.x1, bbox.y1, bbox.x2, bbox.y2, bbox.width(), bbox.height(), bbox.area(), confidence]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopyObject {
    pub label: String,
    /// Surface forms, base form first.
    pub forms: Vec<String>,
    /// Row of the abstract-label table.
    pub abstract_index: usize,
    pub confidence: f64,
    pub roi: Vec<f64>,
    pub pos: [f64; POS_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualObject {
    pub roi: Vec<f64>,
    pub pos: [f64; POS_DIM],
}

/// Encoder input for one image: copyable objects first, then visual ones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectInputs {
    pub copyable: Vec<CopyObject>,
    pub visual: Vec<VisualObject>,
}

impl ObjectInputs {
    /// `copyable` should already be filtered. `abstract_labels` lists the
    /// model's abstract-label rows.
    pub fn build(
        copyable: &[DetectedObject],
        visual: &[DetectedObject],
        tax: &Taxonomy,
        morph: &MorphTable,
        abstract_labels: &[String],
    ) -> Result<Self, CaptionerError> {
        let copyable = copyable
            .iter()
            .map(|d| {
                let abs = tax.assign_abstract_label(&d.label).map_err(|e| CaptionerError::Config(e.to_string()))?;
                let abstract_index = abstract_labels
                    .iter()
                    .position(|a| a == abs)
                    .ok_or_else(|| CaptionerError::Config(format!("abstract label `{abs}` has no embedding row")))?;
                Ok(CopyObject {
                    label: d.label.clone(),
                    forms: morph.forms_or_base(&d.label),
                    abstract_index,
                    confidence: d.confidence,
                    roi: d.roi.clone(),
                    pos: positional_features(&d.bbox, d.confidence),
                })
            })
            .collect::<Result<Vec<_>, CaptionerError>>()?;
        let visual = visual.iter().map(|d| VisualObject { roi: d.roi.clone(), pos: positional_features(&d.bbox, d.confidence) }).collect();
        Ok(Self { copyable, visual })
    }

    pub fn k_f(&self) -> usize {
        self.copyable.len()
    }

    pub fn len(&self) -> usize {
        self.copyable.len() + self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Objects whose forms include `surface`; highest confidence first.
    pub fn objects_with_form(&self, surface: &str) -> Vec<(usize, usize)> {
        let mut hits: Vec<(usize, usize)> = self
            .copyable
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.forms.iter().position(|f| f == surface).map(|j| (i, j)))
            .collect();
        hits.sort_by(|a, b| self.copyable[b.0].confidence.total_cmp(&self.copyable[a.0].confidence).then(a.0.cmp(&b.0)));
        hits
    }
}
