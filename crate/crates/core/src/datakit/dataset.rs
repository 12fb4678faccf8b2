use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use super::{DataError, MorphTable};
use crate::taxonomy::{BBox, DetectedObject, Source};
use crate::tokens::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    ValIn,
    ValNear,
    ValOut,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::ValIn, Split::ValNear, Split::ValOut];
    pub const EVAL: [Split; 3] = [Split::ValIn, Split::ValNear, Split::ValOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValIn => "val-in",
            Split::ValNear => "val-near",
            Split::ValOut => "val-out",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL.into_iter().find(|sp| sp.as_str() == s).ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    pub copyable: Vec<DetectedObject>,
    /// Visual-only detections; `label` is empty when the detector gives none.
    pub visual: Vec<DetectedObject>,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let root: Value = serde_json::from_str(text).map_err(|e| DataError::schema("$", e.to_string()))?;
        parse_dataset(&root)
    }

    pub fn to_json(&self) -> String {
        let images: Vec<Value> = self
            .images
            .iter()
            .map(|img| {
                json!({
                    "id": img.id,
                    "copyable": img.copyable.iter().map(detection_json).collect::<Vec<_>>(),
                    "visual": img.visual.iter().map(detection_json).collect::<Vec<_>>(),
                    "captions": img.captions,
                })
            })
            .collect();
        let mut out = serde_json::to_string_pretty(&json!({ "split": self.split.as_str(), "images": images }))
            .expect("dataset serializes");
        out.push('\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn roi_dim(&self) -> Option<usize> {
        self.images.iter().flat_map(|i| i.copyable.iter().chain(&i.visual)).map(|d| d.roi.len()).next()
    }

    pub fn caption_count(&self) -> usize {
        self.images.iter().map(|i| i.captions.len()).sum()
    }
}

fn detection_json(d: &DetectedObject) -> Value {
    let mut m = Map::new();
    if !d.label.is_empty() {
        m.insert("label".into(), json!(d.label));
    }
    m.insert("bbox".into(), json!([d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2]));
    m.insert("confidence".into(), json!(d.confidence));
    m.insert("roi".into(), json!(d.roi));
    Value::Object(m)
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, path: &str) -> Result<&'a Value, DataError> {
    obj.get(name).ok_or_else(|| DataError::schema(path, format!("missing field `{name}`")))
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, DataError> {
    v.as_object().ok_or_else(|| DataError::schema(path, "expected an object"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, DataError> {
    v.as_array().ok_or_else(|| DataError::schema(path, "expected an array"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64, DataError> {
    v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| DataError::schema(path, "expected a finite number"))
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, DataError> {
    v.as_str().ok_or_else(|| DataError::schema(path, "expected a string"))
}

fn parse_dataset(root: &Value) -> Result<Dataset, DataError> {
    let obj = as_object(root, "$")?;
    let split_s = as_str(field(obj, "split", "$")?, "split")?;
    let split = split_s.parse().map_err(|e: String| DataError::schema("split", e))?;
    let images_v = as_array(field(obj, "images", "$")?, "images")?;
    let mut images = Vec::with_capacity(images_v.len());
    let mut roi_dim = None;
    let mut seen = HashSet::new();
    for (i, iv) in images_v.iter().enumerate() {
        let path = format!("images[{i}]");
        let img = parse_image(iv, &path, &mut roi_dim)?;
        if !seen.insert(img.id.clone()) {
            return Err(DataError::schema(format!("{path}.id"), format!("duplicate image id `{}`", img.id)));
        }
        images.push(img);
    }
    Ok(Dataset { split, images })
}

fn parse_image(v: &Value, path: &str, roi_dim: &mut Option<usize>) -> Result<Image, DataError> {
    let obj = as_object(v, path)?;
    let id = as_str(field(obj, "id", path)?, &format!("{path}.id"))?.to_string();
    let mut dets = |name: &str, source: Source| -> Result<Vec<DetectedObject>, DataError> {
        let p = format!("{path}.{name}");
        as_array(field(obj, name, path)?, &p)?
            .iter()
            .enumerate()
            .map(|(j, d)| parse_detection(d, &format!("{p}[{j}]"), source, roi_dim))
            .collect()
    };
    let copyable = dets("copyable", Source::Copyable)?;
    let visual = dets("visual", Source::Visual)?;
    if visual.is_empty() {
        return Err(DataError::schema(format!("{path}.visual"), "at least one visual detection is required"));
    }
    let cp = format!("{path}.captions");
    let captions = as_array(field(obj, "captions", path)?, &cp)?
        .iter()
        .enumerate()
        .map(|(j, c)| as_str(c, &format!("{cp}[{j}]")).map(str::to_string))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Image { id, copyable, visual, captions })
}

fn parse_detection(v: &Value, path: &str, source: Source, roi_dim: &mut Option<usize>) -> Result<DetectedObject, DataError> {
    let obj = as_object(v, path)?;
    let label = match (obj.get("label"), source) {
        (Some(l), _) => as_str(l, &format!("{path}.label"))?.to_string(),
        (None, Source::Visual) => String::new(),
        (None, Source::Copyable) => return Err(DataError::schema(path, "missing field `label`")),
    };
    if source == Source::Copyable && label.is_empty() {
        return Err(DataError::schema(format!("{path}.label"), "copyable detections need a label"));
    }
    let bp = format!("{path}.bbox");
    let coords = as_array(field(obj, "bbox", path)?, &bp)?;
    if coords.len() != 4 {
        return Err(DataError::schema(&bp, format!("expected 4 coordinates, found {}", coords.len())));
    }
    let c: Vec<f64> = coords.iter().map(|x| as_f64(x, &bp)).collect::<Result<_, _>>()?;
    let bbox = BBox::new(c[0], c[1], c[2], c[3]);
    if !bbox.is_valid() {
        return Err(DataError::schema(&bp, "need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1"));
    }
    let confp = format!("{path}.confidence");
    let confidence = as_f64(field(obj, "confidence", path)?, &confp)?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(DataError::schema(confp, "confidence must lie in [0, 1]"));
    }
    let rp = format!("{path}.roi");
    let roi: Vec<f64> = as_array(field(obj, "roi", path)?, &rp)?
        .iter()
        .map(|x| as_f64(x, &rp))
        .collect::<Result<_, _>>()?;
    match *roi_dim {
        None if roi.is_empty() => return Err(DataError::schema(rp, "roi must be non-empty")),
        None => *roi_dim = Some(roi.len()),
        Some(d) if d != roi.len() => {
            return Err(DataError::schema(rp, format!("roi has {} entries, expected {d}", roi.len())));
        }
        Some(_) => {}
    }
    Ok(DetectedObject { label, bbox, confidence, roi, source })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DedupReport {
    pub removed_captions: usize,
    pub dropped_images: Vec<String>,
}

/// Keeps each caption string only at its first occurrence across `datasets`,
/// scanned in the given order. Images left without captions are dropped.
pub fn dedup_captions(datasets: &mut [&mut Dataset]) -> DedupReport {
    let mut seen: HashSet<String> = HashSet::new();
    let mut report = DedupReport::default();
    for ds in datasets.iter_mut() {
        for img in &mut ds.images {
            let before = img.captions.len();
            img.captions.retain(|c| seen.insert(c.clone()));
            report.removed_captions += before - img.captions.len();
        }
        ds.images.retain(|img| {
            if img.captions.is_empty() {
                log::warn!("image {} has no captions left after deduplication; dropped", img.id);
                report.dropped_images.push(img.id.clone());
                false
            } else {
                true
            }
        });
    }
    report
}

/// Occurrences of each label (any inflection) across the captions of `ds`.
pub fn caption_label_counts(ds: &Dataset, morph: &MorphTable) -> HashMap<String, u64> {
    let surfaces = morph.surface_index();
    let mut counts: HashMap<String, u64> = HashMap::new();
    for img in &ds.images {
        for c in &img.captions {
            for tok in tokenize(c) {
                if let Some(hits) = surfaces.get(tok.as_str()) {
                    for (label, _) in hits {
                        *counts.entry(label.to_string()).or_default() += 1;
                    }
                }
            }
        }
    }
    counts
}
