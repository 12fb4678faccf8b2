//! Object-class hierarchy, abstract labels, and copyable-detection filtering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("node `{child}` has unknown parent `{parent}`")]
    UnknownParent { child: String, parent: String },
    #[error("taxonomy has no root")]
    NoRoot,
    #[error("taxonomy has several roots: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("cycle through `{0}`")]
    Cycle(String),
    #[error("asked for {k} abstract labels but only {internal} internal nodes exist")]
    TooManyAbstract { k: usize, internal: usize },
    #[error("taxonomy file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk form: `{ "nodes": [...], "parent": {child: parent}, "abstract_set": [...] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub nodes: Vec<String>,
    pub parent: BTreeMap<String, String>,
    #[serde(default)]
    pub abstract_set: Vec<String>,
}

/// Rooted class hierarchy with a designated abstract-label subset. The root
/// is always abstract, so every node resolves to some abstract label.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    is_abstract: Vec<bool>,
}

impl Taxonomy {
    pub fn from_file(file: &TaxonomyFile) -> Result<Self, TaxonomyError> {
        let mut index = HashMap::new();
        for (i, n) in file.nodes.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(TaxonomyError::DuplicateNode(n.clone()));
            }
        }
        let mut parent = vec![None; file.nodes.len()];
        for (child, p) in &file.parent {
            let &c = index.get(child).ok_or_else(|| TaxonomyError::UnknownLabel(child.clone()))?;
            let &pi = index
                .get(p)
                .ok_or_else(|| TaxonomyError::UnknownParent { child: child.clone(), parent: p.clone() })?;
            parent[c] = Some(pi);
        }
        let roots: Vec<usize> = (0..file.nodes.len()).filter(|&i| parent[i].is_none()).collect();
        let root = match roots.as_slice() {
            [] => return Err(TaxonomyError::NoRoot),
            [r] => *r,
            many => return Err(TaxonomyError::MultipleRoots(many.iter().map(|&i| file.nodes[i].clone()).collect())),
        };
        for start in 0..file.nodes.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > file.nodes.len() {
                    return Err(TaxonomyError::Cycle(file.nodes[start].clone()));
                }
            }
        }
        let mut children = vec![Vec::new(); file.nodes.len()];
        for (c, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(c);
            }
        }
        let mut tax = Self {
            names: file.nodes.clone(),
            index,
            parent,
            children,
            root,
            is_abstract: vec![false; file.nodes.len()],
        };
        tax.set_abstract(&file.abstract_set)?;
        Ok(tax)
    }

    pub fn to_file(&self) -> TaxonomyFile {
        let parent = self
            .parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (self.names[c].clone(), self.names[p].clone())))
            .collect();
        TaxonomyFile { nodes: self.names.clone(), parent, abstract_set: self.abstract_set() }
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = fs::read_to_string(path)?;
        let file: TaxonomyFile = serde_json::from_str(&text).map_err(|e| TaxonomyError::Format(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn save(&self, path: &Path) -> Result<(), TaxonomyError> {
        let text = serde_json::to_string_pretty(&self.to_file()).map_err(|e| TaxonomyError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Replaces the abstract set; the root is always added.
    pub fn set_abstract<S: AsRef<str>>(&mut self, labels: &[S]) -> Result<(), TaxonomyError> {
        let mut flags = vec![false; self.names.len()];
        for l in labels {
            flags[self.id(l.as_ref())?] = true;
        }
        flags[self.root] = true;
        self.is_abstract = flags;
        Ok(())
    }

    pub fn id(&self, label: &str) -> Result<usize, TaxonomyError> {
        self.index.get(label).copied().ok_or_else(|| TaxonomyError::UnknownLabel(label.to_string()))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn nodes(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> &str {
        &self.names[self.root]
    }

    pub fn parent_of(&self, label: &str) -> Result<Option<&str>, TaxonomyError> {
        Ok(self.parent[self.id(label)?].map(|p| self.names[p].as_str()))
    }

    pub fn children_of(&self, label: &str) -> Result<Vec<&str>, TaxonomyError> {
        Ok(self.children[self.id(label)?].iter().map(|&c| self.names[c].as_str()).collect())
    }

    pub fn is_abstract(&self, label: &str) -> bool {
        self.index.get(label).is_some_and(|&i| self.is_abstract[i])
    }

    /// Abstract labels in node order.
    pub fn abstract_set(&self) -> Vec<String> {
        (0..self.names.len()).filter(|&i| self.is_abstract[i]).map(|i| self.names[i].clone()).collect()
    }

    /// Position of an abstract label within [`Self::abstract_set`].
    pub fn abstract_index(&self, label: &str) -> Option<usize> {
        let id = *self.index.get(label)?;
        if !self.is_abstract[id] {
            return None;
        }
        Some((0..id).filter(|&i| self.is_abstract[i]).count())
    }

    /// `label` followed by its ancestors up to the root.
    pub fn ancestors_or_self(&self, label: &str) -> Result<Vec<&str>, TaxonomyError> {
        let mut out = Vec::new();
        let mut cur = Some(self.id(label)?);
        while let Some(c) = cur {
            out.push(self.names[c].as_str());
            cur = self.parent[c];
        }
        Ok(out)
    }

    /// True when `ancestor` lies strictly above `label`.
    pub fn is_ancestor(&self, ancestor: &str, label: &str) -> bool {
        let (Some(&a), Some(&l)) = (self.index.get(ancestor), self.index.get(label)) else {
            return false;
        };
        let mut cur = self.parent[l];
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            cur = self.parent[c];
        }
        false
    }

    fn abstract_of_id(&self, mut id: usize) -> usize {
        while !self.is_abstract[id] {
            id = self.parent[id].expect("root is always abstract");
        }
        id
    }

    /// Nearest ancestor-or-self that is an abstract label.
    pub fn assign_abstract_label(&self, label: &str) -> Result<&str, TaxonomyError> {
        Ok(&self.names[self.abstract_of_id(self.id(label)?)])
    }

    fn internal_nodes(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&i| !self.children[i].is_empty()).collect()
    }

    /// Greedy choice of `k` internal nodes whose aggregated label counts are
    /// as even as possible. Starting from the root, each round promotes the
    /// internal node whose promotion gives the lowest count variance.
    pub fn choose_abstract_set(&self, label_counts: &HashMap<String, u64>, k: usize) -> Result<Vec<String>, TaxonomyError> {
        let internal = self.internal_nodes();
        if k == 0 || k > internal.len().max(1) {
            return Err(TaxonomyError::TooManyAbstract { k, internal: internal.len() });
        }
        let mut counts = vec![0u64; self.names.len()];
        for (label, &c) in label_counts {
            counts[self.id(label)?] += c;
        }
        let mut chosen: BTreeSet<usize> = BTreeSet::from([self.root]);
        while chosen.len() < k {
            let mut best: Option<(f64, usize)> = None;
            for &cand in &internal {
                if chosen.contains(&cand) {
                    continue;
                }
                let mut trial = chosen.clone();
                trial.insert(cand);
                let v = self.aggregated_variance(&counts, &trial);
                if best.is_none_or(|(bv, _)| v < bv - 1e-12) {
                    best = Some((v, cand));
                }
            }
            let (_, pick) = best.expect("k <= internal node count");
            chosen.insert(pick);
        }
        Ok(chosen.into_iter().map(|i| self.names[i].clone()).collect())
    }

    /// Counts aggregated onto each member of `set` by nearest-ancestor
    /// assignment, in ascending node order.
    pub fn aggregate_counts(&self, label_counts: &HashMap<String, u64>, set: &[String]) -> Result<Vec<u64>, TaxonomyError> {
        let mut counts = vec![0u64; self.names.len()];
        for (label, &c) in label_counts {
            counts[self.id(label)?] += c;
        }
        let ids: BTreeSet<usize> = set.iter().map(|s| self.id(s)).collect::<Result<_, _>>()?;
        Ok(self.aggregate(&counts, &ids).into_values().collect())
    }

    fn aggregate(&self, counts: &[u64], set: &BTreeSet<usize>) -> BTreeMap<usize, u64> {
        let mut agg: BTreeMap<usize, u64> = set.iter().map(|&i| (i, 0)).collect();
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let mut cur = i;
            while !set.contains(&cur) {
                match self.parent[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            *agg.entry(cur).or_default() += c;
        }
        agg
    }

    fn aggregated_variance(&self, counts: &[u64], set: &BTreeSet<usize>) -> f64 {
        variance(&self.aggregate(counts, set).into_values().collect::<Vec<_>>())
    }
}

/// Population variance of integer counts.
pub fn variance(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].into_iter().all(in_unit)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Copyable,
    Visual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub label: String,
    pub bbox: BBox,
    pub confidence: f64,
    pub roi: Vec<f64>,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Labels mentioned at least this often in training captions are left to
    /// the vocabulary.
    pub freq_threshold: u64,
    /// IoU at or above which an ancestor box is dropped in favour of its
    /// descendant.
    pub overlap_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { freq_threshold: 100, overlap_threshold: 0.5 }
    }
}

/// Frequency, overlap, and one-per-label filtering of copyable detections.
/// Output keeps input order.
pub fn filter_copyable(
    detections: &[DetectedObject],
    caption_freq: &HashMap<String, u64>,
    tax: &Taxonomy,
    cfg: &FilterConfig,
) -> Vec<DetectedObject> {
    let rare: Vec<usize> = (0..detections.len())
        .filter(|&i| caption_freq.get(&detections[i].label).copied().unwrap_or(0) < cfg.freq_threshold)
        .collect();

    let mut dropped = vec![false; detections.len()];
    for &i in &rare {
        for &j in &rare {
            if i == j {
                continue;
            }
            let (a, b) = (&detections[i], &detections[j]);
            if a.bbox.iou(&b.bbox) >= cfg.overlap_threshold && tax.is_ancestor(&a.label, &b.label) {
                dropped[i] = true;
            }
        }
    }
    let survivors: Vec<usize> = rare.into_iter().filter(|&i| !dropped[i]).collect();

    let mut best: HashMap<&str, usize> = HashMap::new();
    for &i in &survivors {
        let d = &detections[i];
        match best.get(d.label.as_str()) {
            Some(&b) => {
                let cur = &detections[b];
                let better = d.confidence > cur.confidence
                    || (d.confidence == cur.confidence && d.bbox.area() > cur.bbox.area());
                if better {
                    best.insert(&d.label, i);
                }
            }
            None => {
                best.insert(&d.label, i);
            }
        }
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| detections[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> Taxonomy {
        let file = TaxonomyFile {
            nodes: ["entity", "animal", "dog", "puppy", "cat", "food", "pizza"].map(String::from).to_vec(),
            parent: [("animal", "entity"), ("dog", "animal"), ("puppy", "dog"), ("cat", "animal"), ("food", "entity"), ("pizza", "food")]
                .into_iter()
                .map(|(c, p)| (c.to_string(), p.to_string()))
                .collect(),
            abstract_set: vec!["animal".into()],
        };
        Taxonomy::from_file(&file).unwrap()
    }

    fn det(label: &str, bbox: BBox, confidence: f64) -> DetectedObject {
        DetectedObject { label: label.into(), bbox, confidence, roi: vec![0.0], source: Source::Copyable }
    }

    #[test]
    fn abstract_assignment() {
        let t = toy();
        assert_eq!(t.assign_abstract_label("animal").unwrap(), "animal");
        assert_eq!(t.assign_abstract_label("puppy").unwrap(), "animal");
        assert_eq!(t.assign_abstract_label("pizza").unwrap(), "entity");
        assert_eq!(t.assign_abstract_label("entity").unwrap(), "entity");
        assert!(matches!(t.assign_abstract_label("car"), Err(TaxonomyError::UnknownLabel(_))));
        assert_eq!(t.abstract_set(), vec!["entity", "animal"]);
        assert_eq!(t.abstract_index("animal"), Some(1));
        assert_eq!(t.abstract_index("dog"), None);
    }

    #[test]
    fn rejects_malformed_hierarchies() {
        let two_roots = TaxonomyFile { nodes: vec!["a".into(), "b".into()], parent: BTreeMap::new(), abstract_set: vec![] };
        assert!(matches!(Taxonomy::from_file(&two_roots), Err(TaxonomyError::MultipleRoots(_))));
        let cycle = TaxonomyFile {
            nodes: vec!["r".into(), "a".into(), "b".into()],
            parent: [("a", "b"), ("b", "a")].into_iter().map(|(c, p)| (c.into(), p.into())).collect(),
            abstract_set: vec![],
        };
        assert!(Taxonomy::from_file(&cycle).is_err());
        let bad_parent = TaxonomyFile {
            nodes: vec!["r".into(), "a".into()],
            parent: [("a".to_string(), "zzz".to_string())].into_iter().collect(),
            abstract_set: vec![],
        };
        assert!(matches!(Taxonomy::from_file(&bad_parent), Err(TaxonomyError::UnknownParent { .. })));
    }

    #[test]
    fn choose_k1_is_root_only() {
        let t = toy();
        let counts = HashMap::from([("dog".to_string(), 10), ("pizza".to_string(), 3)]);
        assert_eq!(t.choose_abstract_set(&counts, 1).unwrap(), vec!["entity"]);
        let internal = 4; // entity, animal, dog, food
        assert!(matches!(t.choose_abstract_set(&counts, internal + 1), Err(TaxonomyError::TooManyAbstract { .. })));
    }

    #[test]
    fn choose_balanced_binary_picks_depth_one() {
        let nodes = ["r", "a", "b", "a1", "a2", "b1", "b2"];
        let parent = [("a", "r"), ("b", "r"), ("a1", "a"), ("a2", "a"), ("b1", "b"), ("b2", "b")];
        let file = TaxonomyFile {
            nodes: nodes.map(String::from).to_vec(),
            parent: parent.into_iter().map(|(c, p)| (c.to_string(), p.to_string())).collect(),
            abstract_set: vec![],
        };
        let t = Taxonomy::from_file(&file).unwrap();
        let counts: HashMap<String, u64> = ["a1", "a2", "b1", "b2"].iter().map(|l| (l.to_string(), 5)).collect();
        let mut set = t.choose_abstract_set(&counts, 3).unwrap();
        set.sort();
        assert_eq!(set, vec!["a", "b", "r"]);
    }

    #[test]
    fn filter_identity_when_nothing_triggers() {
        let t = toy();
        let dets = vec![det("dog", BBox::new(0.0, 0.0, 0.3, 0.3), 0.9), det("pizza", BBox::new(0.5, 0.5, 0.9, 0.9), 0.8)];
        let out = filter_copyable(&dets, &HashMap::new(), &t, &FilterConfig::default());
        assert_eq!(out, dets);
    }

    #[test]
    fn filter_drops_overlapping_ancestor() {
        let t = toy();
        let dets = vec![det("animal", BBox::new(0.1, 0.1, 0.5, 0.5), 0.9), det("dog", BBox::new(0.1, 0.1, 0.5, 0.48), 0.7)];
        assert!(dets[0].bbox.iou(&dets[1].bbox) >= 0.9);
        let out = filter_copyable(&dets, &HashMap::new(), &t, &FilterConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].label, "dog");
    }

    #[test]
    fn filter_frequency_and_duplicates() {
        let t = toy();
        let freq = HashMap::from([("cat".to_string(), 500)]);
        let dets = vec![
            det("cat", BBox::new(0.0, 0.0, 0.2, 0.2), 0.99),
            det("dog", BBox::new(0.0, 0.0, 0.2, 0.2), 0.5),
            det("dog", BBox::new(0.5, 0.5, 0.9, 0.9), 0.5),
            det("dog", BBox::new(0.3, 0.3, 0.4, 0.4), 0.4),
        ];
        let out = filter_copyable(&dets, &freq, &t, &FilterConfig::default());
        assert_eq!(out.len(), 1);
        // equal confidence: larger box wins
        assert_eq!(out[0].bbox, BBox::new(0.5, 0.5, 0.9, 0.9));
    }

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 0.5, 0.5);
        assert!((a.iou(&a) - 1.0).abs() < 1e-15);
        assert_eq!(a.iou(&BBox::new(0.6, 0.6, 0.9, 0.9)), 0.0);
        assert!(!BBox::new(0.5, 0.1, 0.4, 0.2).is_valid());
    }
}
