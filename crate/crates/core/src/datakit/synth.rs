//! Synthetic zero-shot captioning corpus.
//!
//! Images are bags of labelled boxes whose ROI vectors are a per-label
//! direction plus colour and multiplicity directions plus Gaussian noise.
//! References name each object by its label with probability
//! `mention_prob ^ salience` of its category and by the category's generic
//! noun otherwise. Evaluation references are primed: each object gets
//! `1 + eval_priming` chances to be named. Held-out labels never occur in
//! training references but share a category (abstract label) with trained
//! ones.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_morph_table, DataError, Dataset, Image, MorphTable, PluralRules, Split};
use crate::taxonomy::{BBox, DetectedObject, Source, Taxonomy, TaxonomyFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    /// Vocabulary noun used when a reference does not name the label.
    pub generic: String,
    pub labels: Vec<String>,
    /// Exponent on `mention_prob`; below 1 names objects more often.
    #[serde(default = "one")]
    pub salience: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub root: String,
    pub categories: Vec<CategorySpec>,
    /// The last `holdout_per_category` labels of each category are novel.
    pub holdout_per_category: usize,
    pub person_labels: Vec<String>,
    pub colors: Vec<String>,
    pub scenes: Vec<String>,
    pub relations: Vec<String>,
    pub openers: Vec<String>,
    pub d_roi: usize,
    pub roi_noise: f64,
    pub mention_prob: f64,
    /// Extra naming chances per object in evaluation references.
    pub eval_priming: f64,
    pub refs_per_image: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub person_prob: f64,
    /// Probabilities of multiplicity 1, 2, 3.
    pub multiplicity: [f64; 3],
    pub scene_prob: f64,
    pub opener_prob: f64,
    pub ancestor_plant_prob: f64,
    pub duplicate_plant_prob: f64,
    pub train_images: usize,
    pub val_images: usize,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let cat = |name: &str, generic: &str, salience: f64, labels: &[&str]| CategorySpec {
            name: name.into(),
            generic: generic.into(),
            labels: strings(labels),
            salience,
        };
        Self {
            seed: 0,
            root: "object".into(),
            categories: vec![
                cat("animal", "creature", 0.25, &["dog", "cat", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "deer"]),
                cat("food", "meal", 0.75, &["apple", "banana", "orange", "sandwich", "pizza", "cake", "carrot", "hamburger", "tomato", "cherry"]),
                cat("vehicle", "machine", 0.4, &["car", "bus", "truck", "bicycle", "motorcycle", "train", "boat", "airplane", "taxi", "tractor"]),
                cat("furniture", "seat", 4.0, &["chair", "couch", "bed", "table", "bench", "desk", "shelf", "stool", "dresser", "cabinet"]),
                cat("instrument", "gadget", 2.0, &["guitar", "piano", "violin", "drum", "trumpet", "flute", "harp", "saxophone", "cello", "banjo"]),
                cat("kitchenware", "utensil", 4.0, &["fork", "spoon", "bowl", "cup", "plate", "bottle", "knife", "kettle", "pan", "mug"]),
                cat("toy", "plaything", 0.55, &["ball", "kite", "doll", "teddy", "frisbee", "puzzle", "robot", "balloon", "yoyo", "rattle"]),
            ],
            holdout_per_category: 4,
            person_labels: strings(&["man", "woman", "person"]),
            colors: strings(&["red", "blue", "green", "black", "white", "brown"]),
            scenes: strings(&["in a park", "in a kitchen", "on a street", "in a room", "on a beach"]),
            relations: strings(&["next to", "near", "beside", "with", "and"]),
            openers: strings(&["a photo of", "a picture of"]),
            d_roi: 32,
            roi_noise: 0.1,
            mention_prob: 0.4,
            eval_priming: 1.0,
            refs_per_image: 5,
            objects_min: 1,
            objects_max: 3,
            person_prob: 0.5,
            multiplicity: [0.6, 0.25, 0.15],
            scene_prob: 0.6,
            opener_prob: 0.3,
            ancestor_plant_prob: 0.2,
            duplicate_plant_prob: 0.2,
            train_images: 2000,
            val_images: 150,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(0.0..=1.0).contains(&self.mention_prob) {
            return bad(format!("mention_prob {} outside [0, 1]", self.mention_prob));
        }
        if self.eval_priming < 0.0 || self.categories.iter().any(|c| c.salience <= 0.0) {
            return bad("eval_priming must be non-negative and every salience positive".into());
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad(format!("objects range {}..={} is empty or starts at 0", self.objects_min, self.objects_max));
        }
        if self.refs_per_image == 0 || self.d_roi == 0 || self.colors.is_empty() || self.relations.is_empty() {
            return bad("refs_per_image, d_roi, colors and relations must be non-empty".into());
        }
        if self.roi_noise < 0.0 || self.multiplicity.iter().any(|&p| p < 0.0) || self.multiplicity.iter().sum::<f64>() <= 0.0 {
            return bad("roi_noise and multiplicity weights must be non-negative".into());
        }
        for c in &self.categories {
            if self.holdout_per_category >= c.labels.len() {
                return bad(format!("category `{}` would have no trained labels", c.name));
            }
            if self.objects_max > self.holdout_per_category.min(c.labels.len() - self.holdout_per_category) * self.categories.len() {
                return bad("too few labels for objects_max distinct objects".into());
            }
        }
        Ok(())
    }

    /// Probability that one reference names an object of category `c`.
    pub fn naming_prob(&self, c: usize, split: Split) -> f64 {
        let p = self.mention_prob.powf(self.categories[c].salience);
        if split == Split::Train {
            p
        } else {
            1.0 - (1.0 - p).powf(1.0 + self.eval_priming)
        }
    }

    pub fn trained_labels(&self) -> Vec<String> {
        self.categories
            .iter()
            .flat_map(|c| c.labels[..c.labels.len() - self.holdout_per_category].iter().cloned())
            .collect()
    }

    pub fn novel_labels(&self) -> Vec<String> {
        self.categories
            .iter()
            .flat_map(|c| c.labels[c.labels.len() - self.holdout_per_category..].iter().cloned())
            .collect()
    }

    pub fn object_labels(&self) -> Vec<String> {
        self.categories.iter().flat_map(|c| c.labels.iter().cloned()).collect()
    }

    pub fn taxonomy(&self) -> Result<Taxonomy, DataError> {
        let mut nodes = vec![self.root.clone()];
        let mut parent = BTreeMap::new();
        for c in &self.categories {
            nodes.push(c.name.clone());
            parent.insert(c.name.clone(), self.root.clone());
            for l in &c.labels {
                nodes.push(l.clone());
                parent.insert(l.clone(), c.name.clone());
            }
        }
        for p in &self.person_labels {
            nodes.push(p.clone());
            parent.insert(p.clone(), self.root.clone());
        }
        let abstract_set = std::iter::once(self.root.clone()).chain(self.categories.iter().map(|c| c.name.clone())).collect();
        Ok(Taxonomy::from_file(&TaxonomyFile { nodes, parent, abstract_set })?)
    }

    /// Label forms plus generic nouns, with their plurals.
    pub fn morph_table(&self) -> MorphTable {
        let rules = PluralRules::default();
        let labels = self.object_labels();
        let mut names: Vec<&str> = labels.iter().map(String::as_str).collect();
        names.extend(self.person_labels.iter().map(String::as_str));
        names.extend(self.categories.iter().map(|c| c.name.as_str()));
        build_morph_table(names, &rules)
    }
}

/// Per-split bookkeeping written next to the generated files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub images: usize,
    pub captions: usize,
    /// Distinct non-person objects placed in images.
    pub objects: usize,
    /// (reference, object) pairs, and how many of them name the label.
    pub mention_slots: usize,
    pub mentions: usize,
    pub planted_ancestors: usize,
    pub planted_duplicates: usize,
    pub persons: usize,
    /// Expected share of references naming at least one object.
    pub expected_voa_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: GeneratorConfig,
    pub taxonomy: Taxonomy,
    pub morph: MorphTable,
    pub splits: Vec<Dataset>,
    pub stats: BTreeMap<String, SplitStats>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> &Dataset {
        self.splits.iter().find(|d| d.split == split).expect("all splits generated")
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Dataset {
        self.splits.iter_mut().find(|d| d.split == split).expect("all splits generated")
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Directions {
    dim: usize,
    seed: u64,
    cache: HashMap<String, Vec<f64>>,
}

impl Directions {
    fn unit(&mut self, key: &str) -> Vec<f64> {
        let (dim, seed) = (self.dim, self.seed);
        self.cache
            .entry(key.to_string())
            .or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let normal = Normal::new(0.0, 1.0).expect("valid normal");
                let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / n).collect()
            })
            .clone()
    }
}

const LABEL_WEIGHT: f64 = 2.0;
const ATTR_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone)]
struct Planted {
    label: String,
    category: usize,
    color: usize,
    count: usize,
    bbox: BBox,
}

struct Generator<'a> {
    cfg: &'a GeneratorConfig,
    dirs: Directions,
    morph: MorphTable,
    rules: PluralRules,
    normal: Normal<f64>,
}

impl Generator<'_> {
    fn roi(&mut self, parts: &[(&str, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = vec![0.0; self.cfg.d_roi];
        for &(key, w) in parts {
            for (a, b) in v.iter_mut().zip(self.dirs.unit(key)) {
                *a += w * b;
            }
        }
        for a in &mut v {
            *a += self.cfg.roi_noise * self.normal.sample(rng);
        }
        v
    }

    fn object_roi(&mut self, p: &Planted, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let color = format!("color:{}", self.cfg.colors[p.color]);
        let count = format!("count:{}", p.count);
        let label = format!("label:{}", p.label);
        self.roi(&[(&label, LABEL_WEIGHT), (&color, ATTR_WEIGHT), (&count, ATTR_WEIGHT)], rng)
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        let w = rng.gen_range(0.15..0.5);
        let h = rng.gen_range(0.15..0.5);
        let x1 = rng.gen_range(0.0..1.0 - w);
        let y1 = rng.gen_range(0.0..1.0 - h);
        BBox::new(x1, y1, x1 + w, y1 + h)
    }

    /// A box overlapping `b` with IoU well above 0.5.
    fn jitter(b: &BBox, rng: &mut ChaCha8Rng) -> BBox {
        let dx = b.width() * rng.gen_range(-0.05..0.05);
        let dy = b.height() * rng.gen_range(-0.05..0.05);
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        BBox::new(clamp(b.x1 + dx), clamp(b.y1 + dy), clamp(b.x2 + dx), clamp(b.y2 + dy))
    }

    fn noun(&self, label: &str, count: usize) -> String {
        // Generic nouns are not copyable labels but still inflect.
        let forms = self.morph.forms(label).map_or_else(|| self.rules.forms(label), <[String]>::to_vec);
        if count > 1 && forms.len() > 1 {
            forms[1].clone()
        } else {
            forms[0].clone()
        }
    }

    fn count_word(count: usize) -> &'static str {
        match count {
            1 => "a",
            2 => "two",
            _ => "three",
        }
    }

    fn sample_labels(&self, split: Split, n: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
        let k = self.cfg.holdout_per_category;
        let pool = |novel: bool| -> Vec<(String, usize)> {
            self.cfg
                .categories
                .iter()
                .enumerate()
                .flat_map(|(ci, c)| {
                    let cut = c.labels.len() - k;
                    let slice = if novel { &c.labels[cut..] } else { &c.labels[..cut] };
                    slice.iter().map(move |l| (l.clone(), ci))
                })
                .collect()
        };
        let (trained, novel) = (pool(false), pool(true));
        let mut picked: Vec<(String, usize)> = match split {
            Split::Train | Split::ValIn => trained.choose_multiple(rng, n).cloned().collect(),
            Split::ValOut => novel.choose_multiple(rng, n).cloned().collect(),
            Split::ValNear => {
                let mut v: Vec<(String, usize)> = novel.choose_multiple(rng, 1).cloned().collect();
                v.extend(trained.choose_multiple(rng, n - 1).cloned());
                v
            }
        };
        picked.shuffle(rng);
        picked
    }

    fn image(&mut self, split: Split, index: usize, stats: &mut SplitStats) -> Image {
        let cfg = self.cfg;
        let seed = cfg.seed ^ fnv1a(&format!("{split}/{index}"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(cfg.objects_min..=cfg.objects_max);
        let mult_total: f64 = cfg.multiplicity.iter().sum();
        let objects: Vec<Planted> = self
            .sample_labels(split, n, &mut rng)
            .into_iter()
            .map(|(label, category)| {
                let u = rng.gen::<f64>() * mult_total;
                let count = if u < cfg.multiplicity[0] {
                    1
                } else if u < cfg.multiplicity[0] + cfg.multiplicity[1] {
                    2
                } else {
                    3
                };
                Planted { label, category, color: rng.gen_range(0..cfg.colors.len()), count, bbox: Self::random_box(&mut rng) }
            })
            .collect();
        let person = (!cfg.person_labels.is_empty() && rng.gen_bool(cfg.person_prob))
            .then(|| (cfg.person_labels[rng.gen_range(0..cfg.person_labels.len())].clone(), Self::random_box(&mut rng)));
        let scene = (!cfg.scenes.is_empty()).then(|| rng.gen_range(0..cfg.scenes.len()));

        let mut copyable = Vec::new();
        let mut visual = Vec::new();
        for p in &objects {
            let conf = rng.gen_range(0.6..1.0);
            let roi = self.object_roi(p, &mut rng);
            copyable.push(DetectedObject { label: p.label.clone(), bbox: p.bbox, confidence: conf, roi, source: Source::Copyable });
            let roi = self.object_roi(p, &mut rng);
            visual.push(DetectedObject { label: String::new(), bbox: p.bbox, confidence: conf, roi, source: Source::Visual });
        }
        if let Some((label, bbox)) = &person {
            let roi = self.roi(&[(&format!("label:{label}"), LABEL_WEIGHT)], &mut rng);
            let conf = rng.gen_range(0.6..1.0);
            copyable.push(DetectedObject { label: label.clone(), bbox: *bbox, confidence: conf, roi: roi.clone(), source: Source::Copyable });
            visual.push(DetectedObject { label: String::new(), bbox: *bbox, confidence: conf, roi, source: Source::Visual });
            stats.persons += 1;
        }
        if rng.gen_bool(cfg.ancestor_plant_prob) {
            let p = &objects[rng.gen_range(0..objects.len())];
            let bbox = Self::jitter(&p.bbox, &mut rng);
            let roi = self.object_roi(p, &mut rng);
            let label = cfg.categories[p.category].name.clone();
            copyable.push(DetectedObject { label, bbox, confidence: rng.gen_range(0.3..0.9), roi, source: Source::Copyable });
            stats.planted_ancestors += 1;
        }
        if rng.gen_bool(cfg.duplicate_plant_prob) {
            let i = rng.gen_range(0..objects.len());
            let p = &objects[i];
            let roi = self.object_roi(p, &mut rng);
            let confidence = copyable[i].confidence * rng.gen_range(0.3..0.9);
            let bbox = Self::random_box(&mut rng);
            copyable.push(DetectedObject { label: p.label.clone(), bbox, confidence, roi, source: Source::Copyable });
            stats.planted_duplicates += 1;
        }
        if let Some(s) = scene {
            let roi = self.roi(&[(&format!("scene:{}", cfg.scenes[s]), LABEL_WEIGHT)], &mut rng);
            visual.push(DetectedObject {
                label: String::new(),
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                confidence: 1.0,
                roi,
                source: Source::Visual,
            });
        }

        let mut captions = Vec::with_capacity(cfg.refs_per_image);
        for _ in 0..cfg.refs_per_image {
            let mut phrases: Vec<String> = Vec::new();
            for p in &objects {
                stats.mention_slots += 1;
                let named = rng.gen_bool(cfg.naming_prob(p.category, split));
                stats.mentions += usize::from(named);
                let noun = if named { self.noun(&p.label, p.count) } else { self.noun(&cfg.categories[p.category].generic, p.count) };
                phrases.push(format!("{} {} {}", Self::count_word(p.count), cfg.colors[p.color], noun));
            }
            if let Some((label, _)) = &person {
                phrases.push(format!("a {label}"));
            }
            phrases.shuffle(&mut rng);
            let mut words: Vec<String> = Vec::new();
            if !cfg.openers.is_empty() && rng.gen_bool(cfg.opener_prob) {
                words.push(cfg.openers[rng.gen_range(0..cfg.openers.len())].clone());
            }
            for (j, ph) in phrases.into_iter().enumerate() {
                if j > 0 {
                    words.push(cfg.relations[rng.gen_range(0..cfg.relations.len())].clone());
                }
                words.push(ph);
            }
            if let Some(s) = scene {
                if rng.gen_bool(cfg.scene_prob) {
                    words.push(cfg.scenes[s].clone());
                }
            }
            captions.push(words.join(" "));
        }
        stats.objects += objects.len();
        stats.expected_voa_fraction += 1.0 - objects.iter().map(|p| 1.0 - cfg.naming_prob(p.category, split)).product::<f64>();
        Image { id: format!("{split}-{index:05}"), copyable, visual, captions }
    }
}

pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<SyntheticCorpus, DataError> {
    cfg.validate()?;
    let taxonomy = cfg.taxonomy()?;
    let morph = cfg.morph_table();
    let mut gen = Generator {
        cfg,
        dirs: Directions { dim: cfg.d_roi, seed: cfg.seed, cache: HashMap::new() },
        morph: morph.clone(),
        rules: PluralRules::default(),
        normal: Normal::new(0.0, 1.0).expect("valid normal"),
    };
    let mut splits = Vec::new();
    let mut stats = BTreeMap::new();
    for split in Split::ALL {
        let n = if split == Split::Train { cfg.train_images } else { cfg.val_images };
        let mut st = SplitStats::default();
        let images: Vec<Image> = (0..n).map(|i| gen.image(split, i, &mut st)).collect();
        st.images = images.len();
        st.captions = images.iter().map(|i| i.captions.len()).sum();
        if n > 0 {
            st.expected_voa_fraction /= n as f64;
        }
        stats.insert(split.as_str().to_string(), st);
        splits.push(Dataset { split, images });
    }
    Ok(SyntheticCorpus { config: cfg.clone(), taxonomy, morph, splits, stats })
}
