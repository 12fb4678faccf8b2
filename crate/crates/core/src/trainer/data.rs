use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::captioner::{Captioner, CaptionerError, ObjectInputs};
use crate::datakit::{caption_label_counts, dedup_captions, DataError, Dataset, Image, MorphTable, Split, SyntheticCorpus};
use crate::taxonomy::{filter_copyable, FilterConfig, Taxonomy};
use crate::tokens::{tokenize, TokenEvent, Vocabulary};

pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const MORPH_FILE: &str = "morph.json";

/// Every split of a corpus plus its taxonomy and morphology table.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub taxonomy: Taxonomy,
    pub morph: MorphTable,
    pub splits: BTreeMap<Split, Dataset>,
}

pub fn split_file(split: Split) -> String {
    format!("{split}.json")
}

impl Corpus {
    /// Deduplicates each split and keeps the generator's taxonomy and
    /// morphology table.
    pub fn from_synthetic(corpus: SyntheticCorpus) -> Self {
        let mut splits = BTreeMap::new();
        for mut ds in corpus.splits {
            dedup_captions(&mut [&mut ds]);
            splits.insert(ds.split, ds);
        }
        Self { taxonomy: corpus.taxonomy, morph: corpus.morph, splits }
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let taxonomy = Taxonomy::load(&dir.join(TAXONOMY_FILE))?;
        let morph = MorphTable::load(&dir.join(MORPH_FILE))?;
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let path = dir.join(split_file(split));
            if path.exists() {
                splits.insert(split, Dataset::load(&path)?);
            }
        }
        if !splits.contains_key(&Split::Train) {
            return Err(DataError::schema(dir.display().to_string(), format!("missing {}", split_file(Split::Train))));
        }
        Ok(Self { taxonomy, morph, splits })
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        self.taxonomy.save(&dir.join(TAXONOMY_FILE))?;
        self.morph.save(&dir.join(MORPH_FILE))?;
        for (split, ds) in &self.splits {
            ds.save(&dir.join(split_file(*split)))?;
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Option<&Dataset> {
        self.splits.get(&split)
    }

    pub fn train(&self) -> &Dataset {
        &self.splits[&Split::Train]
    }

    /// Label mention counts over the training captions.
    pub fn label_freq(&self) -> HashMap<String, u64> {
        caption_label_counts(self.train(), &self.morph)
    }

    /// Training caption words plus every registered label form.
    pub fn vocabulary(&self) -> Vocabulary {
        let caps = self.train().images.iter().flat_map(|i| i.captions.iter().map(String::as_str));
        Vocabulary::build(caps, self.morph.all_forms())
    }
}

/// One image ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: String,
    pub inputs: ObjectInputs,
    /// Tokenized references.
    pub refs: Vec<Vec<String>>,
    /// Aligned teacher-forcing targets, one per reference, each ending in
    /// the end marker. Empty for evaluation images.
    pub targets: Vec<Vec<TokenEvent>>,
}

impl PreparedImage {
    pub fn retained_labels(&self) -> impl Iterator<Item = &str> {
        self.inputs.copyable.iter().map(|o| o.label.as_str())
    }

    /// Retained labels named by at least one reference.
    pub fn gold_mentions(&self, morph: &MorphTable) -> BTreeSet<String> {
        self.retained_labels().filter(|l| self.refs.iter().any(|r| morph.mentions(l, r))).map(str::to_string).collect()
    }

    /// True when reference `r` names a retained label.
    pub fn is_voa_ref(&self, r: usize, morph: &MorphTable) -> bool {
        self.retained_labels().any(|l| morph.mentions(l, &self.refs[r]))
    }
}

/// Turns a reference into decoding targets. A span matching a retained
/// object's selectable form becomes a copy of that object; longer spans win,
/// then higher confidence. Targets are cut to `max_len` events including the
/// end marker.
pub fn align(model: &Captioner, inputs: &ObjectInputs, tokens: &[String]) -> Result<Vec<TokenEvent>, CaptionerError> {
    let mut order: Vec<usize> = (0..inputs.k_f()).collect();
    order.sort_by(|&a, &b| inputs.copyable[b].confidence.total_cmp(&inputs.copyable[a].confidence).then(a.cmp(&b)));
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut best: Option<(usize, TokenEvent)> = None;
        for &o in &order {
            let obj = &inputs.copyable[o];
            for (j, form) in obj.forms.iter().take(model.form_count(obj)).enumerate() {
                let parts: Vec<&str> = form.split_whitespace().collect();
                let n = parts.len();
                let hit = n > 0 && i + n <= tokens.len() && tokens[i..i + n].iter().zip(&parts).all(|(a, b)| a == b);
                if hit && best.is_none_or(|(len, _)| n > len) {
                    best = Some((n, TokenEvent::Copy { object: o, form: j }));
                }
            }
        }
        match best {
            Some((n, ev)) => {
                out.push(ev);
                i += n;
            }
            None => {
                let id = model.vocab().id(&tokens[i]).ok_or_else(|| CaptionerError::Unrepresentable(tokens[i].clone()))?;
                out.push(TokenEvent::Word(id));
                i += 1;
            }
        }
    }
    let cap = model.config().max_len.max(1) - 1;
    out.truncate(cap);
    out.push(TokenEvent::Word(model.vocab().eos()));
    Ok(out)
}

/// Filters detections, builds model inputs and, when `targets` is set,
/// aligned teacher-forcing targets.
pub fn prepare_image(
    model: &Captioner,
    image: &Image,
    taxonomy: &Taxonomy,
    filter: &FilterConfig,
    freq: &HashMap<String, u64>,
    targets: bool,
) -> Result<PreparedImage, CaptionerError> {
    let mut out = prepare_references(image, taxonomy, model.morph(), filter, freq)?;
    if targets {
        out.targets = out.refs.iter().map(|r| align(model, &out.inputs, r)).collect::<Result<_, _>>()?;
    }
    Ok(out)
}

/// Retained objects and tokenized references of one image, without
/// targets. Needs no model, so scoring can run from data files alone.
pub fn prepare_references(
    image: &Image,
    taxonomy: &Taxonomy,
    morph: &MorphTable,
    filter: &FilterConfig,
    freq: &HashMap<String, u64>,
) -> Result<PreparedImage, CaptionerError> {
    let retained = filter_copyable(&image.copyable, freq, taxonomy, filter);
    let abstract_set = taxonomy.abstract_set();
    let inputs = ObjectInputs::build(&retained, &image.visual, taxonomy, morph, &abstract_set)?;
    let refs: Vec<Vec<String>> = image.captions.iter().map(|c| tokenize(c)).collect();
    Ok(PreparedImage { id: image.id.clone(), inputs, refs, targets: Vec::new() })
}

pub fn prepare_dataset(
    model: &Captioner,
    ds: &Dataset,
    taxonomy: &Taxonomy,
    filter: &FilterConfig,
    freq: &HashMap<String, u64>,
    targets: bool,
) -> Result<Vec<PreparedImage>, CaptionerError> {
    ds.images.iter().map(|img| prepare_image(model, img, taxonomy, filter, freq, targets)).collect()
}

/// Keeps the (image, reference) pairs whose reference names a retained
/// label in any form; images left without references are dropped.
pub fn voa_filter(images: &[PreparedImage], morph: &MorphTable) -> Vec<PreparedImage> {
    images
        .iter()
        .filter_map(|img| {
            let keep: Vec<usize> = (0..img.refs.len()).filter(|&r| img.is_voa_ref(r, morph)).collect();
            if keep.is_empty() {
                return None;
            }
            let mut out = img.clone();
            out.refs = keep.iter().map(|&r| img.refs[r].clone()).collect();
            if !img.targets.is_empty() {
                out.targets = keep.iter().map(|&r| img.targets[r].clone()).collect();
            }
            Some(out)
        })
        .collect()
}

/// Share of references kept by [`voa_filter`].
pub fn voa_fraction(images: &[PreparedImage], morph: &MorphTable) -> f64 {
    let total: usize = images.iter().map(|i| i.refs.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let kept: usize = images.iter().map(|i| (0..i.refs.len()).filter(|&r| i.is_voa_ref(r, morph)).count()).sum();
    kept as f64 / total as f64
}
