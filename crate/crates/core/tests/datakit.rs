use std::collections::{BTreeSet, HashMap, HashSet};

use copycap::datakit::{dedup_captions, generate_synthetic, Dataset, GeneratorConfig, Split, SyntheticCorpus};
use copycap::tokens::tokenize;
use copycap::trainer::{init_model, prepare_corpus, voa_fraction, Corpus, RunConfig};

fn small(train: usize, q: f64) -> GeneratorConfig {
    GeneratorConfig { train_images: train, val_images: 20, mention_prob: q, ..GeneratorConfig::default() }
}

/// Observed and expected naming rates over (reference, object) pairs,
/// counted from the emitted captions alone.
fn mention_rate(corpus: &SyntheticCorpus, split: Split) -> (f64, f64, usize) {
    let cfg = &corpus.config;
    let category: HashMap<&str, f64> = cfg.categories.iter().flat_map(|c| c.labels.iter().map(move |l| (l.as_str(), c.salience))).collect();
    let (mut slots, mut hits, mut expected) = (0, 0, 0.0);
    for img in &corpus.split(split).images {
        let labels: BTreeSet<&str> = img.copyable.iter().map(|d| d.label.as_str()).filter(|l| category.contains_key(*l)).collect();
        for c in &img.captions {
            let toks = tokenize(c);
            for l in &labels {
                slots += 1;
                hits += usize::from(corpus.morph.mentions(l, &toks));
                expected += cfg.mention_prob.powf(category[l]);
            }
        }
    }
    (hits as f64 / slots as f64, expected / slots as f64, slots)
}

#[test]
fn mention_rate_matches_q() {
    for (train, q) in [(2000, 0.4), (600, 0.75)] {
        let corpus = generate_synthetic(&small(train, q)).unwrap();
        let refs: usize = corpus.split(Split::Train).images.iter().map(|i| i.captions.len()).sum();
        assert!(train < 2000 || refs >= 10_000);
        let (rate, expected, slots) = mention_rate(&corpus, Split::Train);
        assert!((rate - expected).abs() <= 0.02, "q {q}: rate {rate} vs {expected} over {slots} slots");
    }
    // Uniform salience makes the rate q itself.
    let mut cfg = small(600, 0.4);
    cfg.categories.iter_mut().for_each(|c| c.salience = 1.0);
    let (rate, _, _) = mention_rate(&generate_synthetic(&cfg).unwrap(), Split::Train);
    assert!((rate - 0.4).abs() <= 0.02, "{rate}");
}

#[test]
fn evaluation_references_are_primed() {
    let corpus = generate_synthetic(&small(100, 0.4)).unwrap();
    let (train, _, _) = mention_rate(&corpus, Split::Train);
    let mut cfg = small(100, 0.4);
    cfg.val_images = 300;
    let corpus = generate_synthetic(&cfg).unwrap();
    let (val, _, _) = mention_rate(&corpus, Split::ValIn);
    assert!(val > train + 0.1, "val {val} train {train}");
}

#[test]
fn saved_corpus_loads_with_generator_counts() {
    let syn = generate_synthetic(&small(100, 0.4)).unwrap();
    let mut expected = Vec::new();
    for ds in &syn.splits {
        let st = &syn.stats[ds.split.as_str()];
        assert_eq!(st.images, ds.images.len());
        assert_eq!(st.captions, ds.images.iter().map(|i| i.captions.len()).sum::<usize>());
        let copyable: usize = ds.images.iter().map(|i| i.copyable.len()).sum();
        assert_eq!(copyable, st.objects + st.persons + st.planted_ancestors + st.planted_duplicates);
        let mut copy = ds.clone();
        let report = dedup_captions(&mut [&mut copy]);
        expected.push((ds.split, st.images - report.dropped_images.len(), st.captions - report.removed_captions));
    }
    let dir = tempfile::tempdir().unwrap();
    Corpus::from_synthetic(syn).save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    for (split, images, captions) in expected {
        let ds = back.split(split).unwrap();
        assert_eq!(ds.images.len(), images, "{split}");
        assert_eq!(ds.images.iter().map(|i| i.captions.len()).sum::<usize>(), captions, "{split}");
    }
}

#[test]
fn planted_duplicates_are_removed_exactly() {
    let syn = generate_synthetic(&small(80, 0.4)).unwrap();
    let mut ds: Dataset = syn.split(Split::Train).clone();
    dedup_captions(&mut [&mut ds]);
    let planted = 17;
    for k in 0..planted {
        let caption = ds.images[k].captions[0].clone();
        let target = ds.images.len() - 1 - k;
        ds.images[target].captions.push(caption);
    }
    let report = dedup_captions(&mut [&mut ds]);
    assert_eq!(report.removed_captions, planted);
    let mut seen = HashSet::new();
    assert!(ds.images.iter().flat_map(|i| &i.captions).all(|c| seen.insert(c.clone())));
}

#[test]
fn split_invariants() {
    let cfg = GeneratorConfig::default();
    let syn = generate_synthetic(&cfg).unwrap();
    assert!(cfg.novel_labels().len() >= 20);
    let train_words: HashSet<String> = syn.split(Split::Train).images.iter().flat_map(|i| i.captions.iter().flat_map(|c| tokenize(c))).collect();
    let novel: HashSet<String> = cfg.novel_labels().into_iter().collect();
    for ds in &syn.splits {
        for img in &ds.images {
            assert!(!img.visual.is_empty(), "{} has no visual detections", img.id);
        }
    }
    for img in &syn.split(Split::ValOut).images {
        let unseen = img.copyable.iter().filter(|d| novel.contains(&d.label)).count();
        assert!(unseen >= 1, "{}", img.id);
        for d in img.copyable.iter().filter(|d| novel.contains(&d.label)) {
            for f in syn.morph.forms_or_base(&d.label) {
                assert!(!train_words.contains(&f), "novel form `{f}` occurs in training references");
            }
        }
    }
    // Every novel label shares its ancestor category with trained labels.
    let trained: HashSet<String> = cfg.trained_labels().into_iter().collect();
    for c in &cfg.categories {
        assert!(c.labels.iter().any(|l| trained.contains(l)) && c.labels.iter().any(|l| novel.contains(l)));
    }
}

#[test]
fn full_mention_keeps_every_reference() {
    let corpus = Corpus::from_synthetic(generate_synthetic(&small(100, 1.0)).unwrap());
    let cfg = RunConfig::default();
    let m = init_model(&corpus, &cfg.model, 0).unwrap();
    let data = prepare_corpus(&corpus, &m, &cfg.filter).unwrap();
    assert_eq!(voa_fraction(&data.train, &data.morph), 1.0);
}

#[test]
fn dedup_leaves_no_repeated_caption_within_a_split() {
    let corpus = Corpus::from_synthetic(generate_synthetic(&small(300, 0.2)).unwrap());
    for split in Split::ALL {
        let mut seen = HashSet::new();
        let ds = corpus.split(split).unwrap();
        assert!(ds.images.iter().flat_map(|i| &i.captions).all(|c| seen.insert(c.clone())), "{split}");
    }
}
