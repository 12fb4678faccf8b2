use std::collections::{BTreeSet, HashMap, HashSet};

use copycap::datakit::{build_morph_table, PluralRules};
use copycap::decoder::{DecodeRecord, Provenance, RankedCaption, TokenRecord};
use copycap::metrics::{avg_objects, cider_d, evaluate_split, object_cider, object_f1, CorpusStats, MetricError};
use proptest::prelude::*;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn corpus(raw: &[&[&str]]) -> Vec<Vec<Vec<String>>> {
    raw.iter().map(|refs| refs.iter().map(|r| toks(r)).collect()).collect()
}

/// The CIDEr-D formula evaluated step by step with plain lists.
fn spreadsheet(cand: &[String], refs: &[Vec<String>], corpus: &[Vec<Vec<String>>]) -> f64 {
    let m = corpus.len() as f64;
    let ngrams = |t: &[String], n: usize| -> Vec<Vec<String>> { if t.len() < n { vec![] } else { t.windows(n).map(|w| w.to_vec()).collect() } };
    let df = |g: &Vec<String>| -> f64 {
        let n = g.len();
        corpus.iter().filter(|img| img.iter().any(|r| ngrams(r, n).contains(g))).count() as f64
    };
    let tfidf = |t: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        let gs = ngrams(t, n);
        let mut uniq: Vec<Vec<String>> = gs.clone();
        uniq.sort();
        uniq.dedup();
        uniq.into_iter().map(|g| {
            let tf = gs.iter().filter(|x| **x == g).count() as f64;
            let idf = (m / df(&g).max(1.0)).ln();
            (g, tf * idf)
        }).collect()
    };
    let mut sum = 0.0;
    for r in refs {
        let pen = (-((cand.len() as f64 - r.len() as f64).powi(2)) / 72.0).exp();
        for n in 1..=4 {
            let c = tfidf(cand, n);
            let rv = tfidf(r, n);
            let nc = c.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
            let nr = rv.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (g, cvv) in &c {
                if let Some((_, rvv)) = rv.iter().find(|(h, _)| h == g) {
                    dot += cvv.min(*rvv) * rvv;
                }
            }
            sum += dot / (nc * nr) * pen;
        }
    }
    sum / 4.0 / refs.len() as f64 * 10.0
}

#[test]
fn idf_examples() {
    let one = corpus(&[&["a dog"]]);
    let s = CorpusStats::build(&one).unwrap();
    assert_eq!(s.idf(&toks("dog")), 0.0);
    let two = corpus(&[&["a dog", "a cat"], &["a bus"]]);
    let s = CorpusStats::build(&two).unwrap();
    assert!((s.idf(&toks("dog")) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(s.idf(&toks("a")), 0.0);
    assert_eq!(s.df(&toks("zebra")), 0);
    assert!((s.idf(&toks("zebra")) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(CorpusStats::build(&[]), Err(MetricError::EmptyCorpus));
    assert_eq!(CorpusStats::build(&[vec![]]), Err(MetricError::NoReferences(0)));
}

fn random_corpus(rng: &mut ChaCha8Rng, images: usize) -> Vec<Vec<Vec<String>>> {
    let words = ["a", "dog", "cat", "on", "the", "red", "mat", "two"];
    (0..images)
        .map(|_| (0..rng.gen_range(1..4)).map(|_| (0..rng.gen_range(1..7)).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect()).collect())
        .collect()
}

#[test]
fn df_table_equals_per_image_set_scan() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_corpus(&mut rng, 5);
        let s = CorpusStats::build(&c).unwrap();
        let mut all: HashSet<Vec<String>> = HashSet::new();
        let mut expect: HashMap<Vec<String>, usize> = HashMap::new();
        for img in &c {
            let mut set = HashSet::new();
            for r in img {
                for n in 1..=4 {
                    for i in 0..r.len().saturating_sub(n - 1) {
                        set.insert(r[i..i + n].to_vec());
                    }
                }
            }
            for g in set {
                all.insert(g.clone());
                *expect.entry(g).or_default() += 1;
            }
        }
        for g in all {
            assert_eq!(s.df(&g), expect[&g]);
            assert!(s.df(&g) <= 5);
        }
    }
}

#[test]
fn hand_computed_value() {
    // Every unigram and bigram of "a b" has idf ln 2, the candidate equals
    // the reference, so orders 1 and 2 contribute cosine 1 each.
    let c = corpus(&[&["a b"], &["c"]]);
    let s = CorpusStats::build(&c).unwrap();
    assert!((cider_d(&toks("a b"), &c[0], &s) - 5.0).abs() < 1e-12);
}

#[test]
fn matches_spreadsheet_on_toy_corpora() {
    let c = corpus(&[
        &["a dog on a mat", "the dog sits on the mat"],
        &["two cats on a red mat", "a cat on a mat"],
        &["a red bus", "the red bus on the road"],
    ]);
    let s = CorpusStats::build(&c).unwrap();
    for (i, cand) in ["a dog on the mat", "a cat on a red mat", "red bus", "the the the", "a dog on a mat"].iter().enumerate() {
        let img = i % 3;
        let got = cider_d(&toks(cand), &c[img], &s);
        let want = spreadsheet(&toks(cand), &c[img], &c);
        assert!((got - want).abs() < 1e-9, "{cand}: {got} vs {want}");
    }
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let c = random_corpus(&mut rng, 4);
        let s = CorpusStats::build(&c).unwrap();
        let cand = random_corpus(&mut rng, 1)[0][0].clone();
        let got = cider_d(&cand, &c[1], &s);
        assert!((got - spreadsheet(&cand, &c[1], &c)).abs() < 1e-9);
    }
}

#[test]
fn disjoint_candidate_and_empty_candidate_score_zero() {
    let c = corpus(&[&["a dog"], &["a cat"]]);
    let s = CorpusStats::build(&c).unwrap();
    assert_eq!(cider_d(&toks("zebra stripes"), &c[0], &s), 0.0);
    assert_eq!(cider_d(&[], &c[0], &s), 0.0);
}

#[test]
fn sole_reference_is_the_best_candidate() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let mut c = random_corpus(&mut rng, 4);
        c[0].truncate(1);
        let s = CorpusStats::build(&c).unwrap();
        let best = cider_d(&c[0][0], &c[0], &s);
        for _ in 0..30 {
            let other = random_corpus(&mut rng, 1)[0][0].clone();
            assert!(cider_d(&other, &c[0], &s) <= best + 1e-12);
        }
    }
}

fn record(id: &str, tokens: &[(&str, Option<usize>)]) -> DecodeRecord {
    let tokens: Vec<TokenRecord> = tokens
        .iter()
        .map(|(w, copy)| TokenRecord {
            word: w.to_string(),
            source: match copy {
                Some(o) => Provenance::Copy { object: *o, form: 0, label: w.to_string() },
                None => Provenance::Vocab,
            },
        })
        .collect();
    let text = tokens.iter().map(|t| t.word.as_str()).collect::<Vec<_>>().join(" ");
    DecodeRecord { image_id: id.into(), captions: vec![RankedCaption { text, score: 0.0, tokens }] }
}

#[test]
fn object_cider_examples() {
    let c = corpus(&[&["dog", "a dog on a mat"], &["a cat and a bus"], &["a red bus"]]);
    let s = CorpusStats::build(&c).unwrap();
    let none = vec![record("0", &[("a", None)]), record("1", &[("a", None)]), record("2", &[("bus", None)])];
    assert_eq!(object_cider(&none, &c, &s).unwrap(), 0.0);

    let recs = vec![
        record("0", &[("a", None), ("dog", Some(0))]),
        record("1", &[("a", None), ("cat", Some(0)), ("and", None), ("a", None), ("bus", Some(1))]),
        record("2", &[("a", None), ("red", None), ("car", None)]),
    ];
    let manual = (cider_d(&toks("dog"), &c[0], &s) + cider_d(&toks("cat bus"), &c[1], &s) + 0.0) / 3.0;
    assert!((object_cider(&recs, &c, &s).unwrap() - manual).abs() < 1e-12);
    assert!(cider_d(&toks("dog"), &c[0], &s) > 0.0);
    assert!((object_cider(&recs[..1], &c[..1], &s).unwrap() - cider_d(&toks("dog"), &c[0], &s)).abs() < 1e-12);
}

#[test]
fn avg_objects_examples() {
    assert_eq!(avg_objects(&[record("0", &[("a", None)])]), 0.0);
    let recs = vec![
        record("0", &[("dog", Some(0))]),
        record("1", &[("dog", Some(0)), ("cat", Some(1))]),
        record("2", &[("dog", Some(0)), ("cat", Some(1)), ("bus", Some(2))]),
    ];
    assert_eq!(avg_objects(&recs), 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0;
    let batch: Vec<DecodeRecord> = (0..50)
        .map(|i| {
            let k = rng.gen_range(0..5);
            total += k;
            let toks: Vec<(&str, Option<usize>)> = (0..8).map(|j| if j < k { ("dog", Some(j)) } else { ("a", None) }).collect();
            record(&i.to_string(), &toks)
        })
        .collect();
    assert!((avg_objects(&batch) - total as f64 / 50.0).abs() < 1e-12);
}

#[test]
fn object_f1_examples_and_count_oracle() {
    let labels = ["dog", "bus", "teddy bear", "mouse"];
    let morph = build_morph_table(labels, &PluralRules::default());
    let gold: Vec<BTreeSet<String>> = vec![["dog".to_string()].into(), ["bus".to_string(), "teddy bear".to_string()].into()];
    let perfect = vec![toks("two dogs"), toks("a teddy bear on a bus")];
    assert_eq!(object_f1(&perfect, &gold, &morph).unwrap(), 1.0);
    assert_eq!(object_f1(&[toks("a cat"), toks("a car")], &gold, &morph).unwrap(), 0.0);

    let vocab = ["a", "dog", "dogs", "bus", "buses", "teddy", "bear", "bears", "mice", "on"];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let n = rng.gen_range(1..6);
        let caps: Vec<Vec<String>> = (0..n).map(|_| (0..rng.gen_range(1..8)).map(|_| vocab.choose(&mut rng).unwrap().to_string()).collect()).collect();
        let gold: Vec<BTreeSet<String>> = (0..n).map(|_| labels.iter().filter(|_| rng.gen_bool(0.4)).map(|s| s.to_string()).collect()).collect();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (c, g) in caps.iter().zip(&gold) {
            let joined = format!(" {} ", c.join(" "));
            let said = |l: &str| morph.forms(l).unwrap().iter().any(|f| joined.contains(&format!(" {f} ")));
            for l in labels {
                match (said(l), g.contains(l)) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
        }
        let want = if tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        assert!((object_f1(&caps, &gold, &morph).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn split_report_aggregates_rows() {
    let c = corpus(&[&["a dog on a mat"], &["a red bus"]]);
    let recs = vec![record("0", &[("a", None), ("dog", Some(0))]), record("1", &[("a", None), ("red", None), ("bus", Some(0))])];
    let morph = build_morph_table(["dog", "bus"], &PluralRules::default());
    let gold: Vec<BTreeSet<String>> = vec![["dog".to_string()].into(), ["bus".to_string()].into()];
    let r = evaluate_split("val-out", &recs, &c, &gold, &morph).unwrap();
    let s = CorpusStats::build(&c).unwrap();
    let mean = (cider_d(&toks("a dog"), &c[0], &s) + cider_d(&toks("a red bus"), &c[1], &s)) / 2.0;
    assert!((r.cider_d - mean).abs() < 1e-12);
    assert_eq!(r.object_f1, 1.0);
    assert_eq!(r.avg_objects, 1.0);
    assert_eq!(r.rows.len(), 2);
}

fn arb_corpus() -> impl Strategy<Value = (Vec<Vec<Vec<String>>>, Vec<String>)> {
    let word = prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(str::to_string);
    let cap = prop::collection::vec(word.clone(), 1..8);
    (prop::collection::vec(prop::collection::vec(cap.clone(), 1..4), 1..5), prop::collection::vec(word, 0..8))
}

proptest! {
    #[test]
    fn score_is_bounded_and_reference_order_free((c, cand) in arb_corpus(), seed in 0u64..1000) {
        let s = CorpusStats::build(&c).unwrap();
        let v = cider_d(&cand, &c[0], &s);
        prop_assert!((0.0..=10.0 + 1e-9).contains(&v));
        let mut refs = c[0].clone();
        refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((cider_d(&cand, &refs, &s) - v).abs() < 1e-12);
    }

    #[test]
    fn score_is_invariant_to_token_renaming((c, cand) in arb_corpus()) {
        let rename = |t: &Vec<String>| -> Vec<String> { t.iter().map(|w| format!("w{}", w.as_bytes()[0] as u32 * 7)).collect() };
        let c2: Vec<Vec<Vec<String>>> = c.iter().map(|img| img.iter().map(rename).collect()).collect();
        let s = CorpusStats::build(&c).unwrap();
        let s2 = CorpusStats::build(&c2).unwrap();
        prop_assert!((cider_d(&cand, &c[0], &s) - cider_d(&rename(&cand), &c2[0], &s2)).abs() < 1e-12);
    }
}
