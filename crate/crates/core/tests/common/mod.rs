#![allow(dead_code)]

use copycap::captioner::{positional_features, Captioner, CopyObject, ModelConfig, MorphMode, ObjectInputs, VisualObject};
use copycap::datakit::{build_morph_table, MorphTable, PluralRules};
use copycap::taxonomy::BBox;
use copycap::tokens::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LABELS: [&str; 5] = ["dog", "bus", "deer", "cake", "mouse"];

pub fn morph() -> MorphTable {
    let mut m = build_morph_table(LABELS, &PluralRules::default());
    m.insert("tri", vec!["tri".into(), "tris".into(), "trii".into()]);
    m
}

pub fn vocab(morph: &MorphTable) -> Vocabulary {
    Vocabulary::build(["a red dog near two blue buses", "three cakes in a park"], morph.all_forms())
}

pub fn tiny_config(d: usize, heads: usize) -> ModelConfig {
    ModelConfig { d, n_enc: 1, n_dec: 1, ffn: 2 * d, heads, d_roi: 6, max_len: 12, dropout: 0.1, ..ModelConfig::default() }
}

pub fn model(cfg: ModelConfig) -> Captioner {
    let m = morph();
    let v = vocab(&m);
    Captioner::new(cfg, v, m, vec!["object".into(), "animal".into(), "food".into()]).unwrap()
}

pub fn random_inputs(rng: &mut ChaCha8Rng, d_roi: usize, labels: &[&str], k_g: usize, morph: &MorphTable) -> ObjectInputs {
    let bbox = |rng: &mut ChaCha8Rng| {
        let x1 = rng.gen_range(0.0..0.5);
        let y1 = rng.gen_range(0.0..0.5);
        BBox::new(x1, y1, x1 + rng.gen_range(0.1..0.5), y1 + rng.gen_range(0.1..0.5))
    };
    let copyable = labels
        .iter()
        .map(|l| {
            let conf = rng.gen_range(0.5..1.0);
            CopyObject {
                label: l.to_string(),
                forms: morph.forms_or_base(l),
                abstract_index: rng.gen_range(0..3),
                confidence: conf,
                roi: (0..d_roi).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                pos: positional_features(&bbox(rng), conf),
            }
        })
        .collect();
    let visual = (0..k_g)
        .map(|_| VisualObject { roi: (0..d_roi).map(|_| rng.gen_range(-1.0..1.0)).collect(), pos: positional_features(&bbox(rng), 0.8) })
        .collect();
    ObjectInputs { copyable, visual }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn with_morph(mut cfg: ModelConfig, mode: MorphMode) -> ModelConfig {
    cfg.morph = mode;
    cfg
}
