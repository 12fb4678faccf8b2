//! Shared fixtures for the criterion benchmarks.

use copycap::captioner::Captioner;
use copycap::datakit::{generate_synthetic, GeneratorConfig, Split};
use copycap::trainer::{init_model, prepare_corpus, Corpus, PreparedCorpus, RunConfig};

/// A desk-profile model with a small synthetic corpus prepared for it.
pub struct Fixture {
    pub model: Captioner,
    pub data: PreparedCorpus,
}

impl Fixture {
    pub fn new(train_images: usize) -> Self {
        let gen = GeneratorConfig { train_images, val_images: 20, ..GeneratorConfig::default() };
        let corpus = Corpus::from_synthetic(generate_synthetic(&gen).expect("default generator config is valid"));
        let cfg = RunConfig::default();
        let model = init_model(&corpus, &cfg.model, 0).expect("desk model builds");
        let data = prepare_corpus(&corpus, &model, &cfg.filter).expect("corpus aligns with its own vocabulary");
        Self { model, data }
    }

    pub fn val_out(&self) -> &[copycap::trainer::PreparedImage] {
        &self.data.val.iter().find(|(s, _)| *s == Split::ValOut).expect("corpus has val-out").1
    }
}
