use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{prepare_dataset, voa_filter, Corpus, PreparedImage};
use super::optim::{clip_gradients, lr_schedule_ce, Adam, AdamConfig, ClipMode, Plateau};
use super::reward::RewardConfig;
use super::scst::{scst_step, Baseline, CaptionPolicy};
use super::TrainError;
use crate::captioner::{Captioner, ModelConfig};
use crate::datakit::{MorphTable, Split};
use crate::decoder::{decode_image, greedy, render, DecodeConfig, DecodeRecord};
use crate::metrics::{evaluate_split, CorpusStats, SplitReport};
use crate::numcore::{Graph, ParamGrads};
use crate::taxonomy::FilterConfig;
use crate::tokens::TokenEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ce,
    Scst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CeConfig {
    pub epochs: usize,
    /// Images per update; each contributes all of its references.
    pub batch_size: usize,
    /// Warmup steps. When absent, the full-scale warmup is rescaled by the
    /// ratio of steps per epoch.
    pub warmup: Option<usize>,
    pub reference_warmup: usize,
    pub reference_steps_per_epoch: usize,
}

/// The default is the short synthetic-corpus schedule. Its warmup is set
/// explicitly because the rescaled one would outlast the whole run.
impl Default for CeConfig {
    fn default() -> Self {
        Self { epochs: 6, batch_size: 10, warmup: Some(400), reference_warmup: 20_000, reference_steps_per_epoch: 1_180 }
    }
}

impl CeConfig {
    pub fn full_scale() -> Self {
        Self { epochs: 15, batch_size: 100, warmup: None, ..Self::default() }
    }

    pub fn warmup_for(&self, steps_per_epoch: usize) -> usize {
        self.warmup.unwrap_or_else(|| {
            let w = self.reference_warmup as f64 * steps_per_epoch as f64 / self.reference_steps_per_epoch.max(1) as f64;
            (w.round() as usize).max(1)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScstConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub floor: f64,
    /// Updates between plateau evaluations.
    pub eval_every: usize,
    /// Images per validation split used by plateau evaluations.
    pub eval_images: usize,
    pub baseline: Baseline,
    pub decode: DecodeConfig,
}

/// The default is the short synthetic-corpus schedule with a larger step.
impl Default for ScstConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 10,
            lr: 5e-5,
            patience: 3,
            floor: 1e-9,
            eval_every: 100,
            eval_images: 30,
            baseline: Baseline::Greedy,
            decode: DecodeConfig::scst(),
        }
    }
}

impl ScstConfig {
    pub fn full_scale() -> Self {
        Self { epochs: 15, lr: 1e-6, eval_every: 3000, eval_images: 1000, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    pub clip: f64,
    pub clip_mode: ClipMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), clip: 0.1, clip_mode: ClipMode::Norm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Evaluate every validation split after training.
    pub enabled: bool,
    /// Per-split image cap.
    pub images: Option<usize>,
    pub decode: DecodeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { enabled: true, images: None, decode: DecodeConfig::default() }
    }
}

/// One training run. The run seed also seeds model initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub filter: FilterConfig,
    pub ce: CeConfig,
    pub scst: ScstConfig,
    pub reward: RewardConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Ce,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/ce"),
            init_checkpoint: None,
            model: ModelConfig::desk(),
            filter: FilterConfig { freq_threshold: 1000, overlap_threshold: 0.5 },
            ce: CeConfig::default(),
            scst: ScstConfig::default(),
            reward: RewardConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Model size and schedules of the full-scale setting.
    pub fn full_scale() -> Self {
        Self {
            model: ModelConfig::default(),
            filter: FilterConfig::default(),
            ce: CeConfig::full_scale(),
            scst: ScstConfig::full_scale(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: String,
    pub cider_d: f64,
    pub object_f1: f64,
    pub object_cider: f64,
    pub avg_objects: f64,
}

impl From<&SplitReport> for EvalRow {
    fn from(r: &SplitReport) -> Self {
        Self { split: r.split.clone(), cider_d: r.cider_d, object_f1: r.object_f1, object_cider: r.object_cider, avg_objects: r.avg_objects }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_cider: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub eval: Vec<EvalRow>,
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("log serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Fresh model for a corpus: vocabulary from the training captions and
/// label forms, abstract rows from the taxonomy.
pub fn init_model(corpus: &Corpus, model: &ModelConfig, seed: u64) -> Result<Captioner, TrainError> {
    let cfg = ModelConfig { seed, ..model.clone() };
    Ok(Captioner::new(cfg, corpus.vocabulary(), corpus.morph.clone(), corpus.taxonomy.abstract_set())?)
}

/// Training and validation images prepared for one model.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub train: Vec<PreparedImage>,
    pub val: Vec<(Split, Vec<PreparedImage>)>,
    pub morph: MorphTable,
}

pub fn prepare_corpus(corpus: &Corpus, model: &Captioner, filter: &FilterConfig) -> Result<PreparedCorpus, TrainError> {
    let freq = corpus.label_freq();
    let train = prepare_dataset(model, corpus.train(), &corpus.taxonomy, filter, &freq, true)?;
    let mut val = Vec::new();
    for split in Split::EVAL {
        if let Some(ds) = corpus.split(split) {
            val.push((split, prepare_dataset(model, ds, &corpus.taxonomy, filter, &freq, false)?));
        }
    }
    Ok(PreparedCorpus { train, val, morph: corpus.morph.clone() })
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ b.wrapping_mul(0x94D0_49BB_1331_11EB)
}

fn sum_ordered(parts: Vec<(f64, usize, ParamGrads)>, n_params: usize) -> (f64, usize, ParamGrads) {
    let mut grads = ParamGrads::new(n_params);
    let (mut loss, mut count) = (0.0, 0);
    for (l, c, g) in parts {
        loss += l;
        count += c;
        grads.merge(&g);
    }
    (loss, count, grads)
}

/// Mean cross-entropy per decoding step over every reference of every image
/// in the batch, with its gradient. `dropout_seed` enables training mode.
pub fn ce_step(model: &Captioner, batch: &[&PreparedImage], dropout_seed: Option<u64>) -> Result<(f64, ParamGrads), TrainError> {
    let parts = batch
        .par_iter()
        .enumerate()
        .filter(|(_, img)| !img.targets.is_empty())
        .map(|(k, img)| {
            let mut g = Graph::with_params(model.params());
            if let Some(s) = dropout_seed {
                g = g.train_mode(derive_seed(s, k as u64, 1));
            }
            let seqs: Vec<&[TokenEvent]> = img.targets.iter().map(Vec::as_slice).collect();
            let tf = model.teacher_forced(&mut g, &img.inputs, &seqs, None)?;
            let neg = g.scale(tf.total, -1.0)?;
            let grads = g.backward(neg)?.params(&g);
            Ok((g.value(neg).item(), tf.steps, grads))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let (loss, steps, mut grads) = sum_ordered(parts, model.params().len());
    if steps == 0 {
        return Ok((0.0, grads));
    }
    grads.scale(1.0 / steps as f64);
    Ok((loss / steps as f64, grads))
}

fn check_finite(loss: f64, step: usize) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { step })
    }
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Cross-entropy training with the warmup schedule.
pub fn train_ce(model: &mut Captioner, train: &[PreparedImage], cfg: &RunConfig, log: &mut Vec<LogRecord>) -> Result<(), TrainError> {
    let steps_per_epoch = train.len().div_ceil(cfg.ce.batch_size.max(1));
    let warmup = cfg.ce.warmup_for(steps_per_epoch);
    let mut adam = Adam::new(cfg.optim.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11, 0));
    let mut step = 0;
    for epoch in 1..=cfg.ce.epochs {
        let (mut total, mut count, mut lr) = (0.0, 0, 0.0);
        for batch in batches(train.len(), cfg.ce.batch_size, &mut rng) {
            step += 1;
            let imgs: Vec<&PreparedImage> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = ce_step(model, &imgs, Some(derive_seed(cfg.seed, step as u64, 2)))?;
            check_finite(loss, step)?;
            clip_gradients(&mut grads, cfg.optim.clip, cfg.optim.clip_mode);
            lr = lr_schedule_ce(step, warmup, model.config().d);
            adam.update(model.params_mut(), &grads, lr);
            total += loss;
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        log::info!("ce epoch {epoch}: loss {loss:.4} lr {lr:.3e}");
        log.push(LogRecord { stage: Stage::Ce, epoch, step, lr, loss, reward: None, eval_cider: None, eval: Vec::new() });
    }
    Ok(())
}

/// Mean greedy CIDEr-D over the first `per_split` images of each split.
pub fn greedy_cider(model: &Captioner, val: &[(Split, Vec<PreparedImage>)], per_split: usize, decode: &DecodeConfig) -> Result<f64, TrainError> {
    let dc = DecodeConfig { beam_size: 1, ..decode.clone() };
    let mut scores = Vec::new();
    for (_, images) in val {
        let images = &images[..images.len().min(per_split)];
        if images.is_empty() {
            continue;
        }
        let refs: Vec<Vec<Vec<String>>> = images.iter().map(|i| i.refs.clone()).collect();
        let stats = CorpusStats::build(&refs)?;
        let part = images
            .par_iter()
            .map(|img| {
                let h = greedy(model, &img.inputs, &dc)?;
                let cap = render(model, &img.inputs, &h.events, h.score)?;
                Ok(stats.prepare(&img.refs).score(&cap.words()))
            })
            .collect::<Result<Vec<f64>, TrainError>>()?;
        scores.extend(part);
    }
    Ok(if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 })
}

/// Self-critical fine-tuning with plateau halving of the learning rate.
pub fn train_scst(
    model: &mut Captioner,
    train: &[PreparedImage],
    val: &[(Split, Vec<PreparedImage>)],
    cfg: &RunConfig,
    log: &mut Vec<LogRecord>,
) -> Result<(), TrainError> {
    let train: Vec<&PreparedImage> = train.iter().filter(|i| !i.refs.is_empty()).collect();
    if train.is_empty() {
        return Err(TrainError::Config("no training images for self-critical training".into()));
    }
    let refs: Vec<Vec<Vec<String>>> = train.iter().map(|i| i.refs.clone()).collect();
    let stats = CorpusStats::build(&refs)?;
    let prepared: Vec<_> = train.iter().map(|i| stats.prepare(&i.refs)).collect();
    let mut adam = Adam::new(cfg.optim.adam);
    let mut plateau = Plateau::new(cfg.scst.lr, cfg.scst.patience, cfg.scst.floor);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 13, 0));
    let mut step = 0;
    for epoch in 1..=cfg.scst.epochs {
        let (mut total, mut total_reward, mut count) = (0.0, 0.0, 0usize);
        let mut eval_cider = None;
        for batch in batches(train.len(), cfg.scst.batch_size, &mut rng) {
            step += 1;
            let m: &Captioner = model;
            let parts = batch
                .par_iter()
                .map(|&i| {
                    let policy = CaptionPolicy {
                        model: m,
                        image: train[i],
                        refs: &prepared[i],
                        reward: &cfg.reward,
                        decode: &cfg.scst.decode,
                        baseline: cfg.scst.baseline,
                    };
                    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step as u64, 3 + i as u64));
                    let out = scst_step(&policy, &mut r)?;
                    Ok((out.loss, out.sample_reward, out.grads))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let n = parts.len();
            let rewards: f64 = parts.iter().map(|p| p.1).sum();
            let (loss, _, mut grads) = sum_ordered(parts.into_iter().map(|(l, _, g)| (l, 1, g)).collect(), model.params().len());
            let loss = loss / n as f64;
            check_finite(loss, step)?;
            grads.scale(1.0 / n as f64);
            clip_gradients(&mut grads, cfg.optim.clip, cfg.optim.clip_mode);
            adam.update(model.params_mut(), &grads, plateau.lr);
            total += loss;
            total_reward += rewards / n as f64;
            count += 1;
            if cfg.scst.eval_every > 0 && step % cfg.scst.eval_every == 0 && !val.is_empty() {
                let c = greedy_cider(model, val, cfg.scst.eval_images, &cfg.scst.decode)?;
                plateau.observe(c);
                eval_cider = Some(c);
            }
        }
        let loss = total / count.max(1) as f64;
        let reward = total_reward / count.max(1) as f64;
        log::info!("scst epoch {epoch}: loss {loss:.4} reward {reward:.4} lr {:.3e}", plateau.lr);
        log.push(LogRecord { stage: Stage::Scst, epoch, step, lr: plateau.lr, loss, reward: Some(reward), eval_cider, eval: Vec::new() });
    }
    Ok(())
}

/// Labels of `morph` retained as copyable somewhere in `images`.
pub fn f1_labels(images: &[PreparedImage], morph: &MorphTable) -> MorphTable {
    let mut out = MorphTable::default();
    for img in images {
        for l in img.retained_labels() {
            if let Some(forms) = morph.forms(l) {
                out.insert(l, forms.to_vec());
            }
        }
    }
    out
}

/// Beam-decodes images in order.
pub fn decode_images(model: &Captioner, images: &[PreparedImage], decode: &DecodeConfig) -> Result<Vec<DecodeRecord>, TrainError> {
    images.par_iter().map(|img| Ok(decode_image(model, &img.id, &img.inputs, decode, decode.beam_size.max(1))?)).collect()
}

/// Scores decode records of one split.
pub fn score_split(split: Split, images: &[PreparedImage], records: &[DecodeRecord], morph: &MorphTable) -> Result<SplitReport, TrainError> {
    let refs: Vec<Vec<Vec<String>>> = images.iter().map(|i| i.refs.clone()).collect();
    let gold: Vec<_> = images.iter().map(|i| i.gold_mentions(morph)).collect();
    Ok(evaluate_split(split.as_str(), records, &refs, &gold, &f1_labels(images, morph))?)
}

pub fn evaluate(model: &Captioner, val: &[(Split, Vec<PreparedImage>)], morph: &MorphTable, cfg: &EvalConfig) -> Result<Vec<SplitReport>, TrainError> {
    let mut out = Vec::new();
    for (split, images) in val {
        let images = &images[..images.len().min(cfg.images.unwrap_or(usize::MAX))];
        let records = decode_images(model, images, &cfg.decode)?;
        out.push(score_split(*split, images, &records, morph)?);
    }
    Ok(out)
}

/// Runs one stage in memory, starting from `model`.
pub fn run_stage(model: &mut Captioner, data: &PreparedCorpus, cfg: &RunConfig) -> Result<Vec<LogRecord>, TrainError> {
    let mut log = Vec::new();
    let voa;
    let train: &[PreparedImage] = if cfg.reward.voa_only {
        if cfg.stage == Stage::Ce {
            log::warn!("voa_only during cross-entropy training discards non-VOA pairs and usually hurts caption quality");
        }
        voa = voa_filter(&data.train, &data.morph);
        &voa
    } else {
        &data.train
    };
    match cfg.stage {
        Stage::Ce => train_ce(model, train, cfg, &mut log)?,
        Stage::Scst => train_scst(model, train, &data.val, cfg, &mut log)?,
    }
    if cfg.eval.enabled && !data.val.is_empty() {
        let reports = evaluate(model, &data.val, &data.morph, &cfg.eval)?;
        if let Some(last) = log.last_mut() {
            last.eval = reports.iter().map(EvalRow::from).collect();
        }
    }
    Ok(log)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Captioner,
    pub log: Vec<LogRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "run.toml";

/// File-based training: loads the corpus, initializes or loads the model,
/// runs the stage, and writes the checkpoint, log and resolved config to
/// `out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, TrainError> {
    let corpus = Corpus::load(&cfg.data_dir)?;
    let mut model = match (&cfg.init_checkpoint, cfg.stage) {
        (Some(dir), _) => Captioner::load(dir)?,
        (None, Stage::Scst) => return Err(TrainError::Config("self-critical training needs init_checkpoint from a cross-entropy run".into())),
        (None, Stage::Ce) => init_model(&corpus, &cfg.model, cfg.seed)?,
    };
    if model.vocab() != &corpus.vocabulary() {
        return Err(TrainError::Config("checkpoint vocabulary does not match the corpus".into()));
    }
    let data = prepare_corpus(&corpus, &model, &cfg.filter)?;
    let log = run_stage(&mut model, &data, cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    model.save(&cfg.out_dir)?;
    write_log(&cfg.out_dir.join(LOG_FILE), &log)?;
    std::fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(TrainOutcome { model, log })
}
