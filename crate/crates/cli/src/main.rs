use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use copycap::captioner::{Captioner, CaptionerError, MorphMode};
use copycap::datakit::{generate_synthetic, DataError, GeneratorConfig, Split};
use copycap::decoder::{read_records, DecodeError, write_records, DecodeConfig, DecodeRecord, E2};
use copycap::experiment::{run_ablation, AblationConfig, IB_GRID};
use copycap::metrics::MetricReport;
use copycap::numcore::TensorError;
use copycap::taxonomy::FilterConfig;
use copycap::trainer::{
    decode_images, prepare_references, score_split, train, voa_filter, voa_fraction, ClipMode, Corpus, PreparedImage, RewardKind, RunConfig,
    Stage, TrainError, CONFIG_FILE,
};

/// Copy-encouraging object captioner: synthetic data, training, decoding,
/// scoring and the copy-encouragement ablation.
#[derive(Parser, Debug)]
#[command(name = "copycap", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic zero-shot corpus and print split statistics.
    GenData(GenDataArgs),
    /// Run cross-entropy pre-training or self-critical fine-tuning.
    Train(TrainArgs),
    /// Decode a split with a trained checkpoint.
    Decode(DecodeArgs),
    /// Score decode records against a split's references.
    Score(ScoreArgs),
    /// Run the copy-encouragement ablation ladder over several seeds.
    Ablate(AblateArgs),
}

/// Usage-level failure: bad flags, configs or incompatible inputs chosen by
/// the caller.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// TOML generator config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for split files, taxonomy, morphology table and stats.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training images.
    #[arg(long)]
    train_images: Option<usize>,
    /// Images per validation split.
    #[arg(long)]
    val_images: Option<usize>,
    /// Probability that a reference names a given object.
    #[arg(long)]
    mention_prob: Option<f64>,
    /// Frequency threshold used when reporting the VOA statistics.
    #[arg(long, default_value_t = RunConfig::default().filter.freq_threshold)]
    freq_threshold: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Ce,
    Scst,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RewardArg {
    Cider,
    Additive,
    Proportional,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MorphArg {
    Shared,
    PerLabel,
    Disabled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClipArg {
    Norm,
    Value,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-scale model size and schedules instead of the desk profile.
    #[arg(long)]
    full_scale: bool,
    /// Training stage.
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to start from; required for scst.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Run seed; also seeds parameter initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Self-critical reward.
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    /// Weight a of the additive reward.
    #[arg(long)]
    a: Option<f64>,
    /// Weight p of the proportional reward.
    #[arg(long)]
    p: Option<f64>,
    /// Train only on pairs whose reference names a retained object.
    #[arg(long)]
    voa_only: bool,
    /// Epochs of the selected stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Images per update of the selected stage.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Cross-entropy warmup steps.
    #[arg(long)]
    warmup: Option<usize>,
    /// Rescale the full-scale warmup by steps per epoch instead of a fixed warmup.
    #[arg(long, conflicts_with = "warmup")]
    rescaled_warmup: bool,
    /// Initial self-critical learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Plateau evaluations without improvement before halving the self-critical rate.
    #[arg(long)]
    patience: Option<usize>,
    /// Updates between plateau evaluations.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Gradient clipping threshold.
    #[arg(long)]
    clip: Option<f64>,
    /// Clip by global norm or by value.
    #[arg(long, value_enum)]
    clip_mode: Option<ClipArg>,
    /// Adam beta1.
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam beta2.
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam epsilon.
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Model width.
    #[arg(long)]
    d_model: Option<usize>,
    /// Encoder layers.
    #[arg(long)]
    enc_layers: Option<usize>,
    /// Decoder layers.
    #[arg(long)]
    dec_layers: Option<usize>,
    /// Feed-forward width.
    #[arg(long)]
    ffn: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Dropout rate.
    #[arg(long)]
    dropout: Option<f64>,
    /// Region feature width.
    #[arg(long)]
    d_roi: Option<usize>,
    /// Morphological selector mode.
    #[arg(long, value_enum)]
    morph: Option<MorphArg>,
    /// Drop the abstract-label inputs.
    #[arg(long)]
    no_abstract_labels: bool,
    /// Labels mentioned at least this often in training are not copyable.
    #[arg(long)]
    freq_threshold: Option<u64>,
    /// IoU at which an ancestor box yields to its descendant.
    #[arg(long)]
    overlap_threshold: Option<f64>,
    /// Skip the evaluation after training.
    #[arg(long)]
    no_eval: bool,
    /// Per-split image cap for the final evaluation.
    #[arg(long)]
    eval_images: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct DecodeFlags {
    /// Beam size; 1 decodes greedily.
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Maximum caption length.
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// Inference bias b multiplying copy probabilities.
    #[arg(long, default_value_t = 1.0)]
    ib: f64,
    /// Bigram repetition penalty.
    #[arg(long, default_value_t = E2)]
    bigram_penalty: f64,
    /// Divide repeated-bigram log-probabilities by the penalty.
    #[arg(long)]
    literal_division: bool,
    /// Rank beams by raw log-probability instead of per-token mean.
    #[arg(long)]
    no_length_norm: bool,
    /// Allow an object to be copied more than once.
    #[arg(long)]
    no_copy_once: bool,
}

impl DecodeFlags {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam,
            max_len: self.max_len,
            bigram_penalty: self.bigram_penalty,
            literal_division: self.literal_division,
            length_normalize: !self.no_length_norm,
            copy_once: !self.no_copy_once,
            scst_vocab_mask: false,
            inference_bias: self.ib,
        }
    }
}

#[derive(Args, Debug)]
struct FilterFlags {
    /// Frequency threshold; defaults to the checkpoint's run config, then the desk value.
    #[arg(long)]
    freq_threshold: Option<u64>,
    /// Overlap threshold; defaults like --freq-threshold.
    #[arg(long)]
    overlap_threshold: Option<f64>,
}

impl FilterFlags {
    fn resolve(&self, checkpoint: Option<&Path>) -> Result<FilterConfig> {
        let mut f = match checkpoint.map(|c| c.join(CONFIG_FILE)).filter(|p| p.exists()) {
            Some(p) => RunConfig::load(&p)?.filter,
            None => RunConfig::default().filter,
        };
        if let Some(t) = self.freq_threshold {
            f.freq_threshold = t;
        }
        if let Some(t) = self.overlap_threshold {
            f.overlap_threshold = t;
        }
        Ok(f)
    }
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Split to decode.
    #[arg(long, default_value = "val-out")]
    split: Split,
    /// Output directory; records go to <split>.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Decode once per bias in {1, e, e^2, e^3}, each into its own subdirectory.
    #[arg(long)]
    ib_sweep: bool,
    /// Decode at most this many images.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    decode: DecodeFlags,
    #[command(flatten)]
    filter: FilterFlags,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Decode record files; the split is read from each file name unless --split is given.
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Split of every record file.
    #[arg(long)]
    split: Option<Split>,
    /// Checkpoint whose run config supplies the object filter.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterFlags,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// TOML ablation config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for report.json and report.md.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Skip the w/o AL and w/o M models.
    #[arg(long)]
    no_extras: bool,
    /// Wall-clock budget in minutes; exceeding it only warns.
    #[arg(long)]
    budget_minutes: Option<f64>,
    /// Cross-entropy epochs for every row.
    #[arg(long)]
    ce_epochs: Option<usize>,
    /// Self-critical epochs for every row.
    #[arg(long)]
    scst_epochs: Option<usize>,
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.train_images {
        cfg.train_images = n;
    }
    if let Some(n) = args.val_images {
        cfg.val_images = n;
    }
    if let Some(q) = args.mention_prob {
        cfg.mention_prob = q;
    }
    let syn = generate_synthetic(&cfg)?;
    let stats = syn.stats.clone();
    let corpus = Corpus::from_synthetic(syn);
    corpus.save(&args.out)?;
    std::fs::write(args.out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    std::fs::write(args.out.join("generator.toml"), toml::to_string_pretty(&cfg)?)?;

    let filter = FilterConfig { freq_threshold: args.freq_threshold, ..RunConfig::default().filter };
    let train = references(&corpus, Split::Train, &filter)?;
    let voa = voa_filter(&train, &corpus.morph);
    let count = |imgs: &[PreparedImage]| (imgs.len(), imgs.iter().map(|i| i.refs.len()).sum::<usize>());
    let mut cols = vec![("train".to_string(), count(&train)), ("train VOA".to_string(), count(&voa))];
    for s in Split::EVAL {
        if let Some(ds) = corpus.split(s) {
            cols.push((s.to_string(), (ds.images.len(), ds.caption_count())));
        }
    }
    let header: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>10}")).collect();
    println!("{:<10}{}", "", header.join(""));
    println!("{:<10}{}", "#Image", cols.iter().map(|(_, c)| format!("{:>10}", c.0)).collect::<String>());
    println!("{:<10}{}", "#Caption", cols.iter().map(|(_, c)| format!("{:>10}", c.1)).collect::<String>());
    println!("VOA fraction of training references: {:.4}", voa_fraction(&train, &corpus.morph));
    Ok(())
}

fn mismatch(path: &Path, message: String) -> anyhow::Error {
    DataError::Schema { path: path.display().to_string(), message }.into()
}

fn references(corpus: &Corpus, split: Split, filter: &FilterConfig) -> Result<Vec<PreparedImage>> {
    let ds = corpus.split(split).ok_or_else(|| DataError::Schema { path: String::new(), message: format!("dataset has no {split} split") })?;
    let freq = corpus.label_freq();
    Ok(ds.images.iter().map(|img| prepare_references(img, &corpus.taxonomy, &corpus.morph, filter, &freq)).collect::<Result<_, _>>()?)
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = match (&args.config, args.full_scale) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, true) => RunConfig::full_scale(),
        (None, false) => RunConfig::default(),
    };
    if let Some(s) = args.stage {
        cfg.stage = match s {
            StageArg::Ce => Stage::Ce,
            StageArg::Scst => Stage::Scst,
        };
    }
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(cfg.data_dir, args.data);
    set!(cfg.out_dir, args.out);
    set!(cfg.seed, args.seed);
    if args.init.is_some() {
        cfg.init_checkpoint = args.init;
    }
    if let Some(r) = args.reward {
        cfg.reward.kind = match r {
            RewardArg::Cider => RewardKind::Cider,
            RewardArg::Additive => RewardKind::Additive,
            RewardArg::Proportional => RewardKind::Proportional,
        };
    }
    set!(cfg.reward.a, args.a);
    set!(cfg.reward.p, args.p);
    cfg.reward.voa_only |= args.voa_only;
    match cfg.stage {
        Stage::Ce => {
            set!(cfg.ce.epochs, args.epochs);
            set!(cfg.ce.batch_size, args.batch_size);
        }
        Stage::Scst => {
            set!(cfg.scst.epochs, args.epochs);
            set!(cfg.scst.batch_size, args.batch_size);
        }
    }
    if args.warmup.is_some() {
        cfg.ce.warmup = args.warmup;
    }
    if args.rescaled_warmup {
        cfg.ce.warmup = None;
    }
    set!(cfg.scst.lr, args.lr);
    set!(cfg.scst.patience, args.patience);
    set!(cfg.scst.eval_every, args.eval_every);
    set!(cfg.optim.clip, args.clip);
    if let Some(m) = args.clip_mode {
        cfg.optim.clip_mode = match m {
            ClipArg::Norm => ClipMode::Norm,
            ClipArg::Value => ClipMode::Value,
        };
    }
    set!(cfg.optim.adam.beta1, args.beta1);
    set!(cfg.optim.adam.beta2, args.beta2);
    set!(cfg.optim.adam.eps, args.adam_eps);
    set!(cfg.model.d, args.d_model);
    set!(cfg.model.n_enc, args.enc_layers);
    set!(cfg.model.n_dec, args.dec_layers);
    set!(cfg.model.ffn, args.ffn);
    set!(cfg.model.heads, args.heads);
    set!(cfg.model.dropout, args.dropout);
    set!(cfg.model.d_roi, args.d_roi);
    if let Some(m) = args.morph {
        cfg.model.morph = match m {
            MorphArg::Shared => MorphMode::Shared,
            MorphArg::PerLabel => MorphMode::PerLabel,
            MorphArg::Disabled => MorphMode::Disabled,
        };
    }
    cfg.model.abstract_labels &= !args.no_abstract_labels;
    set!(cfg.filter.freq_threshold, args.freq_threshold);
    set!(cfg.filter.overlap_threshold, args.overlap_threshold);
    cfg.eval.enabled &= !args.no_eval;
    if args.eval_images.is_some() {
        cfg.eval.images = args.eval_images;
    }
    let outcome = train(&cfg)?;
    if let Some(last) = outcome.log.last() {
        println!("{} finished: {} steps, final loss {:.4}", stage_name(cfg.stage), last.step, last.loss);
        for row in &last.eval {
            println!("{:<9} CIDEr-D {:.3}  F1 {:.3}  OC {:.3}  Ave.O {:.2}", row.split, row.cider_d, row.object_f1, row.object_cider, row.avg_objects);
        }
    }
    println!("checkpoint written to {}", cfg.out_dir.display());
    Ok(())
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Ce => "cross-entropy",
        Stage::Scst => "self-critical",
    }
}

/// Subdirectory names of the bias sweep.
const IB_NAMES: [&str; 4] = ["ib-1", "ib-e", "ib-e2", "ib-e3"];

fn decode_cmd(args: DecodeArgs) -> Result<()> {
    let model = Captioner::load(&args.checkpoint)?;
    let corpus = Corpus::load(&args.data)?;
    if model.vocab() != &corpus.vocabulary() {
        return Err(mismatch(&args.data, "checkpoint vocabulary does not match the dataset".into()));
    }
    let filter = args.filter.resolve(Some(&args.checkpoint))?;
    let mut images = references(&corpus, args.split, &filter)?;
    images.truncate(args.limit.unwrap_or(usize::MAX));
    let base = args.decode.config();
    let runs: Vec<(PathBuf, DecodeConfig)> = if args.ib_sweep {
        IB_GRID.iter().zip(IB_NAMES).map(|(&b, name)| (args.out.join(name), DecodeConfig { inference_bias: b, ..base.clone() })).collect()
    } else {
        vec![(args.out.clone(), base)]
    };
    for (dir, cfg) in runs {
        let records = decode_images(&model, &images, &cfg)?;
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.jsonl", args.split));
        write_records(&path, &records)?;
        println!("{} records (b = {:.3}) written to {}", records.len(), cfg.inference_bias, path.display());
    }
    Ok(())
}

fn score_cmd(args: ScoreArgs) -> Result<()> {
    let corpus = Corpus::load(&args.data)?;
    let filter = args.filter.resolve(args.checkpoint.as_deref())?;
    let mut report = MetricReport::default();
    for path in &args.records {
        let split = match args.split {
            Some(s) => s,
            None => {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                stem.parse().map_err(|_| usage(format!("cannot tell the split of {}; pass --split", path.display())))?
            }
        };
        let records = read_records(path).map_err(|e| mismatch(path, e.to_string()))?;
        let images = references(&corpus, split, &filter)?;
        let ordered = match_records(&images, records, split)?;
        report.splits.push(score_split(split, &images[..ordered.len()], &ordered, &corpus.morph)?);
    }
    match &args.out {
        Some(p) => report.save(p)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    for s in &report.splits {
        eprintln!("{:<9} CIDEr-D {:.3}  F1 {:.3}  OC {:.3}  Ave.O {:.2}", s.split, s.cider_d, s.object_f1, s.object_cider, s.avg_objects);
    }
    Ok(())
}

/// Orders records like the split's images. Records must cover a prefix of
/// the split, as written by `decode --limit`.
fn match_records(images: &[PreparedImage], records: Vec<DecodeRecord>, split: Split) -> Result<Vec<DecodeRecord>> {
    let n = records.len();
    let mut by_id: HashMap<String, DecodeRecord> = records.into_iter().map(|r| (r.image_id.clone(), r)).collect();
    if by_id.len() != n || n > images.len() {
        bail!(mismatch(Path::new(split.as_str()), "records do not match the split's images".into()));
    }
    images[..n]
        .iter()
        .map(|img| by_id.remove(&img.id).ok_or_else(|| mismatch(Path::new(split.as_str()), format!("image {} has no record", img.id))))
        .collect()
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let mut cfg: AblationConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => AblationConfig::default(),
    };
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    cfg.extras &= !args.no_extras;
    if let Some(b) = args.budget_minutes {
        cfg.budget_minutes = b;
    }
    if let Some(e) = args.ce_epochs {
        cfg.run.ce.epochs = e;
    }
    if let Some(e) = args.scst_epochs {
        cfg.run.scst.epochs = e;
    }
    cfg.run.data_dir = args.data.clone();
    let corpus = Corpus::load(&args.data)?;
    let report = run_ablation(&corpus, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    report.save(&args.out.join("report.json"))?;
    let md = report.render();
    std::fs::write(args.out.join("report.md"), &md)?;
    println!("{md}");
    Ok(())
}

/// 1 for usage and configuration errors, 3 for numeric failures, 2 for
/// everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|cause| {
            if cause.is::<UsageError>() {
                return Some(1);
            }
            if let Some(e) = cause.downcast_ref::<TrainError>() {
                return train_code(e);
            }
            if let Some(e) = cause.downcast_ref::<CaptionerError>() {
                return model_code(e);
            }
            if let Some(e) = cause.downcast_ref::<DataError>() {
                return data_code(e);
            }
            if let Some(e) = cause.downcast_ref::<DecodeError>() {
                return decode_code(e);
            }
            cause.downcast_ref::<TensorError>().and_then(tensor_code)
        })
        .unwrap_or(2)
}

fn train_code(e: &TrainError) -> Option<u8> {
    match e {
        TrainError::NonFinite { .. } => Some(3),
        TrainError::Config(_) => Some(1),
        TrainError::Data(e) => data_code(e),
        TrainError::Model(e) => model_code(e),
        TrainError::Decode(e) => decode_code(e),
        _ => None,
    }
}

fn model_code(e: &CaptionerError) -> Option<u8> {
    match e {
        CaptionerError::Config(_) => Some(1),
        CaptionerError::Tensor(t) => tensor_code(t),
        _ => None,
    }
}

fn decode_code(e: &DecodeError) -> Option<u8> {
    match e {
        DecodeError::Model(m) => model_code(m),
        DecodeError::BadBias(_) => Some(1),
        _ => None,
    }
}

fn data_code(e: &DataError) -> Option<u8> {
    matches!(e, DataError::Config(_)).then_some(1)
}

fn tensor_code(e: &TensorError) -> Option<u8> {
    matches!(e, TensorError::NonFinite { .. }).then_some(3)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
