//! Copy-encouragement ablation ladder, inference-bias sweeps and the
//! morphology probe, run over several seeds on one corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captioner::{Captioner, MorphMode};
use crate::datakit::Split;
use crate::decoder::DecodeConfig;
use crate::tokens::TokenEvent;
use crate::trainer::{
    align, evaluate, init_model, prepare_corpus, run_stage, Corpus, EvalConfig, EvalRow, PreparedCorpus, PreparedImage, RewardConfig,
    RewardKind, RunConfig, Stage, TrainError,
};

/// Inference-bias values swept at decode time.
pub const IB_GRID: [f64; 4] = [1.0, std::f64::consts::E, crate::decoder::E2, std::f64::consts::E * crate::decoder::E2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    CeOnly,
    CeIb,
    Cider,
    Additive,
    Proportional,
    AdditiveVoa,
    ProportionalVoa,
    VoaAll,
    WithoutAbstract,
    WithoutMorph,
}

impl Variant {
    /// The eight configurations of the ladder, in presentation order.
    pub const LADDER: [Variant; 8] = [
        Variant::CeOnly,
        Variant::CeIb,
        Variant::Cider,
        Variant::Additive,
        Variant::Proportional,
        Variant::AdditiveVoa,
        Variant::ProportionalVoa,
        Variant::VoaAll,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::CeOnly => "CE only",
            Variant::CeIb => "CE + IB",
            Variant::Cider => "+ CIDEr",
            Variant::Additive => "+ R_a",
            Variant::Proportional => "+ R_p",
            Variant::AdditiveVoa => "+ R_a w/ VOA",
            Variant::ProportionalVoa => "+ R_p w/ VOA (ECOL-R)",
            Variant::VoaAll => "VOA all training",
            Variant::WithoutAbstract => "ECOL-R w/o AL",
            Variant::WithoutMorph => "CE w/o M",
        }
    }
}

/// Per-split scores of one decoded model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub splits: Vec<EvalRow>,
}

impl Measurement {
    pub fn split(&self, split: Split) -> Option<&EvalRow> {
        self.splits.iter().find(|r| r.split == split.as_str())
    }

    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        if self.splits.is_empty() {
            return 0.0;
        }
        self.splits.iter().map(f).sum::<f64>() / self.splits.len() as f64
    }

    /// CIDEr-D averaged over the evaluation splits.
    pub fn cider_d(&self) -> f64 {
        self.mean(|r| r.cider_d)
    }

    /// `f` of the val-out row, 0 when absent.
    pub fn out(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.split(Split::ValOut).map_or(0.0, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbPoint {
    pub b: f64,
    pub cider_d: f64,
}

/// Form selection on prompts whose reference continues with an inflected
/// (non-base) form of a copyable label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphProbe {
    pub prompts: usize,
    pub correct: usize,
}

impl MorphProbe {
    pub fn accuracy(&self) -> f64 {
        if self.prompts == 0 {
            0.0
        } else {
            self.correct as f64 / self.prompts as f64
        }
    }
}

/// Scores the most probable surface realization of the label the reference
/// names next, summing copy and vocabulary probability per surface string.
pub fn morph_probe(model: &Captioner, images: &[PreparedImage]) -> Result<MorphProbe, TrainError> {
    let max_prefix = model.config().max_len.saturating_sub(1);
    let parts = images
        .par_iter()
        .map(|img| {
            let mut probe = MorphProbe::default();
            for tokens in &img.refs {
                for t in 0..tokens.len().min(max_prefix) {
                    let Some((forms, target)) = inflected_mention(img, &tokens[t..]) else { continue };
                    let mut history = match align(model, &img.inputs, &tokens[..t]) {
                        Ok(h) => h,
                        Err(_) => continue,
                    };
                    history.pop();
                    let dist = model.output_distribution(&img.inputs, &history)?;
                    let score = |surface: &str| {
                        let copied: f64 = img
                            .inputs
                            .objects_with_form(surface)
                            .into_iter()
                            .map(|(object, form)| dist.prob(TokenEvent::Copy { object, form }))
                            .sum();
                        copied + model.vocab().id(surface).map_or(0.0, |w| dist.prob(TokenEvent::Word(w)))
                    };
                    let mut best = (0, f64::NEG_INFINITY);
                    for (j, f) in forms.iter().enumerate() {
                        let s = score(f);
                        if s > best.1 {
                            best = (j, s);
                        }
                    }
                    probe.prompts += 1;
                    probe.correct += usize::from(forms[best.0] == target);
                }
            }
            Ok(probe)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(parts.into_iter().fold(MorphProbe::default(), |a, p| MorphProbe { prompts: a.prompts + p.prompts, correct: a.correct + p.correct }))
}

/// Forms and matched surface when `rest` starts with a non-base form of a
/// copyable object's label.
fn inflected_mention(img: &PreparedImage, rest: &[String]) -> Option<(Vec<String>, String)> {
    img.inputs.copyable.iter().find_map(|obj| {
        obj.forms.iter().skip(1).find_map(|f| {
            let parts: Vec<&str> = f.split_whitespace().collect();
            let hit = !parts.is_empty() && rest.len() >= parts.len() && rest.iter().zip(&parts).all(|(a, b)| a == b);
            (hit && f != &obj.forms[0]).then(|| (obj.forms.clone(), f.clone()))
        })
    })
}

/// One seed of the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub variants: BTreeMap<Variant, Measurement>,
    /// CIDEr-D over the inference-bias grid for selected models.
    pub ib_sweep: BTreeMap<Variant, Vec<IbPoint>>,
    pub morph: BTreeMap<Variant, MorphProbe>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Base run; stage, reward kind and VOA restriction are set per row.
    pub run: RunConfig,
    /// Bias used by the `CE + IB` row.
    pub ib: f64,
    pub ib_grid: Vec<f64>,
    /// Also train the w/o AL and w/o M models.
    pub extras: bool,
    pub budget_minutes: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            run: RunConfig::default(),
            ib: crate::decoder::E2,
            ib_grid: IB_GRID.to_vec(),
            extras: true,
            budget_minutes: 60.0,
        }
    }
}

struct SeedContext<'a> {
    corpus: &'a Corpus,
    cfg: &'a AblationConfig,
    base: RunConfig,
}

impl SeedContext<'_> {
    fn fresh(&self, model_cfg: &crate::captioner::ModelConfig) -> Result<(Captioner, PreparedCorpus), TrainError> {
        let model = init_model(self.corpus, model_cfg, self.base.seed)?;
        let data = prepare_corpus(self.corpus, &model, &self.base.filter)?;
        Ok((model, data))
    }

    fn ce(&self, model: &mut Captioner, data: &PreparedCorpus, voa_only: bool) -> Result<(), TrainError> {
        let cfg = RunConfig { stage: Stage::Ce, reward: RewardConfig { voa_only, ..self.base.reward }, ..self.base.clone() };
        run_stage(model, data, &cfg)?;
        Ok(())
    }

    fn scst(&self, init: &Captioner, data: &PreparedCorpus, kind: RewardKind, voa_only: bool) -> Result<Captioner, TrainError> {
        let mut model = init.clone();
        let cfg = RunConfig { stage: Stage::Scst, reward: RewardConfig { kind, voa_only, ..self.base.reward }, ..self.base.clone() };
        run_stage(&mut model, data, &cfg)?;
        Ok(model)
    }

    fn measure(&self, model: &Captioner, data: &PreparedCorpus, b: f64) -> Result<Measurement, TrainError> {
        let eval = EvalConfig {
            enabled: true,
            decode: DecodeConfig { inference_bias: b, ..self.cfg.run.eval.decode.clone() },
            ..self.cfg.run.eval.clone()
        };
        let reports = evaluate(model, &data.val, &data.morph, &eval)?;
        Ok(Measurement { splits: reports.iter().map(EvalRow::from).collect() })
    }

    fn sweep(&self, model: &Captioner, data: &PreparedCorpus) -> Result<Vec<(f64, Measurement)>, TrainError> {
        self.cfg.ib_grid.iter().map(|&b| Ok((b, self.measure(model, data, b)?))).collect()
    }

    fn val_images(data: &PreparedCorpus) -> Vec<PreparedImage> {
        data.val.iter().flat_map(|(_, imgs)| imgs.iter().cloned()).collect()
    }
}

fn points(sweep: &[(f64, Measurement)]) -> Vec<IbPoint> {
    sweep.iter().map(|(b, m)| IbPoint { b: *b, cider_d: m.cider_d() }).collect()
}

fn at_bias(sweep: &[(f64, Measurement)], b: f64) -> Option<Measurement> {
    sweep.iter().find(|(x, _)| (x - b).abs() < 1e-12).map(|(_, m)| m.clone())
}

/// Trains and scores every ladder row (plus the extras) for one seed.
pub fn run_seed(corpus: &Corpus, cfg: &AblationConfig, seed: u64) -> Result<SeedRun, TrainError> {
    let started = Instant::now();
    let mut base = RunConfig { seed, ..cfg.run.clone() };
    base.eval.enabled = false;
    let ctx = SeedContext { corpus, cfg, base };
    let mut variants = BTreeMap::new();
    let mut ib_sweep = BTreeMap::new();
    let mut morph = BTreeMap::new();

    let (mut ce, data) = ctx.fresh(&ctx.base.model)?;
    ctx.ce(&mut ce, &data, false)?;
    log::info!("seed {seed}: cross-entropy model trained");
    let sweep = ctx.sweep(&ce, &data)?;
    let plain = match at_bias(&sweep, 1.0) {
        Some(m) => m,
        None => ctx.measure(&ce, &data, 1.0)?,
    };
    let biased = match at_bias(&sweep, cfg.ib) {
        Some(m) => m,
        None => ctx.measure(&ce, &data, cfg.ib)?,
    };
    variants.insert(Variant::CeOnly, plain);
    variants.insert(Variant::CeIb, biased);
    ib_sweep.insert(Variant::CeOnly, points(&sweep));
    let val = SeedContext::val_images(&data);
    morph.insert(Variant::CeOnly, morph_probe(&ce, &val)?);

    let rows = [
        (Variant::Cider, RewardKind::Cider, false),
        (Variant::Additive, RewardKind::Additive, false),
        (Variant::Proportional, RewardKind::Proportional, false),
        (Variant::AdditiveVoa, RewardKind::Additive, true),
        (Variant::ProportionalVoa, RewardKind::Proportional, true),
    ];
    for (variant, kind, voa) in rows {
        let model = ctx.scst(&ce, &data, kind, voa)?;
        log::info!("seed {seed}: {} trained", variant.label());
        if matches!(variant, Variant::Cider | Variant::ProportionalVoa) {
            let sweep = ctx.sweep(&model, &data)?;
            let plain = match at_bias(&sweep, 1.0) {
                Some(m) => m,
                None => ctx.measure(&model, &data, 1.0)?,
            };
            ib_sweep.insert(variant, points(&sweep));
            variants.insert(variant, plain);
        } else {
            variants.insert(variant, ctx.measure(&model, &data, 1.0)?);
        }
    }

    let mut voa_ce = init_model(corpus, &ctx.base.model, seed)?;
    ctx.ce(&mut voa_ce, &data, true)?;
    let voa_all = ctx.scst(&voa_ce, &data, RewardKind::Proportional, true)?;
    variants.insert(Variant::VoaAll, ctx.measure(&voa_all, &data, 1.0)?);

    if cfg.extras {
        let no_al = crate::captioner::ModelConfig { abstract_labels: false, ..ctx.base.model.clone() };
        let (mut model, data) = ctx.fresh(&no_al)?;
        ctx.ce(&mut model, &data, false)?;
        let model = ctx.scst(&model, &data, RewardKind::Proportional, true)?;
        variants.insert(Variant::WithoutAbstract, ctx.measure(&model, &data, 1.0)?);

        let no_m = crate::captioner::ModelConfig { morph: MorphMode::Disabled, ..ctx.base.model.clone() };
        let (mut model, data) = ctx.fresh(&no_m)?;
        ctx.ce(&mut model, &data, false)?;
        variants.insert(Variant::WithoutMorph, ctx.measure(&model, &data, 1.0)?);
        morph.insert(Variant::WithoutMorph, morph_probe(&model, &SeedContext::val_images(&data))?);
    }
    let seconds = started.elapsed().as_secs_f64();
    log::info!("seed {seed}: finished in {seconds:.0} s");
    Ok(SeedRun { seed, variants, ib_sweep, morph, seconds })
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub spread: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, spread: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let spread = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, spread }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: Variant,
    pub cider_d: Stat,
    pub split_cider: Vec<(String, Stat)>,
    pub out_object_f1: Stat,
    pub out_object_cider: Stat,
    pub out_avg_objects: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<SeedRun>,
    pub seconds: f64,
    pub budget_exceeded: bool,
}

/// Runs every seed, warning when the total exceeds the configured budget.
pub fn run_ablation(corpus: &Corpus, cfg: &AblationConfig) -> Result<AblationReport, TrainError> {
    if cfg.seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    let started = Instant::now();
    let mut seeds = Vec::new();
    for &s in &cfg.seeds {
        seeds.push(run_seed(corpus, cfg, s)?);
    }
    let seconds = started.elapsed().as_secs_f64();
    let budget_exceeded = seconds > cfg.budget_minutes * 60.0;
    if budget_exceeded {
        log::warn!("ablation took {:.1} min, over the {:.1} min budget", seconds / 60.0, cfg.budget_minutes);
    }
    Ok(AblationReport { seeds, seconds, budget_exceeded })
}

impl AblationReport {
    /// `f` of variant `v` for every seed that ran it.
    pub fn values(&self, v: Variant, f: impl Fn(&Measurement) -> f64) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.variants.get(&v).map(&f)).collect()
    }

    pub fn stat(&self, v: Variant, f: impl Fn(&Measurement) -> f64) -> Stat {
        Stat::of(&self.values(v, f))
    }

    pub fn out_avg_objects(&self, v: Variant) -> Stat {
        self.stat(v, |m| m.out(|r| r.avg_objects))
    }

    pub fn out_object_f1(&self, v: Variant) -> Stat {
        self.stat(v, |m| m.out(|r| r.object_f1))
    }

    pub fn cider_d(&self, v: Variant) -> Stat {
        self.stat(v, Measurement::cider_d)
    }

    /// Mean CIDEr-D over seeds at each grid bias for a swept model.
    pub fn ib_curve(&self, v: Variant) -> Vec<IbPoint> {
        let Some(first) = self.seeds.first().and_then(|s| s.ib_sweep.get(&v)) else { return Vec::new() };
        first
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let xs: Vec<f64> = self.seeds.iter().filter_map(|s| s.ib_sweep.get(&v).and_then(|c| c.get(i)).map(|q| q.cider_d)).collect();
                IbPoint { b: p.b, cider_d: Stat::of(&xs).mean }
            })
            .collect()
    }

    pub fn morph_accuracy(&self, v: Variant) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.morph.get(&v).map(MorphProbe::accuracy)).collect()
    }

    /// Ladder rows ranked by mean CIDEr-D, best first.
    pub fn table(&self) -> Vec<TableRow> {
        let mut rows: Vec<TableRow> = Variant::LADDER
            .iter()
            .filter(|v| self.seeds.iter().any(|s| s.variants.contains_key(v)))
            .map(|&v| TableRow {
                variant: v,
                cider_d: self.cider_d(v),
                split_cider: Split::EVAL.iter().map(|s| (s.as_str().to_string(), self.stat(v, |m| m.split(*s).map_or(0.0, |r| r.cider_d)))).collect(),
                out_object_f1: self.out_object_f1(v),
                out_object_cider: self.stat(v, |m| m.out(|r| r.object_cider)),
                out_avg_objects: self.out_avg_objects(v),
            })
            .collect();
        rows.sort_by(|a, b| b.cider_d.mean.total_cmp(&a.cider_d.mean).then(a.variant.cmp(&b.variant)));
        rows
    }

    /// Markdown rendering of the ranked table, sweeps and probes.
    pub fn render(&self) -> String {
        let fmt = |s: Stat| format!("{:.3} ± {:.3}", s.mean, s.spread);
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.seed.to_string()).collect();
        let mut out = format!("Seeds: {}. Wall time {:.1} min.\n\n", seeds.join(", "), self.seconds / 60.0);
        out.push_str("| rank | configuration | CIDEr-D | val-in | val-near | val-out | out F1 | out OC. | out Ave. O |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for (i, r) in self.table().iter().enumerate() {
            let splits: Vec<String> = r.split_cider.iter().map(|(_, s)| fmt(*s)).collect();
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                i + 1,
                r.variant.label(),
                fmt(r.cider_d),
                splits.join(" | "),
                fmt(r.out_object_f1),
                fmt(r.out_object_cider),
                fmt(r.out_avg_objects)
            );
        }
        let extras = [Variant::WithoutAbstract, Variant::WithoutMorph];
        if extras.iter().any(|v| !self.values(*v, Measurement::cider_d).is_empty()) {
            out.push_str("\n| component ablation | CIDEr-D | out F1 | out Ave. O |\n|---|---|---|---|\n");
            for v in [Variant::ProportionalVoa, Variant::WithoutAbstract, Variant::CeOnly, Variant::WithoutMorph] {
                let _ = writeln!(out, "| {} | {} | {} | {} |", v.label(), fmt(self.cider_d(v)), fmt(self.out_object_f1(v)), fmt(self.out_avg_objects(v)));
            }
        }
        let swept: Vec<Variant> = [Variant::CeOnly, Variant::Cider, Variant::ProportionalVoa].into_iter().filter(|v| !self.ib_curve(*v).is_empty()).collect();
        if !swept.is_empty() {
            out.push_str("\nCIDEr-D under inference bias b:\n\n| model |");
            for p in self.ib_curve(swept[0]) {
                let _ = write!(out, " b = {:.3} |", p.b);
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(self.ib_curve(swept[0]).len()));
            out.push('\n');
            for v in swept {
                let cells: Vec<String> = self.ib_curve(v).iter().map(|p| format!("{:.3}", p.cider_d)).collect();
                let _ = writeln!(out, "| {} | {} |", v.label(), cells.join(" | "));
            }
        }
        for v in [Variant::CeOnly, Variant::WithoutMorph] {
            let acc = self.morph_accuracy(v);
            if !acc.is_empty() {
                let cells: Vec<String> = acc.iter().map(|a| format!("{a:.3}")).collect();
                let _ = writeln!(out, "\nInflection accuracy on plural prompts, {}: {}", v.label(), cells.join(", "));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("report serializes"))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
    }
}
