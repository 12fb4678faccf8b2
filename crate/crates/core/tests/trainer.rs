mod common;

use std::sync::OnceLock;

use common::*;
use copycap::captioner::{Captioner, CopyObject, ModelConfig, MorphMode, ObjectInputs};
use copycap::datakit::{generate_synthetic, GeneratorConfig, Split};
use copycap::metrics::CorpusStats;
use copycap::numcore::gradcheck::{check_params, FD_STEP};
use copycap::numcore::{Graph, ParamGrads, ParamStore, Tensor};
use copycap::tokens::TokenEvent;
use copycap::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

// ---------- rewards ----------

#[test]
fn reward_examples() {
    let add = RewardConfig { kind: RewardKind::Additive, a: 0.3, ..RewardConfig::default() };
    let prop = RewardConfig { kind: RewardKind::Proportional, p: 0.3, ..RewardConfig::default() };
    let plain = RewardConfig { kind: RewardKind::Cider, a: 5.0, p: 5.0, ..RewardConfig::default() };
    assert!((reward_value(1.0, 2, &add) - 1.6).abs() < 1e-15);
    assert!((reward_value(1.0, 2, &prop) - 1.6).abs() < 1e-15);
    assert_eq!(reward_value(0.0, 7, &prop), 0.0);
    assert_eq!(reward_value(0.8, 3, &plain), 0.8);
    for c in [0.0, 0.4, 2.5] {
        assert_eq!(reward_value(c, 0, &add), c);
        assert_eq!(reward_value(c, 0, &prop), c);
    }
    assert!("bogus".parse::<RewardKind>().is_err());
    assert_eq!("proportional".parse::<RewardKind>().unwrap(), RewardKind::Proportional);
}

#[test]
fn reward_identities_hold_on_random_captions() {
    let refs = vec![
        vec![toks("a red dog near two blue buses"), toks("two buses and a dog"), toks("a dog in a park")],
        vec![toks("three cakes on a table"), toks("a cake in a kitchen")],
        vec![toks("a mouse near a deer"), toks("two deer in a park"), toks("a deer")],
    ];
    let stats = CorpusStats::build(&refs).unwrap();
    let prepared: Vec<_> = refs.iter().map(|r| stats.prepare(r)).collect();
    let words = ["a", "red", "dog", "near", "two", "blue", "buses", "cake", "cakes", "in", "park", "deer", "mouse", "table", "and"];
    let mut rng = rng(9);
    let mut positive = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(0..10);
        let cap: Vec<String> = (0..len).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect();
        let c = rng.gen_range(0..6usize);
        let a = [0.2, 0.3, 0.4][rng.gen_range(0..3)];
        let p = [0.2, 0.3, 0.4][rng.gen_range(0..3)];
        let r = &prepared[rng.gen_range(0..prepared.len())];
        let cfg = |kind| RewardConfig { kind, a, p, voa_only: false };
        let cider = reward(&cap, c, r, &cfg(RewardKind::Cider));
        let ra = reward(&cap, c, r, &cfg(RewardKind::Additive));
        let rp = reward(&cap, c, r, &cfg(RewardKind::Proportional));
        assert!(((ra - cider) - a * c as f64).abs() <= 1e-12, "{ra} {cider} {c}");
        if cider > 0.0 {
            positive += 1;
            assert!((rp / cider - (1.0 + p * c as f64)).abs() <= 1e-12);
        } else {
            assert_eq!(rp, 0.0);
        }
        if c == 0 {
            assert_eq!(ra, cider);
            assert_eq!(rp, cider);
        }
    }
    assert!(positive > 100, "too few captions with positive CIDEr: {positive}");
}

// ---------- SCST estimator ----------

/// Softmax policy over a handful of outcomes with fixed rewards; the
/// baseline is the reward of the most probable outcome.
struct Toy {
    store: ParamStore,
    rewards: Vec<f64>,
}

impl Toy {
    fn new(logits: &[f64], rewards: &[f64]) -> Self {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::matrix(1, logits.len(), logits.to_vec()).unwrap(), true);
        Self { store, rewards: rewards.to_vec() }
    }

    fn probs(&self) -> Vec<f64> {
        let l = self.store.by_name("theta").unwrap().data();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }
}

impl Policy for Toy {
    type Sample = usize;
    type Error = copycap::numcore::TensorError;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize, Self::Error> {
        let p = self.probs();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(p.len() - 1)
    }

    fn baseline(&self) -> Result<f64, Self::Error> {
        let p = self.probs();
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        Ok(self.rewards[best])
    }

    fn reward(&self, s: &usize) -> Result<f64, Self::Error> {
        Ok(self.rewards[*s])
    }

    fn log_prob_grad(&self, s: &usize) -> Result<(f64, ParamGrads), Self::Error> {
        let mut g = Graph::with_params(&self.store);
        let theta = g.param(self.store.id("theta").unwrap());
        let lp = g.log_softmax(theta, None)?;
        let picked = g.pick(lp, &[*s])?;
        let total = g.sum(picked)?;
        let grads = g.backward(total)?.params(&g);
        Ok((g.value(total).item(), grads))
    }

    fn param_count(&self) -> usize {
        self.store.len()
    }
}

#[test]
fn scst_gradient_matches_analytic_policy_gradient() {
    let toy = Toy::new(&[0.4, -0.3, 0.9], &[1.0, 0.2, 2.5]);
    let p = toy.probs();
    let rbar: f64 = p.iter().zip(&toy.rewards).map(|(a, b)| a * b).sum();
    // Gradient of -E[r] with respect to the logits.
    let analytic: Vec<f64> = (0..3).map(|i| -p[i] * (toy.rewards[i] - rbar)).collect();

    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let id = toy.store.id("theta").unwrap();
    for _ in 0..n {
        let out = scst_step(&toy, &mut rng).unwrap();
        if out.advantage == 0.0 {
            assert!(out.grads.is_zero());
        }
        let zero = Tensor::zeros(&[1, 3]);
        let g = out.grads.get(id).unwrap_or(&zero);
        for i in 0..3 {
            sum[i] += g.data()[i];
            sq[i] += g.data()[i] * g.data()[i];
        }
    }
    for i in 0..3 {
        let mean = sum[i] / n as f64;
        let var = sq[i] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - analytic[i]).abs() <= 3.0 * se, "component {i}: {mean} vs {} (se {se})", analytic[i]);
    }
}

#[test]
fn zero_advantage_gives_exactly_zero_gradient() {
    // Every outcome earns the baseline reward.
    let toy = Toy::new(&[0.1, 0.7, -0.2], &[1.5, 1.5, 1.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let out = scst_step(&toy, &mut rng).unwrap();
        assert_eq!(out.advantage, 0.0);
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.is_zero());
        assert_eq!(out.grads.global_norm(), 0.0);
    }
}

/// Fixed sample with a proportional reward at a given copy count.
struct Fixed {
    inner: Toy,
    cider: f64,
    copies: usize,
    cfg: RewardConfig,
}

impl Policy for Fixed {
    type Sample = usize;
    type Error = copycap::numcore::TensorError;

    fn sample<R: Rng + ?Sized>(&self, _rng: &mut R) -> Result<usize, Self::Error> {
        Ok(1)
    }
    fn baseline(&self) -> Result<f64, Self::Error> {
        Ok(0.0)
    }
    fn reward(&self, _s: &usize) -> Result<f64, Self::Error> {
        Ok(reward_value(self.cider, self.copies, &self.cfg))
    }
    fn log_prob_grad(&self, s: &usize) -> Result<(f64, ParamGrads), Self::Error> {
        self.inner.log_prob_grad(s)
    }
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

#[test]
fn proportional_loss_is_linear_in_copy_factor() {
    let cfg = RewardConfig { kind: RewardKind::Proportional, p: 0.3, ..RewardConfig::default() };
    let step = |copies| {
        let pol = Fixed { inner: Toy::new(&[0.2, -0.5, 0.3], &[0.0; 3]), cider: 0.7, copies, cfg };
        scst_step(&pol, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    };
    let base = step(0);
    assert!(base.loss > 0.0);
    for c in 1..5 {
        let out = step(c);
        let factor = 1.0 + 0.3 * c as f64;
        assert!((out.loss / base.loss - factor).abs() < 1e-12);
        assert!((out.grads.global_norm() / base.grads.global_norm() - factor).abs() < 1e-12);
    }
}

// ---------- schedules, clipping, Adam ----------

fn lr_oracle(s: f64, w: f64, d: f64) -> f64 {
    let warm = s / (w * w.sqrt());
    let decay = 1.0 / s.sqrt();
    (if warm < decay { warm } else { decay }) / d.sqrt()
}

#[test]
fn ce_schedule_matches_formula() {
    let (w, d) = (20_000usize, 768usize);
    for s in [1, w / 2, w, 10 * w] {
        let got = lr_schedule_ce(s, w, d);
        let want = lr_oracle(s as f64, w as f64, d as f64);
        assert!((got - want).abs() <= 1e-12, "S={s}: {got} vs {want}");
    }
    assert!((lr_schedule_ce(w, w, d) - 2.552e-4).abs() < 5e-8);
    assert!((lr_schedule_ce(w, w, d) - 1.0 / ((d * w) as f64).sqrt()).abs() < 1e-18);
    assert!((lr_schedule_ce(1, w, d) - (d as f64).powf(-0.5) * (w as f64).powf(-1.5)).abs() < 1e-18);
}

#[test]
fn ce_schedule_shape() {
    let (w, d) = (400usize, 64usize);
    for s in 1..w {
        assert!(lr_schedule_ce(s + 1, w, d) > lr_schedule_ce(s, w, d));
    }
    for s in w..5 * w {
        assert!(lr_schedule_ce(s + 1, w, d) < lr_schedule_ce(s, w, d));
    }
    let peak = lr_schedule_ce(w, w, d);
    assert!((lr_schedule_ce(w - 1, w, d) - peak).abs() < peak * 0.01);
    assert!((lr_schedule_ce(w + 1, w, d) - peak).abs() < peak * 0.01);
}

#[test]
fn plateau_halving_follows_hand_trace() {
    assert_eq!(lr_schedule_scst(&[1.0, 2.0, 3.0, 4.0, 5.0], 1e-6, 3, 1e-9), 1e-6);
    assert_eq!(lr_schedule_scst(&[5.0, 4.0, 4.0, 3.0], 1e-6, 3, 1e-9), 5e-7);
    // Two plateaus: the counter resets after each halving and after any
    // improvement.
    let history = [1.0, 1.2, 1.1, 1.2, 1.0, 1.3, 1.3, 1.25, 1.3, 1.4, 1.39, 1.2, 1.1];
    let expected = [1e-6, 1e-6, 1e-6, 1e-6, 5e-7, 5e-7, 5e-7, 5e-7, 2.5e-7, 2.5e-7, 2.5e-7, 2.5e-7, 1.25e-7];
    let mut p = Plateau::new(1e-6, 3, 1e-9);
    for (i, (&m, &lr)) in history.iter().zip(&expected).enumerate() {
        assert_eq!(p.observe(m), lr, "evaluation {i}");
        assert_eq!(lr_schedule_scst(&history[..=i], 1e-6, 3, 1e-9), lr);
    }
    let mut floor = Plateau::new(4e-9, 1, 1e-9);
    floor.observe(1.0);
    let lrs: Vec<f64> = (0..4).map(|_| floor.observe(0.0)).collect();
    assert_eq!(lrs, vec![2e-9, 1e-9, 1e-9, 1e-9]);
}

fn random_grads(rng: &mut ChaCha8Rng, scale: f64) -> (ParamStore, ParamGrads) {
    let mut store = ParamStore::new();
    let ids: Vec<_> = (0..3).map(|i| store.insert(format!("p{i}"), Tensor::zeros(&[2, 3]), true)).collect();
    let mut grads = ParamGrads::new(store.len());
    for id in ids {
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-scale..scale)).collect();
        grads.accumulate(id, &Tensor::matrix(2, 3, data).unwrap());
    }
    (store, grads)
}

#[test]
fn global_norm_clipping_bounds_the_norm() {
    let mut rng = rng(3);
    for _ in 0..200 {
        let scale = [1e-3, 0.01, 0.5, 10.0][rng.gen_range(0..4)];
        let (_, mut g) = random_grads(&mut rng, scale);
        let before = g.clone();
        let pre = clip_gradients(&mut g, 0.1, ClipMode::Norm);
        assert!((pre - before.global_norm()).abs() < 1e-15);
        if pre > 0.1 {
            assert!(g.global_norm() <= 0.1 + 1e-12);
            assert!((g.global_norm() - 0.1).abs() < 1e-12);
        } else {
            assert_eq!(g, before);
        }
    }
    let (_, mut g) = random_grads(&mut rng, 5.0);
    clip_gradients(&mut g, 0.1, ClipMode::Value);
    assert!(g.iter().all(|(_, t)| t.data().iter().all(|v| v.abs() <= 0.1)));
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut rng = rng(4);
    let (mut store, grads) = random_grads(&mut rng, 1.0);
    let frozen = store.insert("frozen", Tensor::zeros(&[2]), false);
    let mut adam = Adam::new(AdamConfig::default());
    adam.update(&mut store, &grads, 1e-3);
    for (id, g) in grads.iter() {
        for (p, gv) in store.get(id).data().iter().zip(g.data()) {
            // Bias-corrected first step is -lr * sign(g) up to epsilon.
            assert!((p + 1e-3 * gv.signum()).abs() < 1e-9, "{p} {gv}");
        }
    }
    assert_eq!(store.get(frozen).data(), &[0.0, 0.0]);
    assert_eq!(adam.steps(), 1);
}

// ---------- cross-entropy ----------

fn image_with(model: &Captioner, inputs: ObjectInputs, seqs: Vec<Vec<TokenEvent>>) -> PreparedImage {
    let refs = seqs.iter().map(|s| s.iter().map(|e| model.surface(&inputs, *e).unwrap().to_string()).collect()).collect();
    PreparedImage { id: "x".into(), inputs, refs, targets: seqs }
}

fn set(model: &mut Captioner, name: &str, t: Tensor) {
    let id = model.params().id(name).unwrap();
    model.params_mut().set(id, t).unwrap();
}

fn zeros_like(model: &Captioner, name: &str) -> Tensor {
    Tensor::zeros(model.params().by_name(name).unwrap().shape())
}

#[test]
fn uniform_head_gives_log_n_per_step() {
    let mut m = model(with_morph(tiny_config(8, 2), MorphMode::Disabled));
    for name in ["head.w_e", "head.w_h", "head.w_c", "head.w_f"] {
        let z = zeros_like(&m, name);
        set(&mut m, name, z);
    }
    let inputs = random_inputs(&mut rng(2), 6, &["dog", "cake"], 2, m.morph());
    let eos = m.vocab().eos();
    let seqs = vec![vec![TokenEvent::Word(3), TokenEvent::Copy { object: 1, form: 0 }, TokenEvent::Word(eos)], vec![TokenEvent::Word(eos)]];
    let img = image_with(&m, inputs, seqs);
    let (loss, _) = ce_step(&m, &[&img], None).unwrap();
    let n = (m.vocab().len() + 2) as f64;
    assert!((loss - n.ln()).abs() < 1e-12, "{loss} vs {}", n.ln());
}

#[test]
fn certain_targets_give_zero_loss() {
    let mut m = model(tiny_config(8, 2));
    // A zero final gain makes every decoder state equal to the shift vector.
    let d = m.config().d;
    set(&mut m, "dec0.ln3.g", Tensor::zeros(&[d]));
    let u: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    set(&mut m, "dec0.ln3.b", Tensor::vector(u.clone()).unwrap());
    let eos = m.vocab().eos() as usize;
    let v = m.vocab().len();
    let mut w_e = vec![0.0; d * v];
    for (i, ui) in u.iter().enumerate() {
        w_e[i * v + eos] = 200.0 * ui;
    }
    set(&mut m, "head.w_e", Tensor::matrix(d, v, w_e).unwrap());
    let z = zeros_like(&m, "head.w_c");
    set(&mut m, "head.w_c", z);
    let inputs = random_inputs(&mut rng(3), 6, &["dog"], 1, m.morph());
    let e = TokenEvent::Word(eos as u32);
    let img = image_with(&m, inputs, vec![vec![e], vec![e, e]]);
    let (loss, grads) = ce_step(&m, &[&img], None).unwrap();
    assert!(loss.abs() < 1e-12, "{loss}");
    assert!(grads.global_norm() < 1e-12);
}

#[test]
fn ce_step_gradient_matches_finite_differences() {
    let m = model(tiny_config(8, 2));
    let inputs = random_inputs(&mut rng(6), 6, &["dog", "tri"], 1, m.morph());
    let eos = m.vocab().eos();
    let img = image_with(&m, inputs, vec![vec![TokenEvent::Copy { object: 1, form: 2 }, TokenEvent::Word(eos)]]);
    let ids: Vec<_> = m.params().ids().collect();
    let report = check_params(m.params(), &ids, 6, FD_STEP, |store| {
        let mm = Captioner::from_parts(m.config().clone(), m.vocab().clone(), m.morph().clone(), m.abstract_labels().to_vec(), store.clone())?;
        let (loss, grads) = ce_step(&mm, &[&img], None).map_err(|e| copycap::captioner::CaptionerError::Config(e.to_string()))?;
        Ok::<_, copycap::captioner::CaptionerError>((loss, grads))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
}

// ---------- corpus, VOA, end-to-end ----------

fn tiny_corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = GeneratorConfig { train_images: 100, val_images: 10, seed: 4, ..GeneratorConfig::default() };
        Corpus::from_synthetic(generate_synthetic(&cfg).unwrap())
    })
}

fn desk_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.eval.images = Some(4);
    cfg
}

#[test]
fn voa_filter_examples() {
    let morph = copycap::datakit::build_morph_table(["hamburger"], &copycap::datakit::PluralRules::default());
    let obj = CopyObject {
        label: "hamburger".into(),
        forms: morph.forms_or_base("hamburger"),
        abstract_index: 0,
        confidence: 0.9,
        roi: vec![0.0; 4],
        pos: [0.0; copycap::captioner::POS_DIM],
    };
    let with = PreparedImage {
        id: "a".into(),
        inputs: ObjectInputs { copyable: vec![obj], visual: vec![] },
        refs: vec![toks("two hamburgers on a table"), toks("food on a table")],
        targets: vec![vec![TokenEvent::Word(2)], vec![TokenEvent::Word(3)]],
    };
    let without = PreparedImage { id: "b".into(), inputs: ObjectInputs { copyable: vec![], visual: vec![] }, ..with.clone() };
    let kept = voa_filter(&[with.clone(), without], &morph);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].refs, vec![toks("two hamburgers on a table")]);
    assert_eq!(kept[0].targets, vec![vec![TokenEvent::Word(2)]]);
    assert!((voa_fraction(&[with], &morph) - 0.5).abs() < 1e-15);
}

#[test]
fn synthetic_voa_fraction_matches_generator_expectation() {
    let gen = GeneratorConfig::default();
    let syn = generate_synthetic(&gen).unwrap();
    let expected = syn.stats[Split::Train.as_str()].expected_voa_fraction;
    let corpus = Corpus::from_synthetic(syn);
    let cfg = RunConfig::default();
    let m = init_model(&corpus, &cfg.model, 0).unwrap();
    let data = prepare_corpus(&corpus, &m, &cfg.filter).unwrap();
    let got = voa_fraction(&data.train, &data.morph);
    assert!((got - expected).abs() <= 0.03, "{got} vs {expected}");
}

#[test]
fn zero_epochs_keep_initialization() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus().save(&dir.path().join("data")).unwrap();
    let mut cfg = desk_run();
    cfg.data_dir = dir.path().join("data");
    cfg.out_dir = dir.path().join("ce");
    cfg.ce.epochs = 0;
    cfg.seed = 3;
    let out = train(&cfg).unwrap();
    let init = init_model(tiny_corpus(), &cfg.model, 3).unwrap();
    assert_eq!(out.model.params(), init.params());
    let saved = Captioner::load(&cfg.out_dir).unwrap();
    assert_eq!(saved.params(), init.params());
    assert!(cfg.out_dir.join(LOG_FILE).exists());

    // SCST needs a checkpoint to start from.
    let mut scst = cfg.clone();
    scst.stage = Stage::Scst;
    scst.out_dir = dir.path().join("scst");
    assert!(matches!(train(&scst), Err(TrainError::Config(_))));
}

#[test]
fn ce_memorizes_ten_examples() {
    let corpus = tiny_corpus();
    let mut cfg = desk_run();
    cfg.model.dropout = 0.0;
    let mut m = init_model(corpus, &cfg.model, 1).unwrap();
    let data = prepare_corpus(corpus, &m, &cfg.filter).unwrap();
    let set: Vec<PreparedImage> = data
        .train
        .iter()
        .take(10)
        .map(|img| PreparedImage { refs: img.refs[..1].to_vec(), targets: img.targets[..1].to_vec(), ..img.clone() })
        .collect();
    cfg.ce = CeConfig { epochs: 300, batch_size: 10, warmup: Some(30), ..CeConfig::default() };
    let mut log = Vec::new();
    train_ce(&mut m, &set, &cfg, &mut log).unwrap();
    let refs: Vec<&PreparedImage> = set.iter().collect();
    let (loss, _) = ce_step(&m, &refs, None).unwrap();
    assert!(loss < 0.1, "memorization loss {loss}");
}

#[test]
fn same_seed_gives_identical_logs() {
    let corpus = tiny_corpus();
    let run = || {
        let mut cfg = desk_run();
        cfg.ce.epochs = 1;
        let mut m = init_model(corpus, &cfg.model, 2).unwrap();
        let data = prepare_corpus(corpus, &m, &cfg.filter).unwrap();
        let mut log = run_stage(&mut m, &data, &cfg).unwrap();
        cfg.stage = Stage::Scst;
        cfg.scst.epochs = 1;
        cfg.scst.eval_every = 3;
        cfg.reward.kind = RewardKind::Proportional;
        log.extend(run_stage(&mut m, &data, &cfg).unwrap());
        (log, m.params().clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.iter().any(|r| r.stage == Stage::Scst && r.reward.is_some()));
}

#[test]
fn voa_only_ce_still_trains() {
    let corpus = tiny_corpus();
    let mut cfg = desk_run();
    cfg.ce.epochs = 1;
    cfg.reward.voa_only = true;
    let mut m = init_model(corpus, &cfg.model, 0).unwrap();
    let data = prepare_corpus(corpus, &m, &cfg.filter).unwrap();
    let log = run_stage(&mut m, &data, &cfg).unwrap();
    assert_eq!(log.len(), 1);
    assert!(log[0].loss.is_finite());
    assert_eq!(log[0].eval.len(), 3);
}

#[test]
fn unrepresentable_reference_is_reported() {
    let m = model(tiny_config(8, 2));
    let inputs = random_inputs(&mut rng(1), 6, &["dog"], 0, m.morph());
    assert!(align(&m, &inputs, &toks("a dog")).is_ok());
    assert!(align(&m, &inputs, &toks("a zeppelin")).is_err());
    let cfg = ModelConfig { max_len: 3, ..tiny_config(8, 2) };
    let short = model(cfg);
    let ev = align(&short, &inputs, &toks("a red dog near two")).unwrap();
    assert_eq!(ev.len(), 3);
    assert_eq!(*ev.last().unwrap(), TokenEvent::Word(short.vocab().eos()));
}
