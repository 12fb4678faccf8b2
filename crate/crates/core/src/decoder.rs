//! Caption generation: beam search, greedy decoding, sampling, and the
//! inference-bias transform.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{Captioner, CaptionerError, DecState, ObjectInputs, OutputDistribution, Session, StepMask};
use crate::tokens::TokenEvent;

/// e^2, the repeated-bigram penalty.
pub const E2: f64 = 7.38905609893065;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] CaptionerError),
    #[error("inference bias must be positive, got {0}")]
    BadBias(f64),
    #[error("every outcome is masked at step {0}")]
    AllMasked(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub bigram_penalty: f64,
    /// Divide negative log-probabilities by the penalty instead of
    /// multiplying, which rewards repeats.
    pub literal_division: bool,
    pub length_normalize: bool,
    pub copy_once: bool,
    pub scst_vocab_mask: bool,
    pub inference_bias: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len: 20,
            bigram_penalty: E2,
            literal_division: false,
            length_normalize: true,
            copy_once: true,
            scst_vocab_mask: false,
            inference_bias: 1.0,
        }
    }
}

impl DecodeConfig {
    /// Settings for policy sampling and its greedy baseline.
    pub fn scst() -> Self {
        Self { beam_size: 1, bigram_penalty: 1.0, scst_vocab_mask: true, ..Self::default() }
    }
}

/// Multiplies copy probabilities by `b` and renormalizes; `b = 1` returns
/// the input unchanged.
pub fn apply_inference_bias(dist: &OutputDistribution, b: f64) -> Result<OutputDistribution, DecodeError> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(DecodeError::BadBias(b));
    }
    if b == 1.0 {
        return Ok(dist.clone());
    }
    let mut out = dist.clone();
    out.copy.iter_mut().flatten().for_each(|p| *p *= b);
    out.normalized().ok_or(DecodeError::AllMasked(0))
}

/// Penalizes `logprob` when `candidate` would repeat a bigram of `history`.
pub fn bigram_penalty<T: PartialEq>(logprob: f64, candidate: &T, history: &[T], penalty: f64, literal_division: bool) -> f64 {
    let Some(last) = history.last() else { return logprob };
    let repeats = history.windows(2).any(|w| &w[0] == last && &w[1] == candidate);
    if !repeats {
        logprob
    } else if literal_division {
        logprob / penalty
    } else {
        logprob * penalty
    }
}

/// Vocabulary entries that spell a form of any copyable object.
pub fn copyable_vocab_ids(model: &Captioner, inputs: &ObjectInputs) -> Vec<u32> {
    let mut ids: Vec<u32> = inputs.copyable.iter().flat_map(|o| o.forms.iter()).filter_map(|f| model.vocab().id(f)).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub events: Vec<TokenEvent>,
    /// Sum of (penalized) log-probabilities.
    pub log_prob: f64,
    /// Ranking score: `log_prob` over the number of emitted steps when
    /// length normalization is on.
    pub score: f64,
    pub ended: bool,
}

#[derive(Clone)]
struct Live {
    events: Vec<TokenEvent>,
    surfaces: Vec<String>,
    copied: Vec<usize>,
    log_prob: f64,
    state: DecState,
}

fn compare_candidates(a: (f64, bool, &[TokenEvent]), b: (f64, bool, &[TokenEvent])) -> Ordering {
    b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then_with(|| a.2.cmp(b.2))
}

struct Stepper<'a, 'm> {
    sess: Session<'m>,
    cfg: &'a DecodeConfig,
    vocab_mask: Vec<u32>,
}

impl<'a, 'm> Stepper<'a, 'm> {
    fn new(model: &'m Captioner, inputs: &'m ObjectInputs, cfg: &'a DecodeConfig) -> Result<Self, DecodeError> {
        if !(cfg.inference_bias > 0.0) {
            return Err(DecodeError::BadBias(cfg.inference_bias));
        }
        // The begin marker is never a valid output.
        let mut vocab_mask = vec![model.vocab().bos()];
        if cfg.scst_vocab_mask {
            vocab_mask.extend(copyable_vocab_ids(model, inputs));
        }
        Ok(Self { sess: model.session(inputs)?, cfg, vocab_mask })
    }

    fn mask(&self, copied: &[usize]) -> StepMask {
        StepMask { hidden_words: self.vocab_mask.clone(), hidden_objects: if self.cfg.copy_once { copied.to_vec() } else { Vec::new() } }
    }

    fn dist(&mut self, st: &DecState, copied: &[usize], step: usize) -> Result<OutputDistribution, DecodeError> {
        let mut d = self.sess.distribution(st)?;
        if self.cfg.inference_bias != 1.0 {
            d = apply_inference_bias(&d, self.cfg.inference_bias)?;
        }
        let m = self.mask(copied);
        d.masked(&m.hidden_words, &m.hidden_objects).ok_or(DecodeError::AllMasked(step))
    }

    fn surface(&self, ev: TokenEvent) -> Result<String, DecodeError> {
        Ok(self.sess.model().surface(self.sess.inputs(), ev)?.to_string())
    }

    fn scored(&self, live: &Live, ev: TokenEvent, p: f64) -> Result<f64, DecodeError> {
        let lp = p.ln();
        if self.cfg.bigram_penalty == 1.0 {
            return Ok(lp);
        }
        let s = self.surface(ev)?;
        Ok(bigram_penalty(lp, &s, &live.surfaces, self.cfg.bigram_penalty, self.cfg.literal_division))
    }

    fn extend(&mut self, live: &Live, ev: TokenEvent, log_prob: f64) -> Result<Live, DecodeError> {
        let mut next = live.clone();
        next.surfaces.push(self.surface(ev)?);
        next.events.push(ev);
        next.log_prob = log_prob;
        if let TokenEvent::Copy { object, .. } = ev {
            next.copied.push(object);
        }
        next.state = self.sess.advance(&live.state, ev)?;
        Ok(next)
    }

    fn root(&mut self) -> Result<Live, DecodeError> {
        Ok(Live { events: Vec::new(), surfaces: Vec::new(), copied: Vec::new(), log_prob: 0.0, state: self.sess.start()? })
    }
}

fn finish(events: Vec<TokenEvent>, log_prob: f64, ended: bool, cfg: &DecodeConfig) -> Hypothesis {
    let len = events.len().max(1) as f64;
    let score = if cfg.length_normalize { log_prob / len } else { log_prob };
    Hypothesis { events, log_prob, score, ended }
}

fn rank(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then(a.events.len().cmp(&b.events.len())).then_with(|| a.events.cmp(&b.events))
    });
}

/// Beam search. Each step keeps the `beam_size` best expansions; those
/// ending in EOS (or reaching `max_len`) leave the beam. Returns every
/// finished hypothesis, best first.
pub fn beam_search(model: &Captioner, inputs: &ObjectInputs, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    let eos = TokenEvent::Word(model.vocab().eos());
    let mut st = Stepper::new(model, inputs, cfg)?;
    let mut live = vec![st.root()?];
    let mut finished = Vec::new();
    let beam = cfg.beam_size.max(1);
    for step in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let mut cands: Vec<(usize, TokenEvent, f64, Vec<TokenEvent>)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let d = st.dist(&h.state, &h.copied, step)?;
            for (ev, p) in d.entries() {
                if p <= 0.0 {
                    continue;
                }
                let lp = h.log_prob + st.scored(h, ev, p)?;
                let mut seq = h.events.clone();
                seq.push(ev);
                cands.push((hi, ev, lp, seq));
            }
        }
        cands.sort_by(|a, b| compare_candidates((a.2, a.1 == eos, &a.3), (b.2, b.1 == eos, &b.3)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (hi, ev, lp, seq) in cands {
            if ev == eos {
                finished.push(finish(seq, lp, true, cfg));
            } else if step + 1 == cfg.max_len {
                finished.push(finish(seq, lp, false, cfg));
            } else {
                next.push(st.extend(&live[hi], ev, lp)?);
            }
        }
        live = next;
    }
    rank(&mut finished);
    Ok(finished)
}

/// Step-by-step argmax of the same penalized scores beam search uses.
pub fn greedy(model: &Captioner, inputs: &ObjectInputs, cfg: &DecodeConfig) -> Result<Hypothesis, DecodeError> {
    let eos = TokenEvent::Word(model.vocab().eos());
    let mut st = Stepper::new(model, inputs, cfg)?;
    let mut cur = st.root()?;
    for step in 0..cfg.max_len {
        let d = st.dist(&cur.state, &cur.copied, step)?;
        let mut best: Option<(TokenEvent, f64)> = None;
        for (ev, p) in d.entries() {
            if p <= 0.0 {
                continue;
            }
            let lp = cur.log_prob + st.scored(&cur, ev, p)?;
            let better = match best {
                None => true,
                Some((bev, blp)) => match lp.total_cmp(&blp) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => (ev == eos && bev != eos) || ((ev == eos) == (bev == eos) && ev < bev),
                },
            };
            if better {
                best = Some((ev, lp));
            }
        }
        let (ev, lp) = best.ok_or(DecodeError::AllMasked(step))?;
        if ev == eos {
            cur.events.push(ev);
            return Ok(finish(cur.events, lp, true, cfg));
        }
        if step + 1 == cfg.max_len {
            cur.events.push(ev);
            return Ok(finish(cur.events, lp, false, cfg));
        }
        cur = st.extend(&cur, ev, lp)?;
    }
    Ok(finish(cur.events, cur.log_prob, false, cfg))
}

/// A sampled caption with the exact log-probability and mask of each step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCaption {
    pub events: Vec<TokenEvent>,
    pub log_probs: Vec<f64>,
    pub masks: Vec<StepMask>,
}

/// Draws one outcome index from probabilities summing to one.
pub fn draw<R: Rng + ?Sized>(probs: impl IntoIterator<Item = f64>, rng: &mut R) -> Option<usize> {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, p) in probs.into_iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return Some(i);
        }
    }
    last
}

/// Multinomial sampling from each step's masked distribution. No bigram
/// penalty applies.
pub fn sample_caption<R: Rng + ?Sized>(model: &Captioner, inputs: &ObjectInputs, cfg: &DecodeConfig, rng: &mut R) -> Result<SampledCaption, DecodeError> {
    let eos = TokenEvent::Word(model.vocab().eos());
    let mut st = Stepper::new(model, inputs, cfg)?;
    let mut cur = st.root()?;
    let mut out = SampledCaption { events: Vec::new(), log_probs: Vec::new(), masks: Vec::new() };
    for step in 0..cfg.max_len {
        let d = st.dist(&cur.state, &cur.copied, step)?;
        let entries: Vec<(TokenEvent, f64)> = d.entries().collect();
        let i = draw(entries.iter().map(|e| e.1), rng).ok_or(DecodeError::AllMasked(step))?;
        let (ev, p) = entries[i];
        out.events.push(ev);
        out.log_probs.push(p.ln());
        out.masks.push(st.mask(&cur.copied));
        if ev == eos || step + 1 == cfg.max_len {
            break;
        }
        cur = st.extend(&cur, ev, 0.0)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Vocab,
    Copy { object: usize, form: usize, label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub word: String,
    #[serde(flatten)]
    pub source: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCaption {
    pub text: String,
    pub score: f64,
    pub tokens: Vec<TokenRecord>,
}

impl RankedCaption {
    /// Whitespace tokens of the caption; multi-word forms split apart.
    pub fn words(&self) -> Vec<String> {
        self.tokens.iter().flat_map(|t| t.word.split_whitespace().map(str::to_string)).collect()
    }

    pub fn copies(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t.source, Provenance::Copy { .. })).count()
    }

    pub fn copied_words(&self) -> Vec<String> {
        self.tokens
            .iter()
            .filter(|t| matches!(t.source, Provenance::Copy { .. }))
            .flat_map(|t| t.word.split_whitespace().map(str::to_string))
            .collect()
    }
}

/// One line of a decode output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub image_id: String,
    pub captions: Vec<RankedCaption>,
}

impl DecodeRecord {
    pub fn top(&self) -> Option<&RankedCaption> {
        self.captions.first()
    }
}

/// Provenance-annotated caption text; the end marker is dropped.
pub fn render(model: &Captioner, inputs: &ObjectInputs, events: &[TokenEvent], score: f64) -> Result<RankedCaption, DecodeError> {
    let eos = TokenEvent::Word(model.vocab().eos());
    let mut tokens = Vec::new();
    for &ev in events.iter().filter(|&&e| e != eos) {
        let word = model.surface(inputs, ev)?.to_string();
        let source = match ev {
            TokenEvent::Word(_) => Provenance::Vocab,
            TokenEvent::Copy { object, form } => Provenance::Copy { object, form, label: inputs.copyable[object].label.clone() },
        };
        tokens.push(TokenRecord { word, source });
    }
    let text = tokens.iter().map(|t| t.word.as_str()).collect::<Vec<_>>().join(" ");
    Ok(RankedCaption { text, score, tokens })
}

/// Beam-decodes one image into a record holding up to `keep` captions.
pub fn decode_image(model: &Captioner, image_id: &str, inputs: &ObjectInputs, cfg: &DecodeConfig, keep: usize) -> Result<DecodeRecord, DecodeError> {
    let hyps = if cfg.beam_size <= 1 { vec![greedy(model, inputs, cfg)?] } else { beam_search(model, inputs, cfg)? };
    let captions = hyps.iter().take(keep.max(1)).map(|h| render(model, inputs, &h.events, h.score)).collect::<Result<_, _>>()?;
    Ok(DecodeRecord { image_id: image_id.to_string(), captions })
}

pub fn write_records(path: &std::path::Path, records: &[DecodeRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn read_records(path: &std::path::Path) -> std::io::Result<Vec<DecodeRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}
