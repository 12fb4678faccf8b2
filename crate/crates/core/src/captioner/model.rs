use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CaptionerError, CopyObject, ModelConfig, MorphMode, ObjectInputs, OutputDistribution, POS_DIM};
use crate::datakit::MorphTable;
use crate::numcore::{Axis, Graph, Mask, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use crate::tokens::{TokenEvent, Vocabulary};

#[derive(Debug, Clone)]
struct Ln {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Attn {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: Vec<ParamId>,
    o: ParamId,
}

#[derive(Debug, Clone)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    attn: Attn,
    ln1: Ln,
    ffn: Ffn,
    ln2: Ln,
}

#[derive(Debug, Clone)]
struct DecLayer {
    self_attn: Attn,
    ln1: Ln,
    cross: Attn,
    ln2: Ln,
    ffn: Ffn,
    ln3: Ln,
}

/// Parameter handles, resolved by name.
#[derive(Debug, Clone)]
struct Layout {
    word: ParamId,
    pos: ParamId,
    abstract_emb: Option<ParamId>,
    w_r: ParamId,
    w_p: ParamId,
    ln_r: Ln,
    ln_p: Ln,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    w_e: ParamId,
    w_f: ParamId,
    w_h: ParamId,
    w_c: ParamId,
    morph: BTreeMap<String, ParamId>,
}

/// Registers parameters on first use, or looks them up when loading.
struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl Builder<'_> {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId, CaptionerError> {
        if let Some(rng) = self.rng.as_mut() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| normal.sample(rng)).collect()
                }
            };
            return Ok(self.store.insert(name, Tensor::new(shape.to_vec(), data)?, true));
        }
        let id = self.store.id(name).ok_or_else(|| CaptionerError::Format(format!("missing parameter `{name}`")))?;
        if self.store.get(id).shape() != shape {
            return Err(CaptionerError::Format(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                self.store.get(id).shape()
            )));
        }
        Ok(id)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, CaptionerError> {
        self.get(name, &[rows, cols], Init::Normal(1.0 / (rows as f64).sqrt()))
    }

    fn ln(&mut self, name: &str, d: usize) -> Result<Ln, CaptionerError> {
        Ok(Ln { g: self.get(&format!("{name}.g"), &[d], Init::Ones)?, b: self.get(&format!("{name}.b"), &[d], Init::Zeros)? })
    }

    fn attn(&mut self, name: &str, cfg: &ModelConfig) -> Result<Attn, CaptionerError> {
        let (d, dh) = (cfg.d, cfg.head_dim());
        let mut heads = |part: &str| -> Result<Vec<ParamId>, CaptionerError> {
            (0..cfg.heads).map(|h| self.matrix(&format!("{name}.h{h}.{part}"), d, dh)).collect()
        };
        let (q, k, v) = (heads("q")?, heads("k")?, heads("v")?);
        Ok(Attn { q, k, v, o: self.matrix(&format!("{name}.o"), d, d)? })
    }

    fn ffn(&mut self, name: &str, cfg: &ModelConfig) -> Result<Ffn, CaptionerError> {
        Ok(Ffn {
            w1: self.matrix(&format!("{name}.w1"), cfg.d, cfg.ffn)?,
            b1: self.get(&format!("{name}.b1"), &[cfg.ffn], Init::Zeros)?,
            w2: self.matrix(&format!("{name}.w2"), cfg.ffn, cfg.d)?,
            b2: self.get(&format!("{name}.b2"), &[cfg.d], Init::Zeros)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Outcomes removed from one decoding step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepMask {
    pub hidden_words: Vec<u32>,
    pub hidden_objects: Vec<usize>,
}

impl StepMask {
    pub fn is_empty(&self) -> bool {
        self.hidden_words.is_empty() && self.hidden_objects.is_empty()
    }
}

/// Teacher-forced log-likelihood of a batch of sequences for one image.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// Scalar sum of target log-probabilities.
    pub total: Var,
    pub steps: usize,
    pub per_step: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Captioner {
    config: ModelConfig,
    vocab: Vocabulary,
    morph: MorphTable,
    abstract_labels: Vec<String>,
    params: ParamStore,
    layout: Layout,
}

impl Captioner {
    /// Fresh model with seeded initialization. Every label form in `morph`
    /// must already be a vocabulary entry.
    pub fn new(config: ModelConfig, vocab: Vocabulary, morph: MorphTable, abstract_labels: Vec<String>) -> Result<Self, CaptionerError> {
        config.validate()?;
        for form in morph.all_forms() {
            if vocab.id(form).is_none() {
                return Err(CaptionerError::UnregisteredForm(form.to_string()));
            }
        }
        let mut params = ParamStore::new();
        let layout = Self::build_layout(&config, &vocab, &morph, &abstract_labels, &mut params, true)?;
        let mut model = Self { config, vocab, morph, abstract_labels, params, layout };
        model.init_frozen_tables()?;
        Ok(model)
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        morph: MorphTable,
        abstract_labels: Vec<String>,
        mut params: ParamStore,
    ) -> Result<Self, CaptionerError> {
        config.validate()?;
        let layout = Self::build_layout(&config, &vocab, &morph, &abstract_labels, &mut params, false)?;
        Ok(Self { config, vocab, morph, abstract_labels, params, layout })
    }

    fn build_layout(
        cfg: &ModelConfig,
        vocab: &Vocabulary,
        morph: &MorphTable,
        abstract_labels: &[String],
        store: &mut ParamStore,
        fresh: bool,
    ) -> Result<Layout, CaptionerError> {
        let d = cfg.d;
        let mut b = Builder { store, rng: fresh.then(|| ChaCha8Rng::seed_from_u64(cfg.seed)) };
        let word = b.get("emb.word", &[vocab.len(), d], Init::Zeros)?;
        let pos = b.get("emb.pos", &[cfg.max_len + 1, d], Init::Zeros)?;
        let abstract_emb = if cfg.abstract_labels {
            if abstract_labels.is_empty() {
                return Err(CaptionerError::Config("abstract labels enabled but none given".into()));
            }
            Some(b.get("obj.abstract", &[abstract_labels.len(), d], Init::Normal(0.5))?)
        } else {
            None
        };
        let w_r = b.matrix("obj.w_r", cfg.d_roi, d)?;
        let w_p = b.matrix("obj.w_p", POS_DIM, d)?;
        let ln_r = b.ln("obj.ln_r", d)?;
        let ln_p = b.ln("obj.ln_p", d)?;
        let enc = (0..cfg.n_enc)
            .map(|l| {
                Ok(EncLayer {
                    attn: b.attn(&format!("enc{l}.attn"), cfg)?,
                    ln1: b.ln(&format!("enc{l}.ln1"), d)?,
                    ffn: b.ffn(&format!("enc{l}.ffn"), cfg)?,
                    ln2: b.ln(&format!("enc{l}.ln2"), d)?,
                })
            })
            .collect::<Result<Vec<_>, CaptionerError>>()?;
        let dec = (0..cfg.n_dec)
            .map(|l| {
                Ok(DecLayer {
                    self_attn: b.attn(&format!("dec{l}.self"), cfg)?,
                    ln1: b.ln(&format!("dec{l}.ln1"), d)?,
                    cross: b.attn(&format!("dec{l}.cross"), cfg)?,
                    ln2: b.ln(&format!("dec{l}.ln2"), d)?,
                    ffn: b.ffn(&format!("dec{l}.ffn"), cfg)?,
                    ln3: b.ln(&format!("dec{l}.ln3"), d)?,
                })
            })
            .collect::<Result<Vec<_>, CaptionerError>>()?;
        let w_e = b.matrix("head.w_e", d, vocab.len())?;
        let w_f = b.matrix("head.w_f", d, d)?;
        let w_h = b.matrix("head.w_h", d, d)?;
        let w_c = b.matrix("head.w_c", d, 1)?;
        let mut morph_ids = BTreeMap::new();
        match cfg.morph {
            MorphMode::Disabled => {}
            MorphMode::Shared => {
                let counts: std::collections::BTreeSet<usize> = morph.iter().map(|(_, f)| f.len()).filter(|&s| s > 1).collect();
                for s in counts {
                    let key = format!("morph.s{s}");
                    morph_ids.insert(key.clone(), b.matrix(&key, d, s)?);
                }
            }
            MorphMode::PerLabel => {
                for (label, forms) in morph.iter().filter(|(_, f)| f.len() > 1) {
                    let key = format!("morph.label.{label}");
                    morph_ids.insert(key.clone(), b.matrix(&key, d, forms.len())?);
                }
            }
        }
        let layout = Layout { word, pos, abstract_emb, w_r, w_p, ln_r, ln_p, enc, dec, w_e, w_f, w_h, w_c, morph: morph_ids };
        if fresh {
            for id in [word, pos] {
                let t = b.store.get(id).clone();
                b.store.insert(b.store.name(id).to_string(), t, false);
            }
        }
        Ok(layout)
    }

    fn init_frozen_tables(&mut self) -> Result<(), CaptionerError> {
        let d = self.config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.embedding_seed);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut word: Vec<f64> = (0..self.vocab.len() * d).map(|_| normal.sample(&mut rng)).collect();
        let pos: Vec<f64> = (0..(self.config.max_len + 1) * d).map(|_| normal.sample(&mut rng)).collect();
        if let Some(path) = &self.config.embedding_file {
            let text = std::fs::read_to_string(path)?;
            let table: BTreeMap<String, Vec<f64>> =
                serde_json::from_str(&text).map_err(|e| CaptionerError::Format(format!("{}: {e}", path.display())))?;
            for (w, v) in table {
                if let Some(id) = self.vocab.id(&w) {
                    if v.len() != d {
                        return Err(CaptionerError::Format(format!("embedding for `{w}` has {} entries, expected {d}", v.len())));
                    }
                    word[id as usize * d..(id as usize + 1) * d].copy_from_slice(&v);
                }
            }
        }
        self.params.set(self.layout.word, Tensor::matrix(self.vocab.len(), d, word)?)?;
        self.params.set(self.layout.pos, Tensor::matrix(self.config.max_len + 1, d, pos)?)?;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn morph(&self) -> &MorphTable {
        &self.morph
    }

    pub fn abstract_labels(&self) -> &[String] {
        &self.abstract_labels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Number of selectable forms for a copyable object.
    pub fn form_count(&self, obj: &CopyObject) -> usize {
        match self.config.morph {
            MorphMode::Disabled => 1,
            _ => obj.forms.len().max(1),
        }
    }

    fn morph_key(&self, obj: &CopyObject) -> Option<String> {
        let s = self.form_count(obj);
        if s < 2 {
            return None;
        }
        Some(match self.config.morph {
            MorphMode::PerLabel => format!("morph.label.{}", obj.label),
            _ => format!("morph.s{s}"),
        })
    }

    /// Surface string of a decoding outcome.
    pub fn surface<'a>(&'a self, inputs: &'a ObjectInputs, event: TokenEvent) -> Result<&'a str, CaptionerError> {
        match event {
            TokenEvent::Word(w) if (w as usize) < self.vocab.len() => Ok(self.vocab.word(w)),
            TokenEvent::Word(w) => Err(CaptionerError::UnregisteredForm(format!("#{w}"))),
            TokenEvent::Copy { object, form } => {
                let obj = inputs.copyable.get(object).ok_or(CaptionerError::BadCopy { object, form })?;
                if form >= self.form_count(obj) {
                    return Err(CaptionerError::BadCopy { object, form });
                }
                Ok(&obj.forms[form])
            }
        }
    }

    /// Row of the frozen word table used when `event` is fed back.
    pub fn embedding_id(&self, inputs: &ObjectInputs, event: TokenEvent) -> Result<u32, CaptionerError> {
        let s = self.surface(inputs, event)?;
        match event {
            TokenEvent::Word(w) => Ok(w),
            TokenEvent::Copy { .. } => self.vocab.id(s).ok_or_else(|| CaptionerError::UnregisteredForm(s.to_string())),
        }
    }

    /// Frozen embedding of a decoding outcome.
    pub fn embed_token(&self, inputs: &ObjectInputs, event: TokenEvent) -> Result<Vec<f64>, CaptionerError> {
        let id = self.embedding_id(inputs, event)? as usize;
        Ok(self.params.get(self.layout.word).row(id).to_vec())
    }

    fn ln(&self, g: &mut Graph<'_>, x: Var, ln: &Ln) -> Result<Var, CaptionerError> {
        let (gain, shift) = (g.param(ln.g), g.param(ln.b));
        Ok(g.layer_norm(x, gain, shift, LAYER_NORM_EPS)?)
    }

    /// `x_i = LN(r_i W_r + e_i) + LN(p_i W_p)` for every object, copyable
    /// rows first. Visual objects use `e = 0`.
    pub fn object_representation(&self, g: &mut Graph<'_>, inputs: &ObjectInputs) -> Result<Var, CaptionerError> {
        let k = inputs.len();
        if k == 0 {
            return Err(CaptionerError::NoObjects);
        }
        let (d_roi, d) = (self.config.d_roi, self.config.d);
        let mut rois = Vec::with_capacity(k * d_roi);
        let mut pos = Vec::with_capacity(k * POS_DIM);
        for (roi, p) in inputs.copyable.iter().map(|o| (&o.roi, &o.pos)).chain(inputs.visual.iter().map(|o| (&o.roi, &o.pos))) {
            if roi.len() != d_roi {
                return Err(CaptionerError::Config(format!("roi has {} entries, model expects {d_roi}", roi.len())));
            }
            rois.extend_from_slice(roi);
            pos.extend_from_slice(p);
        }
        let r = g.constant(Tensor::matrix(k, d_roi, rois)?);
        let p = g.constant(Tensor::matrix(k, POS_DIM, pos)?);
        let w_r = g.param(self.layout.w_r);
        let mut a = g.matmul(r, w_r)?;
        if let (Some(abs), true) = (self.layout.abstract_emb, inputs.k_f() > 0) {
            let table = g.param(abs);
            let idx: Vec<usize> = inputs.copyable.iter().map(|o| o.abstract_index).collect();
            let mut e = g.gather_rows(table, &idx)?;
            if !inputs.visual.is_empty() {
                let zeros = g.constant(Tensor::zeros(&[inputs.visual.len(), d]));
                e = g.concat(&[e, zeros], Axis::Rows)?;
            }
            a = g.add(a, e)?;
        }
        let a = self.ln(g, a, &self.layout.ln_r)?;
        let w_p = g.param(self.layout.w_p);
        let pp = g.matmul(p, w_p)?;
        let pp = self.ln(g, pp, &self.layout.ln_p)?;
        Ok(g.add(a, pp)?)
    }

    fn attention(&self, g: &mut Graph<'_>, at: &Attn, q_in: Var, kv_in: Var, mask: Option<&Mask>) -> Result<Var, CaptionerError> {
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (wq, wk, wv) = (g.param(at.q[h]), g.param(at.k[h]), g.param(at.v[h]));
            let q = g.matmul(q_in, wq)?;
            let k = g.matmul(kv_in, wk)?;
            let v = g.matmul(kv_in, wv)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s, mask.cloned())?;
            heads.push(g.matmul(a, v)?);
        }
        let cat = g.concat(&heads, Axis::Cols)?;
        let wo = g.param(at.o);
        Ok(g.matmul(cat, wo)?)
    }

    fn ffn(&self, g: &mut Graph<'_>, f: &Ffn, x: Var) -> Result<Var, CaptionerError> {
        let (w1, b1, w2, b2) = (g.param(f.w1), g.param(f.b1), g.param(f.w2), g.param(f.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, self.config.dropout)?;
        let o = g.matmul(h, w2)?;
        Ok(g.add_row(o, b2)?)
    }

    fn residual_ln(&self, g: &mut Graph<'_>, x: Var, sub: Var, ln: &Ln) -> Result<Var, CaptionerError> {
        let sub = g.dropout(sub, self.config.dropout)?;
        let s = g.add(x, sub)?;
        self.ln(g, s, ln)
    }

    /// Transformer encoder over the object representations.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, CaptionerError> {
        let mut x = x;
        for layer in &self.layout.enc {
            let a = self.attention(g, &layer.attn, x, x, None)?;
            let x1 = self.residual_ln(g, x, a, &layer.ln1)?;
            let f = self.ffn(g, &layer.ffn, x1)?;
            x = self.residual_ln(g, x1, f, &layer.ln2)?;
        }
        Ok(x)
    }

    /// `W_f H_i` for the copyable rows of `h`.
    fn copy_keys(&self, g: &mut Graph<'_>, h: Var, k_f: usize) -> Result<Option<Var>, CaptionerError> {
        if k_f == 0 {
            return Ok(None);
        }
        let hf = g.slice_rows(h, 0, k_f)?;
        let w_f = g.param(self.layout.w_f);
        Ok(Some(g.matmul(hf, w_f)?))
    }

    /// Raw scores `[h W_e, w_c . tanh(W_f H_i + W_h h)]` per row of `hs`.
    fn head_scores(&self, g: &mut Graph<'_>, hs: Var, copy_keys: Option<Var>) -> Result<Var, CaptionerError> {
        let w_e = g.param(self.layout.w_e);
        let vscore = g.matmul(hs, w_e)?;
        let Some(keys) = copy_keys else { return Ok(vscore) };
        let w_h = g.param(self.layout.w_h);
        let w_c = g.param(self.layout.w_c);
        let query = g.matmul(hs, w_h)?;
        let mut parts = vec![vscore];
        for i in 0..g.value(keys).rows() {
            let key = g.slice_rows(keys, i, 1)?;
            let z = g.add_row(query, key)?;
            let z = g.tanh(z)?;
            parts.push(g.matmul(z, w_c)?);
        }
        Ok(g.concat(&parts, Axis::Cols)?)
    }

    /// Selector logits `h W_l` per morph key used by `inputs`.
    fn morph_logits(&self, g: &mut Graph<'_>, hs: Var, inputs: &ObjectInputs) -> Result<BTreeMap<String, Var>, CaptionerError> {
        let mut out = BTreeMap::new();
        for obj in &inputs.copyable {
            let Some(key) = self.morph_key(obj) else { continue };
            if out.contains_key(&key) {
                continue;
            }
            let id = *self
                .layout
                .morph
                .get(&key)
                .ok_or_else(|| CaptionerError::Config(format!("no selector parameters `{key}` for `{}`", obj.label)))?;
            let w = g.param(id);
            out.insert(key, g.matmul(hs, w)?);
        }
        Ok(out)
    }

    fn embed_rows(&self, g: &mut Graph<'_>, ids: &[usize], positions: &[usize]) -> Result<Var, CaptionerError> {
        if let Some(&p) = positions.iter().max() {
            if p > self.config.max_len {
                return Err(CaptionerError::TooLong { len: p + 1, max: self.config.max_len + 1 });
            }
        }
        let (word, pos) = (g.param(self.layout.word), g.param(self.layout.pos));
        let w = g.gather_rows(word, ids)?;
        let p = g.gather_rows(pos, positions)?;
        let y = g.add(w, p)?;
        Ok(g.dropout(y, self.config.dropout)?)
    }

    /// Sum of target log-probabilities for `seqs` (each ends with its EOS
    /// target) under teacher forcing, optionally with per-step masks.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<'_>,
        inputs: &ObjectInputs,
        seqs: &[&[TokenEvent]],
        masks: Option<&[&[StepMask]]>,
    ) -> Result<TeacherForced, CaptionerError> {
        let x = self.object_representation(g, inputs)?;
        let h = self.encode(g, x)?;
        let keys = self.copy_keys(g, h, inputs.k_f())?;

        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut seq_of = Vec::new();
        let mut targets = Vec::new();
        for (s, seq) in seqs.iter().enumerate() {
            ids.push(self.vocab.bos() as usize);
            for ev in &seq[..seq.len().saturating_sub(1)] {
                ids.push(self.embedding_id(inputs, *ev)? as usize);
            }
            positions.extend(0..seq.len());
            seq_of.extend(std::iter::repeat_n(s, seq.len()));
            targets.extend(seq.iter().enumerate().map(|(t, ev)| (s, t, *ev)));
        }
        let n = ids.len();
        if n == 0 {
            return Err(CaptionerError::Config("no target steps".into()));
        }
        let mut y = self.embed_rows(g, &ids, &positions)?;
        let allowed: Vec<bool> = (0..n * n).map(|i| seq_of[i / n] == seq_of[i % n] && i % n <= i / n).collect();
        let causal = Mask::from_allowed(allowed);
        for layer in &self.layout.dec {
            let a = self.attention(g, &layer.self_attn, y, y, Some(&causal))?;
            let y1 = self.residual_ln(g, y, a, &layer.ln1)?;
            let c = self.attention(g, &layer.cross, y1, h, None)?;
            let y2 = self.residual_ln(g, y1, c, &layer.ln2)?;
            let f = self.ffn(g, &layer.ffn, y2)?;
            y = self.residual_ln(g, y2, f, &layer.ln3)?;
        }
        let scores = self.head_scores(g, y, keys)?;
        let v = self.vocab.len();
        let cols = v + inputs.k_f();
        let score_mask = match masks {
            None => None,
            Some(ms) => {
                let mut allowed = vec![true; n * cols];
                for (row, &(s, t, _)) in targets.iter().enumerate() {
                    if let Some(m) = ms.get(s).and_then(|m| m.get(t)) {
                        for &w in &m.hidden_words {
                            allowed[row * cols + w as usize] = false;
                        }
                        for &o in &m.hidden_objects {
                            allowed[row * cols + v + o] = false;
                        }
                    }
                }
                Some(Mask::from_allowed(allowed))
            }
        };
        let logp = g.log_softmax(scores, score_mask.clone())?;
        let morph_logits = self.morph_logits(g, y, inputs)?;
        let mut morph_logp = BTreeMap::new();
        for (k, logits) in morph_logits {
            morph_logp.insert(k, g.log_softmax(logits, None)?);
        }

        let mut joint_idx = Vec::with_capacity(n);
        let mut morph_idx: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut per_step = Vec::with_capacity(n);
        for (row, &(_, _, ev)) in targets.iter().enumerate() {
            let col = match ev {
                TokenEvent::Word(w) if (w as usize) < v => w as usize,
                TokenEvent::Word(w) => return Err(CaptionerError::Unrepresentable(format!("#{w}"))),
                TokenEvent::Copy { object, form } => {
                    let obj = inputs.copyable.get(object).ok_or(CaptionerError::BadCopy { object, form })?;
                    if form >= self.form_count(obj) {
                        return Err(CaptionerError::BadCopy { object, form });
                    }
                    v + object
                }
            };
            if score_mask.as_ref().is_some_and(|m| !m.is_allowed(row, col, cols)) {
                return Err(CaptionerError::Unrepresentable(format!("masked target at step {row}")));
            }
            joint_idx.push(row * cols + col);
            let mut lp = g.value(logp).data()[row * cols + col];
            if let TokenEvent::Copy { object, form } = ev {
                if let Some(key) = self.morph_key(&inputs.copyable[object]) {
                    let s = self.form_count(&inputs.copyable[object]);
                    lp += g.value(morph_logp[&key]).data()[row * s + form];
                    morph_idx.entry(key).or_default().push(row * s + form);
                }
            }
            per_step.push(lp);
        }
        let picked = g.pick(logp, &joint_idx)?;
        let mut total = g.sum(picked)?;
        for (key, idx) in morph_idx {
            let p = g.pick(morph_logp[&key], &idx)?;
            let s = g.sum(p)?;
            total = g.add(total, s)?;
        }
        Ok(TeacherForced { total, steps: n, per_step })
    }

    /// Mean negative log-likelihood per step.
    pub fn ce_loss(&self, g: &mut Graph<'_>, inputs: &ObjectInputs, seqs: &[&[TokenEvent]]) -> Result<Var, CaptionerError> {
        let tf = self.teacher_forced(g, inputs, seqs, None)?;
        Ok(g.scale(tf.total, -1.0 / tf.steps as f64)?)
    }

    /// Inference session over one image.
    pub fn session<'m>(&'m self, inputs: &'m ObjectInputs) -> Result<Session<'m>, CaptionerError> {
        Session::new(self, inputs)
    }

    /// Decoder state after feeding begin-of-sentence and `history`.
    pub fn decode_step(&self, inputs: &ObjectInputs, history: &[TokenEvent]) -> Result<Tensor, CaptionerError> {
        let mut s = self.session(inputs)?;
        let st = s.feed_all(history)?;
        Ok(s.hidden(&st).clone())
    }

    /// Output distribution after `history`.
    pub fn output_distribution(&self, inputs: &ObjectInputs, history: &[TokenEvent]) -> Result<OutputDistribution, CaptionerError> {
        let mut s = self.session(inputs)?;
        let st = s.feed_all(history)?;
        s.distribution(&st)
    }

    /// Output head applied to an explicit hidden state `h` (1 x d) and
    /// encoder outputs of the copyable objects `h_f` (k_f x d).
    pub fn distribution_from(&self, h: &Tensor, h_f: Option<&Tensor>, inputs: &ObjectInputs) -> Result<OutputDistribution, CaptionerError> {
        let mut g = Graph::with_params(&self.params);
        let hv = g.constant(h.clone());
        let keys = match h_f {
            Some(t) => {
                let hf = g.constant(t.clone());
                self.copy_keys(&mut g, hf, inputs.k_f())?
            }
            None => None,
        };
        self.head_distribution(&mut g, hv, keys, inputs)
    }

    fn head_distribution(&self, g: &mut Graph<'_>, h: Var, keys: Option<Var>, inputs: &ObjectInputs) -> Result<OutputDistribution, CaptionerError> {
        let scores = self.head_scores(g, h, keys)?;
        let p = g.softmax(scores, None)?;
        let morph = self.morph_logits(g, h, inputs)?;
        let mut morph_p = BTreeMap::new();
        for (k, logits) in morph {
            let sm = g.softmax(logits, None)?;
            morph_p.insert(k, g.value(sm).data().to_vec());
        }
        let probs = g.value(p).data();
        let v = self.vocab.len();
        let copy = inputs
            .copyable
            .iter()
            .enumerate()
            .map(|(i, obj)| {
                let c = probs[v + i];
                match self.morph_key(obj) {
                    Some(k) => morph_p[&k].iter().map(|q| c * q).collect(),
                    None => vec![c],
                }
            })
            .collect();
        Ok(OutputDistribution { vocab: probs[..v].to_vec(), copy })
    }
}

/// Incremental decoder state: per layer and head, the keys and values of
/// every fed position, plus the newest hidden row.
#[derive(Debug, Clone)]
pub struct DecState {
    pub pos: usize,
    cache: Vec<Vec<(Var, Var)>>,
    hidden: Var,
}

/// One image's encoder output and a shared tape on which any number of
/// decoder states can be extended.
pub struct Session<'m> {
    model: &'m Captioner,
    inputs: &'m ObjectInputs,
    graph: Graph<'m>,
    cross: Vec<Vec<(Var, Var)>>,
    keys: Option<Var>,
    encoded: Var,
}

impl<'m> Session<'m> {
    fn new(model: &'m Captioner, inputs: &'m ObjectInputs) -> Result<Self, CaptionerError> {
        let mut g = Graph::with_params(&model.params);
        let x = model.object_representation(&mut g, inputs)?;
        let h = model.encode(&mut g, x)?;
        let keys = model.copy_keys(&mut g, h, inputs.k_f())?;
        let mut cross = Vec::new();
        for layer in &model.layout.dec {
            let mut per_head = Vec::new();
            for hd in 0..model.config.heads {
                let (wk, wv) = (g.param(layer.cross.k[hd]), g.param(layer.cross.v[hd]));
                let k = g.matmul(h, wk)?;
                let kt = g.transpose(k)?;
                let v = g.matmul(h, wv)?;
                per_head.push((kt, v));
            }
            cross.push(per_head);
        }
        Ok(Self { model, inputs, graph: g, cross, keys, encoded: h })
    }

    pub fn inputs(&self) -> &'m ObjectInputs {
        self.inputs
    }

    pub fn model(&self) -> &'m Captioner {
        self.model
    }

    /// Encoder outputs, one row per object.
    pub fn encoded(&self) -> &Tensor {
        self.graph.value(self.encoded)
    }

    pub fn hidden(&self, st: &DecState) -> &Tensor {
        self.graph.value(st.hidden)
    }

    /// State after feeding begin-of-sentence.
    pub fn start(&mut self) -> Result<DecState, CaptionerError> {
        self.feed(None, self.model.vocab.bos() as usize)
    }

    pub fn advance(&mut self, st: &DecState, event: TokenEvent) -> Result<DecState, CaptionerError> {
        let id = self.model.embedding_id(self.inputs, event)? as usize;
        self.feed(Some(st), id)
    }

    pub fn feed_all(&mut self, history: &[TokenEvent]) -> Result<DecState, CaptionerError> {
        let mut st = self.start()?;
        for &ev in history {
            st = self.advance(&st, ev)?;
        }
        Ok(st)
    }

    fn feed(&mut self, prev: Option<&DecState>, id: usize) -> Result<DecState, CaptionerError> {
        let m = self.model;
        let pos = prev.map_or(0, |s| s.pos + 1);
        let g = &mut self.graph;
        let mut x = m.embed_rows(g, &[id], &[pos])?;
        let scale = 1.0 / (m.config.head_dim() as f64).sqrt();
        let mut cache = Vec::with_capacity(m.layout.dec.len());
        for (l, layer) in m.layout.dec.iter().enumerate() {
            let mut heads = Vec::with_capacity(m.config.heads);
            let mut layer_cache = Vec::with_capacity(m.config.heads);
            for hd in 0..m.config.heads {
                let at = &layer.self_attn;
                let (wq, wk, wv) = (g.param(at.q[hd]), g.param(at.k[hd]), g.param(at.v[hd]));
                let q = g.matmul(x, wq)?;
                let k = g.matmul(x, wk)?;
                let v = g.matmul(x, wv)?;
                let (k, v) = match prev {
                    Some(p) => {
                        let (pk, pv) = p.cache[l][hd];
                        (g.concat(&[pk, k], Axis::Rows)?, g.concat(&[pv, v], Axis::Rows)?)
                    }
                    None => (k, v),
                };
                layer_cache.push((k, v));
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, scale)?;
                let a = g.softmax(s, None)?;
                heads.push(g.matmul(a, v)?);
            }
            let cat = g.concat(&heads, Axis::Cols)?;
            let wo = g.param(layer.self_attn.o);
            let a = g.matmul(cat, wo)?;
            let x1 = m.residual_ln(g, x, a, &layer.ln1)?;

            let mut heads = Vec::with_capacity(m.config.heads);
            for hd in 0..m.config.heads {
                let wq = g.param(layer.cross.q[hd]);
                let q = g.matmul(x1, wq)?;
                let (kt, v) = self.cross[l][hd];
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, scale)?;
                let a = g.softmax(s, None)?;
                heads.push(g.matmul(a, v)?);
            }
            let cat = g.concat(&heads, Axis::Cols)?;
            let wo = g.param(layer.cross.o);
            let c = g.matmul(cat, wo)?;
            let x2 = m.residual_ln(g, x1, c, &layer.ln2)?;
            let f = m.ffn(g, &layer.ffn, x2)?;
            x = m.residual_ln(g, x2, f, &layer.ln3)?;
            cache.push(layer_cache);
        }
        Ok(DecState { pos, cache, hidden: x })
    }

    /// Output distribution for the step after `st`.
    pub fn distribution(&mut self, st: &DecState) -> Result<OutputDistribution, CaptionerError> {
        self.model.head_distribution(&mut self.graph, st.hidden, self.keys, self.inputs)
    }
}
