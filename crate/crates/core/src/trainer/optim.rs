use serde::{Deserialize, Serialize};

use crate::numcore::{ParamGrads, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    /// Rescale all gradients so their global L2 norm is at most the threshold.
    Norm,
    /// Clamp every entry to `[-threshold, threshold]`.
    Value,
}

/// Clips in place and returns the global norm before clipping.
pub fn clip_gradients(grads: &mut ParamGrads, threshold: f64, mode: ClipMode) -> f64 {
    let norm = grads.global_norm();
    match mode {
        ClipMode::Norm => {
            if norm > threshold {
                grads.scale(threshold / norm);
            }
        }
        ClipMode::Value => {
            for (_, g) in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = v.clamp(-threshold, threshold));
            }
        }
    }
    norm
}

/// `d^-0.5 * min(S^-0.5, S * W^-1.5)`.
pub fn lr_schedule_ce(step: usize, warmup: usize, d: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Learning rate that halves after `patience` consecutive evaluations
/// without improvement, never dropping below `floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub patience: usize,
    pub floor: f64,
    best: Option<f64>,
    bad: usize,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, floor: f64) -> Self {
        Self { lr, patience, floor, best: None, bad: 0 }
    }

    /// Records one evaluation and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                self.lr = (self.lr / 2.0).max(self.floor);
                self.bad = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying an evaluation history.
pub fn lr_schedule_scst(history: &[f64], initial: f64, patience: usize, floor: f64) -> f64 {
    let mut p = Plateau::new(initial, patience, floor);
    for &m in history {
        p.observe(m);
    }
    p.lr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Adam with bias correction; moments are kept per trainable parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.index();
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
                self.v.resize(i + 1, None);
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(id);
            for (((pv, mv), vv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        }
    }
}
