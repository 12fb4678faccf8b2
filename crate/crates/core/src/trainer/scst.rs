use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::PreparedImage;
use super::reward::{reward, RewardConfig};
use crate::captioner::{Captioner, CaptionerError};
use crate::decoder::{beam_search, greedy, render, sample_caption, DecodeConfig, DecodeError, SampledCaption};
use crate::metrics::CiderRefs;
use crate::numcore::{Graph, ParamGrads};

/// A stochastic policy trained with a self-critical baseline.
pub trait Policy {
    type Sample;
    type Error;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::Sample, Self::Error>;
    /// Reward of the baseline outcome.
    fn baseline(&self) -> Result<f64, Self::Error>;
    fn reward(&self, sample: &Self::Sample) -> Result<f64, Self::Error>;
    /// Gradient of the sample's total log-probability, and that total.
    fn log_prob_grad(&self, sample: &Self::Sample) -> Result<(f64, ParamGrads), Self::Error>;
    fn param_count(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct ScstOutcome<S> {
    pub sample: S,
    pub sample_reward: f64,
    pub baseline_reward: f64,
    pub advantage: f64,
    /// `-A * log p(sample)`.
    pub loss: f64,
    /// Gradient of `loss`.
    pub grads: ParamGrads,
}

/// One self-critical estimate. A zero advantage yields an exactly zero
/// gradient without evaluating the log-probability.
pub fn scst_step<P: Policy, R: Rng + ?Sized>(policy: &P, rng: &mut R) -> Result<ScstOutcome<P::Sample>, P::Error> {
    let sample = policy.sample(rng)?;
    let sample_reward = policy.reward(&sample)?;
    let baseline_reward = policy.baseline()?;
    let advantage = sample_reward - baseline_reward;
    if advantage == 0.0 {
        return Ok(ScstOutcome { sample, sample_reward, baseline_reward, advantage, loss: 0.0, grads: ParamGrads::new(policy.param_count()) });
    }
    let (log_prob, mut grads) = policy.log_prob_grad(&sample)?;
    grads.scale(-advantage);
    Ok(ScstOutcome { sample, sample_reward, baseline_reward, advantage, loss: -advantage * log_prob, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Reward of the greedy caption.
    #[default]
    Greedy,
    /// Mean reward over the beam.
    BeamMean,
}

/// The captioner viewed as a policy over captions for one image.
pub struct CaptionPolicy<'a> {
    pub model: &'a Captioner,
    pub image: &'a PreparedImage,
    pub refs: &'a CiderRefs,
    pub reward: &'a RewardConfig,
    pub decode: &'a DecodeConfig,
    pub baseline: Baseline,
}

impl CaptionPolicy<'_> {
    fn score(&self, events: &[crate::tokens::TokenEvent]) -> Result<f64, DecodeError> {
        let cap = render(self.model, &self.image.inputs, events, 0.0)?;
        Ok(reward(&cap.words(), cap.copies(), self.refs, self.reward))
    }
}

impl Policy for CaptionPolicy<'_> {
    type Sample = SampledCaption;
    type Error = DecodeError;

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampledCaption, DecodeError> {
        sample_caption(self.model, &self.image.inputs, self.decode, rng)
    }

    fn baseline(&self) -> Result<f64, DecodeError> {
        match self.baseline {
            Baseline::Greedy => self.score(&greedy(self.model, &self.image.inputs, self.decode)?.events),
            Baseline::BeamMean => {
                let beam = DecodeConfig { beam_size: self.decode.beam_size.max(2), ..self.decode.clone() };
                let hyps = beam_search(self.model, &self.image.inputs, &beam)?;
                let mut total = 0.0;
                for h in &hyps {
                    total += self.score(&h.events)?;
                }
                Ok(total / hyps.len().max(1) as f64)
            }
        }
    }

    fn reward(&self, sample: &SampledCaption) -> Result<f64, DecodeError> {
        self.score(&sample.events)
    }

    fn log_prob_grad(&self, sample: &SampledCaption) -> Result<(f64, ParamGrads), DecodeError> {
        let mut g = Graph::with_params(self.model.params());
        let tf = self.model.teacher_forced(&mut g, &self.image.inputs, &[&sample.events], Some(&[&sample.masks]))?;
        let total = g.value(tf.total).item();
        let grads = g.backward(tf.total).map_err(CaptionerError::from)?.params(&g);
        Ok((total, grads))
    }

    fn param_count(&self) -> usize {
        self.model.params().len()
    }
}
