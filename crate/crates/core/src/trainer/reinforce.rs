use serde::{Deserialize, Serialize};

use super::optim::{adam_update, AdamConfig, AdamState};
use super::TrainError;
use crate::controller::{arch_backward, ArchSample, ControllerError, ControllerGrads, ControllerParams};

/// A differentiable stochastic policy over discrete samples.
pub trait Policy {
    type Sample;

    fn parameters(&self) -> &[f64];

    fn parameters_mut(&mut self) -> &mut [f64];

    fn log_prob(&self, sample: &Self::Sample) -> f64;

    fn entropy(&self, sample: &Self::Sample) -> f64;

    /// Adds the gradient of `lp_coef * log_prob + ent_coef * entropy` into `grad`.
    fn accumulate_gradient(
        &self,
        sample: &Self::Sample,
        lp_coef: f64,
        ent_coef: f64,
        grad: &mut [f64],
    ) -> Result<(), TrainError>;
}

impl Policy for ControllerParams {
    type Sample = ArchSample;

    fn parameters(&self) -> &[f64] {
        self.data()
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        self.data_mut()
    }

    fn log_prob(&self, sample: &ArchSample) -> f64 {
        sample.log_prob
    }

    fn entropy(&self, sample: &ArchSample) -> f64 {
        sample.entropy
    }

    fn accumulate_gradient(
        &self,
        sample: &ArchSample,
        lp_coef: f64,
        ent_coef: f64,
        grad: &mut [f64],
    ) -> Result<(), TrainError> {
        let trace = sample.trace.as_ref().ok_or(ControllerError::MissingTrace)?;
        let mut g = ControllerGrads::zeros_like(self);
        arch_backward(self, trace, lp_coef, ent_coef, &mut g);
        for (a, b) in grad.iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }
}

/// Exponential moving average of batch-mean rewards, started at the first
/// batch mean. When disabled the advantage is the raw reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub enabled: bool,
    pub decay: f64,
    pub value: Option<f64>,
}

impl Baseline {
    pub fn new(enabled: bool, decay: f64) -> Self {
        Baseline { enabled, decay, value: None }
    }

    /// The value subtracted from rewards in a batch with the given mean.
    pub fn current(&self, batch_mean: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        self.value.unwrap_or(batch_mean)
    }

    pub fn update(&mut self, batch_mean: f64) {
        self.value = Some(match self.value {
            None => batch_mean,
            Some(b) => self.decay * b + (1.0 - self.decay) * batch_mean,
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub mean_reward: f64,
    /// Baseline used for this step's advantages.
    pub baseline: f64,
    pub mean_entropy: f64,
    pub grad_norm: f64,
}

/// One policy-gradient ascent step on
/// `mean_i (r_i - b) log pi(a_i) + entropy_weight * mean_i H_i`.
///
/// Adam minimizes, so it is fed the negated ascent direction.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_step<P: Policy>(
    policy: &mut P,
    samples: &[(P::Sample, f64)],
    baseline: &mut Baseline,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    entropy_weight: f64,
    lr: f64,
) -> Result<StepStats, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if let Some((index, (_, reward))) = samples.iter().enumerate().find(|(_, (_, r))| !r.is_finite()) {
        return Err(TrainError::NonFiniteReward { index, reward: *reward });
    }
    let n = samples.len() as f64;
    let mean_reward = samples.iter().map(|(_, r)| r).sum::<f64>() / n;
    let b = baseline.current(mean_reward);

    let mut grad = vec![0.0; policy.parameters().len()];
    let mut entropy = 0.0;
    for (sample, reward) in samples {
        policy.accumulate_gradient(sample, (reward - b) / n, entropy_weight / n, &mut grad)?;
        entropy += policy.entropy(sample);
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    for g in &mut grad {
        *g = -*g;
    }
    adam_update(policy.parameters_mut(), &grad, adam, lr, adam_cfg)?;
    baseline.update(mean_reward);
    Ok(StepStats { mean_reward, baseline: b, mean_entropy: entropy / n, grad_norm })
}
