//! Controller training: joint reward, REINFORCE with Adam, the search loop,
//! and final architecture derivation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerError;
use crate::evaluators::{EvalError, Measurement};
use crate::tensors::CheckpointError;

mod optim;
mod reinforce;
mod search;

pub use optim::{adam_update, cosine_lr, AdamConfig, AdamState};
pub use reinforce::{reinforce_step, Baseline, Policy, StepStats};
pub use search::{
    derive, load_search_state, run_epoch, run_search, save_search_state, Candidate, Derivation, LogRecord, SearchLog,
    SearchState, TrainConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reward {reward} of sample {index} is not finite")]
    NonFiniteReward { index: usize, reward: f64 },
    #[error("empty sample batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schedule step {t} exceeds horizon {horizon}")]
    Schedule { t: usize, horizon: usize },
    #[error("evaluator failed after {attempts} attempts: {source}")]
    Evaluator { attempts: usize, source: EvalError },
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Trade-off and normalization constants of the joint reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Weight on PSNR; `1 - lambda` weighs cost.
    pub lambda: f64,
    /// PSNR (dB) mapped to 0 and 1.
    pub psnr_bounds: (f64, f64),
    /// Cost (G-MACs) that counts as one unit of penalty.
    pub cost_budget_gmacs: f64,
    /// Weight of the summed per-decision entropy bonus.
    pub entropy_weight: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { lambda: 0.9, psnr_bounds: (20.0, 40.0), cost_budget_gmacs: 100.0, entropy_weight: 1e-3 }
    }
}

impl RewardConfig {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn check(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::Config(format!("lambda {} is outside [0, 1]", self.lambda)));
        }
        if !(self.psnr_bounds.0 < self.psnr_bounds.1) {
            return Err(TrainError::Config(format!("psnr bounds {:?} are not increasing", self.psnr_bounds)));
        }
        if !(self.cost_budget_gmacs > 0.0) {
            return Err(TrainError::Config(format!("cost budget {} must be positive", self.cost_budget_gmacs)));
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return Err(TrainError::Config(format!(
                "entropy weight {} must be finite and non-negative",
                self.entropy_weight
            )));
        }
        Ok(())
    }
}

/// `lambda * clamp(normalized psnr, 0, 1) - (1 - lambda) * cost / budget`.
pub fn joint_reward(m: &Measurement, rc: &RewardConfig) -> f64 {
    let (lo, hi) = rc.psnr_bounds;
    let quality = ((m.psnr - lo) / (hi - lo)).clamp(0.0, 1.0);
    let cost = m.cost_gmacs() / rc.cost_budget_gmacs;
    let penalty = if rc.lambda == 1.0 { 0.0 } else { (1.0 - rc.lambda) * cost };
    rc.lambda * quality - penalty
}
