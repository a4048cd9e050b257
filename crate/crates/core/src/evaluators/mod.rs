//! Sources of `(PSNR, cost)` measurements for sampled architectures.
//!
//! [`SurrogateEvaluator`] is a deterministic stand-in with a known optimum;
//! [`ExternalEvaluator`] talks to a process that trains a weight-sharing super
//! network and reports validation PSNR over the wire protocol in [`protocol`].

use std::io;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::CostError;
use crate::searchspace::ArchSpec;

pub mod external;
pub mod protocol;
pub mod surrogate;

pub use external::{ExternalConfig, ExternalEvaluator, ExternalPool};
pub use surrogate::{SurrogateConfig, SurrogateEvaluator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMeta {
    pub evaluator: String,
    pub wall_time_secs: f64,
}

/// Validation PSNR (dB) and cost (multiply-adds) of one architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub psnr: f64,
    pub cost: f64,
    pub meta: MeasurementMeta,
}

impl Measurement {
    pub fn cost_gmacs(&self) -> f64 {
        self.cost / 1e9
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainAck {
    pub archs_received: usize,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluator timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed evaluator response: {0}")]
    Malformed(String),
    #[error("evaluator reported failure: {0}")]
    Remote(String),
    #[error("evaluator process closed its output")]
    Closed,
    #[error("evaluator transport: {0}")]
    Transport(#[from] io::Error),
    #[error("train acknowledgment does not echo the sent architectures")]
    EchoMismatch,
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl EvalError {
    /// Short stable tag for logs and exit diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            EvalError::Timeout(_) => "timeout",
            EvalError::Malformed(_) => "malformed",
            EvalError::Remote(_) => "remote",
            EvalError::Closed => "closed",
            EvalError::Transport(_) => "transport",
            EvalError::EchoMismatch => "echo",
            EvalError::InvalidMeasurement(_) => "invalid",
            EvalError::Cost(_) => "cost",
        }
    }
}

pub trait Evaluator: Send {
    fn name(&self) -> &str;

    fn evaluate(&mut self, arch: &ArchSpec) -> Result<Measurement, EvalError>;

    /// Evaluates a batch; results are in input order.
    fn evaluate_batch(&mut self, archs: &[ArchSpec]) -> Result<Vec<Measurement>, EvalError> {
        archs.iter().map(|a| self.evaluate(a)).collect()
    }

    /// Hands freshly sampled architectures to the shared-weight training
    /// loop. `lr` is the shared-weight learning rate for this epoch.
    fn train_hook(&mut self, archs: &[ArchSpec], steps: usize, lr: f64) -> Result<TrainAck, EvalError>;
}

pub(crate) fn check_measurement(m: &Measurement) -> Result<(), EvalError> {
    if !m.psnr.is_finite() {
        return Err(EvalError::InvalidMeasurement(format!("psnr {} is not finite", m.psnr)));
    }
    if !(m.cost >= 0.0 && m.cost.is_finite()) {
        return Err(EvalError::InvalidMeasurement(format!("cost {} is negative or not finite", m.cost)));
    }
    Ok(())
}

/// Which evaluator to use, parsed from `surrogate` or `external:<command line>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvaluatorSpec {
    Surrogate,
    External(Vec<String>),
}

impl std::str::FromStr for EvaluatorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "surrogate" {
            return Ok(EvaluatorSpec::Surrogate);
        }
        if let Some(cmd) = s.strip_prefix("external:") {
            let argv = shlex::split(cmd).ok_or_else(|| format!("cannot split command line {cmd:?}"))?;
            if argv.is_empty() {
                return Err("external evaluator needs a command line".into());
            }
            return Ok(EvaluatorSpec::External(argv));
        }
        Err(format!("unknown evaluator {s:?}; expected `surrogate` or `external:<command>`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluator_spec_parsing() {
        assert_eq!("surrogate".parse::<EvaluatorSpec>().unwrap(), EvaluatorSpec::Surrogate);
        assert_eq!(
            "external:python3 eval.py --data 'my dir'".parse::<EvaluatorSpec>().unwrap(),
            EvaluatorSpec::External(vec!["python3".into(), "eval.py".into(), "--data".into(), "my dir".into()])
        );
        assert!("external:".parse::<EvaluatorSpec>().is_err());
        assert!("oracle".parse::<EvaluatorSpec>().is_err());
    }
}
