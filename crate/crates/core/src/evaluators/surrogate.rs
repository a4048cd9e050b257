//! A deterministic PSNR oracle with a planted optimum.
//!
//! Quality is additive: a fixed score per edge operation plus a concave bonus
//! over the upsampling position that peaks two layers before the end. The
//! total is mapped affinely onto a dB range. Cost comes from the analytic cost
//! model at a small evaluation shape, so the position/cost tension is real.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EvalError, Evaluator, Measurement, MeasurementMeta, TrainAck};
use crate::costmodel::{arch_flops, CostConfig, TensorShape};
use crate::searchspace::{ArchSpec, CellSpec, NodeSpec, NormalOp, SpaceConfig, UpsampleOp};
use crate::trainer::{joint_reward, RewardConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    /// Quality score per normal-cell op, indexed by op code.
    pub normal_scores: [f64; NormalOp::COUNT],
    /// Quality score per upsampling-cell op, indexed by op code.
    pub upsample_scores: [f64; UpsampleOp::COUNT],
    /// Height of the position bonus at its peak.
    pub depth_bonus: f64,
    /// Bonus-maximizing position; defaults to `L - 2`.
    pub depth_peak: Option<usize>,
    /// dB range the quality is mapped onto.
    pub psnr_range: (f64, f64),
    /// Standard deviation (dB) of additive Gaussian noise; 0 is deterministic.
    pub noise_std: f64,
    pub noise_seed: u64,
    pub cost_shape: TensorShape,
    pub cost: CostConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            // identity < 3x3 convs < 5x5 convs < UDPB <= RCAB
            normal_scores: [0.0, 0.45, 0.7, 0.4, 0.65, 0.9, 1.0],
            // area, bilinear, nearest, sub-pixel, deconv
            upsample_scores: [0.3, 0.4, 0.2, 1.0, 0.8],
            depth_bonus: 2.0,
            depth_peak: None,
            psnr_range: (28.0, 40.0),
            noise_std: 0.0,
            noise_seed: 0,
            cost_shape: TensorShape::new(3, 48, 48),
            cost: CostConfig::search(),
        }
    }
}

/// Quality split by source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityBreakdown {
    pub normal: f64,
    pub upsample: f64,
    pub depth: f64,
}

impl QualityBreakdown {
    pub fn total(&self) -> f64 {
        self.normal + self.upsample + self.depth
    }
}

pub struct SurrogateEvaluator {
    space: SpaceConfig,
    cfg: SurrogateConfig,
    noise: ChaCha8Rng,
}

impl SurrogateEvaluator {
    pub fn new(space: SpaceConfig, cfg: SurrogateConfig) -> Self {
        let noise = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        SurrogateEvaluator { space, cfg, noise }
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.cfg
    }

    pub fn space(&self) -> &SpaceConfig {
        &self.space
    }

    pub fn depth_peak(&self) -> usize {
        self.cfg.depth_peak.unwrap_or(self.space.depth.saturating_sub(2)).clamp(1, self.space.depth)
    }

    /// Concave bonus, zero at the far end of the range and `depth_bonus` at the peak.
    pub fn depth_bonus(&self, position: usize) -> f64 {
        let peak = self.depth_peak();
        let width = (peak - 1).max(self.space.depth - peak).max(1) as f64;
        let d = (position as f64 - peak as f64) / width;
        self.cfg.depth_bonus * (1.0 - d * d)
    }

    fn cell_quality(cell: &CellSpec, scores: &[f64]) -> f64 {
        cell.nodes.iter().flat_map(|n| n.edges()).map(|(_, op)| scores[op as usize]).sum()
    }

    pub fn quality(&self, arch: &ArchSpec) -> QualityBreakdown {
        QualityBreakdown {
            normal: Self::cell_quality(&arch.normal_cell, &self.cfg.normal_scores),
            upsample: Self::cell_quality(&arch.upsample_cell, &self.cfg.upsample_scores),
            depth: self.depth_bonus(arch.position),
        }
    }

    fn edges_per_cell(&self) -> f64 {
        (2 * self.space.intermediate_nodes()) as f64
    }

    fn extreme(scores: &[f64], max: bool) -> f64 {
        let fold = if max { f64::max } else { f64::min };
        scores.iter().copied().reduce(fold).unwrap_or(0.0)
    }

    /// `(lowest, highest)` attainable quality.
    pub fn quality_bounds(&self) -> (f64, f64) {
        let bonuses: Vec<f64> = (1..=self.space.depth).map(|p| self.depth_bonus(p)).collect();
        let bound = |max| {
            self.edges_per_cell() * Self::extreme(&self.cfg.normal_scores, max)
                + self.edges_per_cell() * Self::extreme(&self.cfg.upsample_scores, max)
                + Self::extreme(&bonuses, max)
        };
        (bound(false), bound(true))
    }

    /// Noise-free surrogate PSNR.
    pub fn psnr(&self, arch: &ArchSpec) -> f64 {
        let (lo, hi) = self.quality_bounds();
        let (db_lo, db_hi) = self.cfg.psnr_range;
        let frac = if hi > lo { (self.quality(arch).total() - lo) / (hi - lo) } else { 1.0 };
        db_lo + (db_hi - db_lo) * frac
    }

    pub fn cost(&self, arch: &ArchSpec) -> Result<u64, EvalError> {
        Ok(arch_flops(arch, self.cfg.cost_shape, &self.cfg.cost)?.total_macs)
    }

    /// The quality-maximizing architecture: every edge takes the top-scored
    /// op from node `-2`, position at the bonus peak. Sources do not affect
    /// quality, so any source wiring with the same ops is equally optimal.
    pub fn planted_optimum(&self) -> ArchSpec {
        let argmax = |scores: &[f64]| {
            let best = Self::extreme(scores, true);
            scores.iter().position(|&s| s == best).unwrap() as u8
        };
        let n = argmax(&self.cfg.normal_scores);
        let u = argmax(&self.cfg.upsample_scores);
        let nodes = self.space.intermediate_nodes();
        ArchSpec {
            normal_cell: CellSpec {
                kind: crate::searchspace::CellKind::Normal,
                nodes: vec![NodeSpec::new(-2, n, -2, n); nodes],
            },
            upsample_cell: CellSpec {
                kind: crate::searchspace::CellKind::Upsample,
                nodes: vec![NodeSpec::new(-2, u, -2, u); nodes],
            },
            position: (1..=self.space.depth)
                .max_by(|a, b| self.depth_bonus(*a).total_cmp(&self.depth_bonus(*b)).then(b.cmp(a)))
                .unwrap(),
            depth: self.space.depth,
        }
    }

    /// Noise-free joint reward of an architecture.
    pub fn reward(&self, arch: &ArchSpec, rc: &RewardConfig) -> Result<f64, EvalError> {
        let m = self.measure(arch, 0.0)?;
        Ok(joint_reward(&m, rc))
    }

    /// Exact joint-reward maximizer.
    ///
    /// For a fixed position the reward is a sum of independent per-edge terms
    /// (quality and cost are both additive over edges), so choosing each
    /// edge's best `(source, op)` in turn is globally optimal; the outer loop
    /// covers every position.
    pub fn reward_optimum(&self, rc: &RewardConfig) -> Result<(ArchSpec, f64), EvalError> {
        let mut best: Option<(ArchSpec, f64)> = None;
        for position in 1..=self.space.depth {
            let mut arch = ArchSpec::zero(&self.space);
            arch.position = position;
            for cell_idx in 0..2 {
                for t in 0..self.space.intermediate_nodes() {
                    for edge in 0..2 {
                        let kind_ops = if cell_idx == 0 { NormalOp::COUNT } else { UpsampleOp::COUNT };
                        let mut best_edge = (i32::MIN, 0u8, f64::NEG_INFINITY);
                        for src in -2..t as i32 {
                            for op in 0..kind_ops as u8 {
                                let node = if cell_idx == 0 {
                                    &mut arch.normal_cell.nodes[t]
                                } else {
                                    &mut arch.upsample_cell.nodes[t]
                                };
                                if edge == 0 {
                                    node.src_a = src;
                                    node.op_a = op;
                                } else {
                                    node.src_b = src;
                                    node.op_b = op;
                                }
                                let r = self.reward(&arch, rc)?;
                                if r > best_edge.2 {
                                    best_edge = (src, op, r);
                                }
                            }
                        }
                        let node = if cell_idx == 0 {
                            &mut arch.normal_cell.nodes[t]
                        } else {
                            &mut arch.upsample_cell.nodes[t]
                        };
                        if edge == 0 {
                            node.src_a = best_edge.0;
                            node.op_a = best_edge.1;
                        } else {
                            node.src_b = best_edge.0;
                            node.op_b = best_edge.1;
                        }
                    }
                }
            }
            let r = self.reward(&arch, rc)?;
            if best.as_ref().is_none_or(|(_, b)| r > *b) {
                best = Some((arch, r));
            }
        }
        Ok(best.expect("depth is at least 1"))
    }

    fn measure(&self, arch: &ArchSpec, noise: f64) -> Result<Measurement, EvalError> {
        let start = Instant::now();
        let psnr = self.psnr(arch) + noise;
        let cost = self.cost(arch)? as f64;
        Ok(Measurement {
            psnr,
            cost,
            meta: MeasurementMeta { evaluator: "surrogate".into(), wall_time_secs: start.elapsed().as_secs_f64() },
        })
    }
}

impl Evaluator for SurrogateEvaluator {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn evaluate(&mut self, arch: &ArchSpec) -> Result<Measurement, EvalError> {
        crate::searchspace::ensure_valid(arch, &self.space)
            .map_err(|e| EvalError::InvalidMeasurement(e.to_string()))?;
        let noise = if self.cfg.noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.noise);
            self.cfg.noise_std * z
        } else {
            0.0
        };
        self.measure(arch, noise)
    }

    /// No shared weights to train.
    fn train_hook(&mut self, archs: &[ArchSpec], _steps: usize, _lr: f64) -> Result<TrainAck, EvalError> {
        Ok(TrainAck { archs_received: archs.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{random_arch, CellKind};

    fn evaluator() -> SurrogateEvaluator {
        SurrogateEvaluator::new(SpaceConfig::default(), SurrogateConfig::default())
    }

    #[test]
    fn identity_normal_cell_scores_minimum() {
        let ev = evaluator();
        let arch = ArchSpec::zero(&SpaceConfig::default());
        assert_eq!(ev.quality(&arch).normal, 0.0);
        assert_eq!(ev.quality(&arch).normal, 8.0 * SurrogateEvaluator::extreme(&ev.cfg.normal_scores, false));
    }

    #[test]
    fn bonus_is_concave_with_peak_at_l_minus_two() {
        let ev = evaluator();
        assert_eq!(ev.depth_peak(), 10);
        let b: Vec<f64> = (1..=12).map(|p| ev.depth_bonus(p)).collect();
        assert_eq!(b[0], 0.0);
        assert_eq!(b[9], 2.0);
        for w in b.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] < 0.0);
        }
    }

    #[test]
    fn planted_optimum_attains_max_psnr() {
        let mut ev = evaluator();
        let opt = ev.planted_optimum();
        let m = ev.evaluate(&opt).unwrap();
        assert!((m.psnr - 40.0).abs() < 1e-12);
        assert_eq!(opt.position, 10);
        assert!(opt.normal_cell.nodes.iter().all(|n| n.op_a == NormalOp::Rcab.code()));
    }

    #[test]
    fn deterministic_at_zero_noise_and_train_hook_is_inert() {
        let space = SpaceConfig::default();
        let mut ev = evaluator();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let archs: Vec<ArchSpec> = (0..100).map(|_| random_arch(&space, &mut rng)).collect();
        let before = ev.evaluate_batch(&archs).unwrap();
        let ack = ev.train_hook(&archs, 10, 1e-3).unwrap();
        assert_eq!(ack.archs_received, 100);
        let after = ev.evaluate_batch(&archs).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.psnr.to_bits(), b.psnr.to_bits());
            assert_eq!(a.cost.to_bits(), b.cost.to_bits());
            assert!(a.psnr >= 28.0 - 1e-12 && a.psnr <= 40.0 + 1e-12);
        }
    }

    #[test]
    fn noise_is_reproducible_per_seed() {
        let space = SpaceConfig::default();
        let cfg = SurrogateConfig { noise_std: 0.5, noise_seed: 4, ..SurrogateConfig::default() };
        let arch = ArchSpec::zero(&space);
        let mut a = SurrogateEvaluator::new(space, cfg.clone());
        let mut b = SurrogateEvaluator::new(space, cfg);
        let xa: Vec<f64> = (0..5).map(|_| a.evaluate(&arch).unwrap().psnr).collect();
        let xb: Vec<f64> = (0..5).map(|_| b.evaluate(&arch).unwrap().psnr).collect();
        assert_eq!(xa, xb);
        assert!(xa.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn invalid_arch_is_rejected() {
        let mut ev = evaluator();
        let mut arch = ArchSpec::zero(&SpaceConfig::default());
        arch.upsample_cell.kind = CellKind::Normal;
        assert!(ev.evaluate(&arch).is_err());
    }
}
