//! Searches at three PSNR/cost trade-offs and compares the derived costs.
//!
//!     cargo run --release --example lambda_sweep -- [epochs] [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srnas::cli::SearchConfig;
use srnas::costmodel::{arch_flops, format_gmacs, CostConfig, TensorShape};
use srnas::evaluators::SurrogateEvaluator;
use srnas::trainer::{derive, run_search, SearchState};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(400);
    let seed = args.get(1).copied().unwrap_or(1) as u64;

    println!("lambda  reward   psnr    search G-MACs  full-size G-MACs (3x480x480, 64 ch)");
    for lambda in [0.2, 0.6, 0.9] {
        let mut cfg = SearchConfig::default();
        cfg.reward.lambda = lambda;
        cfg.train.epochs = epochs;
        cfg.train.seed = seed;
        let mut evaluator = SurrogateEvaluator::new(cfg.space, cfg.surrogate.clone());
        let mut state = SearchState::new(cfg.space, cfg.controller, &cfg.train);
        run_search(&mut state, &mut evaluator, &cfg.reward, &cfg.train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = derive(&state.params, &mut evaluator, &cfg.reward, 64, 1, &mut rng).unwrap();
        let best = d.best();
        let full = arch_flops(&best.arch, TensorShape::new(3, 480, 480), &CostConfig::derive()).unwrap();
        println!(
            "{lambda:>6}  {:>6.4}  {:>6.2}  {:>13.4}  {:>16}",
            best.reward,
            best.measurement.psnr,
            best.measurement.cost_gmacs(),
            format_gmacs(full.total_macs)
        );
    }
}
