//! A full controller search against the surrogate evaluator, followed by
//! derivation of the final architecture.
//!
//!     cargo run --release --example surrogate_search -- [epochs] [lambda] [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srnas::cli::SearchConfig;
use srnas::evaluators::SurrogateEvaluator;
use srnas::trainer::{derive, run_epoch, SearchState};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize| args.get(i).and_then(|s| s.parse::<f64>().ok());
    let mut cfg = SearchConfig::default();
    cfg.train.epochs = arg(0).map_or(400, |v| v as usize);
    cfg.reward.lambda = arg(1).unwrap_or(0.9);
    cfg.train.seed = arg(2).map_or(1, |v| v as u64);

    let mut evaluator = SurrogateEvaluator::new(cfg.space, cfg.surrogate.clone());
    let mut state = SearchState::new(cfg.space, cfg.controller, &cfg.train);
    let report_every = (cfg.train.epochs / 10).max(1);
    while !state.finished(&cfg.train) {
        run_epoch(&mut state, &mut evaluator, &cfg.reward, &cfg.train).expect("surrogate never fails");
        if state.epoch.is_multiple_of(report_every) {
            let recent: Vec<f64> = state.log.rewards().into_iter().rev().take(50).collect();
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            let entropy = state.log.records.last().unwrap().entropy;
            println!("epoch {:>4}  mean reward (last 50) {mean:.4}  entropy {entropy:.2}", state.epoch);
        }
    }
    let (head, tail) = state.log.head_tail_means(0.1).unwrap();
    println!("first 10%: {head:.4}   last 10%: {tail:.4}");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let d = derive(&state.params, &mut evaluator, &cfg.reward, 64, 1, &mut rng).unwrap();
    let best = d.best();
    let (_, optimum) = evaluator.reward_optimum(&cfg.reward).unwrap();
    println!(
        "derived: reward {:.4} (optimum {optimum:.4}), psnr {:.2} dB, {:.3} G-MACs at 3x48x48",
        best.reward,
        best.measurement.psnr,
        best.measurement.cost_gmacs()
    );
    println!("{}", best.arch.to_json());
}
