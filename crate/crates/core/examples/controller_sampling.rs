//! Draws architectures from a freshly initialized controller and shows that
//! re-scoring a sample reproduces its log-probability.
//!
//!     cargo run --example controller_sampling -- [count]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srnas::controller::{sample_arch, score_arch, ControllerConfig, ControllerParams};
use srnas::searchspace::{arch_to_tokens, SpaceConfig};

fn main() {
    let count = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let space = SpaceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ControllerParams::random(space, ControllerConfig::default(), &mut rng);
    println!("controller with {} parameters", params.len());

    for _ in 0..count {
        let s = sample_arch(&params, &mut rng);
        let rescored = score_arch(&params, &s.arch).unwrap();
        println!(
            "log pi = {:>9.4}  entropy = {:>7.3}  rescored = {:>9.4}  p = {:>2}  tokens {:?}",
            s.log_prob,
            s.entropy,
            rescored.log_prob,
            s.arch.position,
            arch_to_tokens(&s.arch, &space).unwrap()
        );
    }

    let zero = ControllerParams::zeros(space, ControllerConfig::default());
    let s = sample_arch(&zero, &mut rng);
    println!("\nall-zero controller is uniform: log pi = {:.4}, entropy = {:.4}", s.log_prob, s.entropy);
}
