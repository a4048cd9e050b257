//! Runs a short search against an evaluator in a separate process.
//!
//! Started without arguments, the example relaunches itself with `--serve`,
//! where it answers the line-delimited JSON protocol on stdin/stdout, and
//! drives the search through that child.
//!
//!     cargo run --example external_endpoint

use std::io;

use srnas::cli::SearchConfig;
use srnas::evaluators::protocol::{serve, SurrogateEndpoint};
use srnas::evaluators::{Evaluator, ExternalConfig, ExternalEvaluator, SurrogateEvaluator};
use srnas::trainer::{run_search, SearchState};

fn main() {
    let cfg = SearchConfig::default();
    if std::env::args().nth(1).as_deref() == Some("--serve") {
        let mut endpoint = SurrogateEndpoint(SurrogateEvaluator::new(cfg.space, cfg.surrogate));
        serve(io::stdin().lock(), io::stdout().lock(), &mut endpoint).expect("stdio is open");
        return;
    }

    let me = std::env::current_exe().expect("path of this example");
    let argv = vec![me.to_string_lossy().into_owned(), "--serve".into()];
    let mut evaluator = ExternalEvaluator::spawn(ExternalConfig::new(argv)).expect("endpoint starts");
    evaluator.ping().expect("endpoint answers ping");

    let mut train = cfg.train;
    train.epochs = 20;
    let mut state = SearchState::new(cfg.space, cfg.controller, &train);
    run_search(&mut state, &mut evaluator, &cfg.reward, &train).expect("search over the protocol");
    let best = state.log.best().unwrap();
    println!("{} evaluations over the protocol; best reward {:.4}", state.log.len(), best.reward);

    let m = evaluator.evaluate(&best.arch.to_arch().unwrap()).unwrap();
    println!("re-evaluated: psnr {:.3} dB, cost {:.4} G-MACs", m.psnr, m.cost_gmacs());
}
