//! Cost of one architecture at every upsampling position, at the default
//! 3x480x480 evaluation size and 64 channels per operation.
//!
//!     cargo run --example flops_position_sweep -- [arch.json]

use srnas::costmodel::{arch_flops, format_gmacs, CostConfig, TensorShape};
use srnas::evaluators::{SurrogateConfig, SurrogateEvaluator};
use srnas::searchspace::{ArchSpec, SpaceConfig};

fn main() {
    let arch = match std::env::args().nth(1) {
        Some(path) => {
            let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
            ArchSpec::from_json(&text).unwrap_or_else(|e| panic!("{path}: {e}")).0
        }
        None => SurrogateEvaluator::new(SpaceConfig::default(), SurrogateConfig::default()).planted_optimum(),
    };
    let input = TensorShape::new(3, 480, 480);
    let cfg = CostConfig::derive();

    println!("position  G-MACs  layers at low / high resolution");
    for p in 1..=arch.depth {
        let moved = ArchSpec { position: p, ..arch.clone() };
        let report = arch_flops(&moved, input, &cfg).expect("valid architecture");
        println!(
            "{p:>8}  {:>6}  {} / {}",
            format_gmacs(report.total_macs),
            moved.layers_before(),
            moved.layers_after()
        );
    }

    let report = arch_flops(&arch, input, &cfg).unwrap();
    println!("\nper layer at position {}:", arch.position);
    for l in &report.per_layer {
        println!("  {:>2} {:<8?} {:>8} G-MACs -> {}", l.index, l.kind, format_gmacs(l.macs), l.output);
    }
}
