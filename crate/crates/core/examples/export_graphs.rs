//! Writes Graphviz files for the surrogate's planted optimum.
//!
//!     cargo run --example export_graphs -- [out_dir]
//!     dot -Tsvg out/normal_cell.dot -o normal_cell.svg

use std::path::PathBuf;

use srnas::evaluators::{SurrogateConfig, SurrogateEvaluator};
use srnas::searchspace::{arch_to_dot, SpaceConfig};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "graphs".into()));
    std::fs::create_dir_all(&dir)?;
    let arch = SurrogateEvaluator::new(SpaceConfig::default(), SurrogateConfig::default()).planted_optimum();
    let dot = arch_to_dot(&arch);
    for (name, text) in [
        ("normal_cell.dot", &dot.normal_cell),
        ("upsample_cell.dot", &dot.upsample_cell),
        ("network.dot", &dot.network),
    ] {
        std::fs::write(dir.join(name), text)?;
        println!("wrote {}", dir.join(name).display());
    }
    std::fs::write(dir.join("arch.json"), arch.to_json())?;
    print!("{}", dot.normal_cell);
    Ok(())
}
