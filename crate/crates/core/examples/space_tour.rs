//! Size of the search space, a random architecture in its three encodings,
//! and what validation reports for a broken one.
//!
//!     cargo run --example space_tour -- [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srnas::searchspace::{
    arch_to_tokens, cell_cardinality, random_arch, space_cardinality, tokens_to_arch, validate_arch, CellKind,
    SpaceConfig,
};

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let space = SpaceConfig::default();

    println!("B = {} nodes per cell, L = {} layers", space.nodes, space.depth);
    println!("normal cells:     {}", cell_cardinality(&space, CellKind::Normal));
    println!("upsampling cells: {}", cell_cardinality(&space, CellKind::Upsample));
    println!("architectures:    {}", space_cardinality(&space));
    println!("token alphabets:  {:?}", space.slot_alphabets());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = random_arch(&space, &mut rng);
    let tokens = arch_to_tokens(&arch, &space).expect("random architectures are valid");
    println!("\ntokens ({}): {tokens:?}", tokens.len());
    println!("json:\n{}", arch.to_json());
    assert_eq!(tokens_to_arch(&tokens, &space).unwrap(), arch);

    let mut broken = arch.clone();
    broken.position = 0;
    broken.normal_cell.nodes[1].src_b = 3;
    println!("\nviolations after corrupting it:");
    for v in validate_arch(&broken, &space) {
        println!("  {v}");
    }
}
