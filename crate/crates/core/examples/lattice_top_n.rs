//! N-best architectures from a lattice of per-group choice weights.
//!
//! ```text
//! cargo run --release --example lattice_top_n
//! ```

use tdnnf_nas::lattice::{format_top_n, k_best, ChoiceGroup, NasLattice};
use tdnnf_nas::supernet::{Attribute, SearchSpaceSpec};

fn main() -> tdnnf_nas::error::Result<()> {
    // One layer: three left offsets, three right offsets.
    let space = SearchSpaceSpec::new(1, 2, 2, vec![4], true, false)?;
    let lattice = NasLattice::from_groups(
        &space,
        vec![
            ChoiceGroup {
                layer: 0,
                attr: Attribute::Left,
                arcs: vec![(0, 0.1), (1, 0.7), (2, 0.2)],
            },
            ChoiceGroup {
                layer: 0,
                attr: Attribute::Right,
                arcs: vec![(0, 0.8), (1, 0.15), (2, 0.05)],
            },
        ],
    )?;
    println!("{} paths, best four:\n", lattice.num_paths());
    print!("{}", format_top_n(&k_best(&lattice, 4)?, &space));
    Ok(())
}
