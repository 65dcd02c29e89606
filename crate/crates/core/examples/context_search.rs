//! Pipelined Gumbel-Softmax search recovers a planted splicing context of
//! (-2, +3) from offsets 0 to 4 on each side.
//!
//! ```text
//! cargo run --release --example context_search [seed]
//! ```

use tdnnf_nas::data::{split_heldout, SyntheticTaskSpec};
use tdnnf_nas::lattice::format_candidate;
use tdnnf_nas::numeric::{streams, Rng};
use tdnnf_nas::search::{run_search, Method, NasConfig, SearchData};
use tdnnf_nas::supernet::{NetworkShape, SearchSpaceSpec, SuperNetwork};
use tdnnf_nas::train::TrainConfig;

fn main() -> tdnnf_nas::error::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = SyntheticTaskSpec {
        num_sequences: 2000,
        seed,
        ..SyntheticTaskSpec::default()
    }
    .generate()?;
    let nas = NasConfig {
        method: Method::PipeGumbel,
        ..NasConfig::default()
    };
    let (train, held) = split_heldout(&data, nas.heldout_fraction, &mut Rng::new(seed, streams::SPLIT))?;
    let space = SearchSpaceSpec::new(1, 4, 4, vec![8], true, false)?;
    let shape = NetworkShape {
        input_dim: 4,
        hidden_dim: 16,
        num_classes: 4,
    };
    let net = SuperNetwork::new(space.clone(), shape, &mut Rng::new(seed, streams::INIT))?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let out = run_search(net, SearchData { train: &train, heldout: Some(&held) }, &nas, &cfg)?;
    let lambdas = out.weights().softmax_lambdas()?;
    println!("left  λ {:.3?}", lambdas[0].left.as_ref().unwrap());
    println!("right λ {:.3?}", lambdas[0].right.as_ref().unwrap());
    print!("selected: {}", format_candidate(&out.top1(), &space));
    Ok(())
}
