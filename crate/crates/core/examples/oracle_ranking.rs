//! Compares the search's path-probability ranking with exhaustive retraining
//! of all nine architectures of a two-layer width space.
//!
//! ```text
//! cargo run --release --example oracle_ranking
//! ```

use tdnnf_nas::data::{split_heldout, SyntheticTaskSpec, TaskKind};
use tdnnf_nas::numeric::{streams, Rng};
use tdnnf_nas::oracle::{brute_force_rank, compare_nas_to_oracle, report_csv, DEFAULT_CAP};
use tdnnf_nas::search::{run_search, Method, NasConfig, SearchData};
use tdnnf_nas::supernet::{NetworkShape, SearchSpaceSpec, SuperNetwork};
use tdnnf_nas::train::TrainConfig;

fn main() -> tdnnf_nas::error::Result<()> {
    let seed = 1;
    let data = SyntheticTaskSpec {
        kind: TaskKind::Rank,
        num_sequences: 1000,
        feature_dim: 8,
        num_classes: 6,
        rank: 2,
        seed,
        ..SyntheticTaskSpec::default()
    }
    .generate()?;
    let (train, held) = split_heldout(&data, 0.05, &mut Rng::new(seed, streams::SPLIT))?;
    let space = SearchSpaceSpec::new(2, 0, 0, vec![1, 2, 4], false, true)?;
    let shape = NetworkShape {
        input_dim: 8,
        hidden_dim: 16,
        num_classes: 6,
    };
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let nas = NasConfig {
        method: Method::PipeSoftmax,
        ..NasConfig::default()
    };
    let net = SuperNetwork::new(space.clone(), shape, &mut Rng::new(seed, streams::INIT))?;
    let out = run_search(net, SearchData { train: &train, heldout: Some(&held) }, &nas, &cfg)?;
    let report = brute_force_rank(&space, shape, &train, &held, &cfg, DEFAULT_CAP)?;
    let compared = compare_nas_to_oracle(out.weights(), &space, &report)?;
    print!("{}", report_csv(&compared, &space));
    Ok(())
}
