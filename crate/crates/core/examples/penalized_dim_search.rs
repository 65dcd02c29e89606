//! Penalized search over bottleneck widths {1, 2, 4, 8} on data of planted
//! rank 2: larger η trades accuracy for fewer parameters.
//!
//! ```text
//! cargo run --release --example penalized_dim_search
//! ```

use tdnnf_nas::data::{split_heldout, SyntheticTaskSpec, TaskKind};
use tdnnf_nas::numeric::{streams, Rng};
use tdnnf_nas::search::{run_search, Method, NasConfig, SearchData};
use tdnnf_nas::supernet::{network_param_count, NetworkShape, SearchSpaceSpec, SuperNetwork};
use tdnnf_nas::train::{retrain_candidate, TrainConfig};

fn main() -> tdnnf_nas::error::Result<()> {
    let seed = 0;
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
    let space = SearchSpaceSpec::new(1, 0, 0, vec![1, 2, 4, 8], false, true)?;
    let shape = NetworkShape {
        input_dim: 8,
        hidden_dim: 16,
        num_classes: 6,
    };
    let cfg = TrainConfig::default();
    for eta in [0.0, 0.1, 1.0, 1e6] {
        let nas = NasConfig {
            method: Method::PipeSoftmax,
            eta,
            ..NasConfig::default()
        };
        let net = SuperNetwork::new(space.clone(), shape, &mut Rng::new(seed, streams::INIT))?;
        let out = run_search(net, SearchData { train: &train, heldout: Some(&held) }, &nas, &cfg)?;
        let top = out.top1();
        let retrained = retrain_candidate(&top, &space, shape, &train, &held, &cfg)?;
        println!(
            "eta {eta:<7} dim {}  params {:>4}  retrained loss {:.4}",
            space.dim_choices[top.layers[0].dim_index],
            network_param_count(&top, &space, shape),
            retrained.val_loss
        );
    }
    Ok(())
}
