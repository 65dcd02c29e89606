//! Interrupts a search halfway, saves its state, resumes from the file, and
//! checks the result against an uninterrupted run.
//!
//! ```text
//! cargo run --release --example checkpoint_resume
//! ```

use tdnnf_nas::data::{split_heldout, SyntheticTaskSpec};
use tdnnf_nas::numeric::{streams, Rng};
use tdnnf_nas::search::{Method, NasConfig, SearchData, SearchRun, SearchState};
use tdnnf_nas::supernet::{NetworkShape, SearchSpaceSpec, SuperNetwork};
use tdnnf_nas::train::{Checkpoint, TrainConfig};

fn main() -> tdnnf_nas::error::Result<()> {
    let data = SyntheticTaskSpec::default().generate()?;
    let (train, held) = split_heldout(&data, 0.05, &mut Rng::new(0, streams::SPLIT))?;
    let space = SearchSpaceSpec::new(2, 2, 2, vec![2, 4], true, true)?;
    let shape = NetworkShape {
        input_dim: 4,
        hidden_dim: 8,
        num_classes: 4,
    };
    let nas = NasConfig {
        method: Method::PipeGumbel,
        eta: 0.1,
        ..NasConfig::default()
    };
    let cfg = TrainConfig::default();
    let run = SearchRun::new(&nas, &cfg, SearchData { train: &train, heldout: Some(&held) })?;
    let fresh = || -> tdnnf_nas::error::Result<SearchState> {
        Ok(SearchState::new(SuperNetwork::new(space.clone(), shape, &mut Rng::new(0, streams::INIT))?, &cfg))
    };

    let mut straight = fresh()?;
    run.run_from(&mut straight, &mut Vec::new())?;

    let half = run.total_steps() / 2;
    let mut first = fresh()?;
    run.run_until(&mut first, half, &mut Vec::new())?;
    let path = std::env::temp_dir().join("tdnnf_nas_resume.tdnf");
    first.to_checkpoint().save(&path)?;
    let mut resumed = SearchState::from_checkpoint(&Checkpoint::load(&path)?)?;
    run.run_from(&mut resumed, &mut Vec::new())?;
    std::fs::remove_file(&path)?;

    println!("{} steps, interrupted after {half}", run.total_steps());
    println!(
        "resumed state identical to uninterrupted run: {}",
        resumed.to_checkpoint().encode() == straight.to_checkpoint().encode()
    );
    Ok(())
}
