//! Generates both planted tasks, saves one to disk and reads it back.
//!
//! ```text
//! cargo run --release --example synthetic_data
//! ```

use tdnnf_nas::data::{load_dataset, save_dataset, SyntheticTaskSpec, TaskKind};

fn main() -> tdnnf_nas::error::Result<()> {
    for kind in [TaskKind::Context, TaskKind::Rank] {
        let spec = SyntheticTaskSpec {
            kind,
            feature_dim: 8,
            ..SyntheticTaskSpec::default()
        };
        let d = spec.generate()?;
        let mut counts = vec![0usize; d.num_classes];
        for s in &d.sequences {
            for &l in &s.labels {
                counts[l] += 1;
            }
        }
        println!("{:>7}: {} sequences, {} frames, class counts {counts:?}", kind.name(), d.len(), d.num_frames());
    }
    let d = SyntheticTaskSpec::default().generate()?;
    let path = std::env::temp_dir().join("tdnnf_nas_example.synd");
    save_dataset(&d, &path)?;
    println!("round trip through {}: equal = {}", path.display(), load_dataset(&path)? == d);
    std::fs::remove_file(path)?;
    Ok(())
}
