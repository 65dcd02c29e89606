//! Repeated semi-orthogonal steps drive `‖MMᵀ − αI‖_F` of a layer's linear
//! factor towards zero.
//!
//! ```text
//! cargo run --release --example semi_orthogonal
//! ```

use tdnnf_nas::layer::FactoredLayer;
use tdnnf_nas::numeric::Rng;

fn main() -> tdnnf_nas::error::Result<()> {
    let mut layer = FactoredLayer::random(16, 16, 6, 2, 2, &mut Rng::new(3, 0));
    let initial = layer.orthogonality_residual();
    println!("step  0: residual {initial:.3e}");
    for step in 1..=10 {
        layer.semi_orthogonal_step()?;
        let r = layer.orthogonality_residual();
        println!("step {step:>2}: residual {r:.3e} ({:.1e} of initial)", r / initial);
    }
    Ok(())
}
