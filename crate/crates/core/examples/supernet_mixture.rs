//! A super-network forward pass under architecture weights equals the
//! λ-weighted sum over every candidate layer, and a one-hot forward equals the
//! extracted standalone candidate.
//!
//! ```text
//! cargo run --release --example supernet_mixture
//! ```

use tdnnf_nas::layer::{layer_forward_onehot, LayerChoice};
use tdnnf_nas::numeric::{relu, Rng, SeqTensor};
use tdnnf_nas::supernet::{
    extract_network, gates_for_candidate, gates_for_network, sample_onehot_uniform, ArchitectureWeights,
    NetworkShape, SearchSpaceSpec, SuperNetwork,
};

fn main() -> tdnnf_nas::error::Result<()> {
    let space = SearchSpaceSpec::new(1, 2, 2, vec![2, 4], true, true)?;
    let shape = NetworkShape {
        input_dim: 3,
        hidden_dim: 5,
        num_classes: 3,
    };
    let mut rng = Rng::new(1, 0);
    let net = SuperNetwork::new(space.clone(), shape, &mut rng)?;
    let mut w = ArchitectureWeights::zeros(&space);
    let flat: Vec<f64> = w.to_flat().iter().map(|_| rng.draw_normal()).collect();
    w.set_flat(&flat)?;
    let lambdas = w.softmax_lambdas()?;
    let x = SeqTensor::from_vec(6, 3, (0..18).map(|_| rng.draw_normal()).collect())?;

    let (gated, _) = net.forward(&gates_for_network(&lambdas, &space)?, &x)?;

    // The same output from an explicit sum over the 3 x 3 x 2 candidates.
    let lam = &lambdas[0];
    let (left, right, dim) = (lam.left.as_ref().unwrap(), lam.right.as_ref().unwrap(), lam.dim.as_ref().unwrap());
    let mut acc = SeqTensor::zeros(6, 5);
    for (c, lc) in left.iter().enumerate() {
        for (r, lr) in right.iter().enumerate() {
            for (i, li) in dim.iter().enumerate() {
                let y = layer_forward_onehot(&net.layers[0], LayerChoice::new(c, r, i), &space.dim_choices, &x, false)?;
                for (a, b) in acc.data_mut().iter_mut().zip(y.data()) {
                    *a += lc * lr * li * b;
                }
            }
        }
    }
    let summed = net.classifier.forward(&relu(&acc))?;
    println!("gated vs summed candidates: max |diff| = {:.2e}", gated.max_abs_diff(&summed));

    let cand = sample_onehot_uniform(&space, &mut rng);
    let (onehot, _) = net.forward(&gates_for_candidate(&space, &cand)?, &x)?;
    let standalone = extract_network(&net, &cand)?;
    println!(
        "one-hot {:?} vs extracted ({} parameters): identical = {}",
        cand.layers[0],
        standalone.param_count(),
        onehot.data() == standalone.forward(&x)?.data()
    );
    Ok(())
}
