//! Gumbel-Softmax weights for fixed logits and noise as the temperature
//! anneals from 1 to 0.03.
//!
//! ```text
//! cargo run --release --example gumbel_sharpening
//! ```

use tdnnf_nas::numeric::Rng;
use tdnnf_nas::search::{anneal_temperature, gumbel_lambda_with_noise, softmax_lambda, TemperatureSchedule};

fn main() -> tdnnf_nas::error::Result<()> {
    let logits = [0.4, 0.1, -0.2, 0.3, 0.0];
    let mut rng = Rng::new(7, 0);
    let noise: Vec<f64> = logits.iter().map(|_| rng.draw_gumbel()).collect();
    println!("softmax      {:.3?}", softmax_lambda(&logits)?);
    let schedule = TemperatureSchedule::default();
    let total = 8;
    for step in 0..=total {
        let t = anneal_temperature(schedule, step, total)?;
        let lambda = gumbel_lambda_with_noise(&logits, &noise, t)?;
        println!("T = {t:<6.3}   {lambda:.3?}");
    }
    Ok(())
}
