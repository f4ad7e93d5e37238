//! Trains the evaluation network on noise-mixed images and prints how its
//! score tracks the mixing ratio on held-out images.
//!
//! cargo run --release -p glab --example evalnet

use glab::data::synth_dataset;
use glab::evalnet::{train_eval_net, EvalNetConfig};
use glab::experiments::evaluate_evalnet;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (train, test) = synth_dataset(10, 30, 16, 16, 0)?.split(100, 0)?;
    let cfg = EvalNetConfig { channels: [8, 16, 32], epochs: 8, ..EvalNetConfig::default() };
    let trained = train_eval_net(&train, &cfg)?;
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        println!("epoch {}: mse {l:.5}", e + 1);
    }
    let q = evaluate_evalnet(&trained.net, &test, 0)?;
    println!("   r   mean D   |D - r|");
    for (r, m, err) in &q.per_ratio {
        println!("{r:4.1}   {m:.3}    {err:.3}");
    }
    println!("MAE {:.4}, monotone on {:.0}% of images", q.mae, 100.0 * q.monotone_fraction);
    Ok(())
}
