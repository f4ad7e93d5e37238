//! Applies every perturbation defense to one gradient and reports how far
//! the upload moves from it.
//!
//! cargo run --release -p glab --example defenses

use glab::config::parse_defense;
use glab::data::synth_dataset;
use glab::defenses::{apply_defense, DefenseConfig};
use glab::model::{small_cnn, Activation};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_dataset(10, 4, 16, 16, 2)?;
    let model = small_cnn(data.image_shape(), 10, 1, Activation::Sigmoid)?.build(2)?;
    let batch = data.batch(&[0, 4, 8, 12, 16, 20, 24, 28]);
    let (_, g) = model.gradient(&batch)?;
    println!("‖g‖ = {:.4}", g.norm());
    println!("{:<18} {:>10} {:>8} {:>8}", "defense", "‖up − g‖", "cos", "zeros");
    for entry in ["dp_gaussian:0.01", "dp_laplace:0.01", "gq:4", "gq:8", "prune:0.4", "prune_grad:0.4", "prune_weight:0.4", "soteria:0.4", "layer_noise:1:0.1"] {
        let (kind, strength) = parse_defense(entry)?;
        let cfg = DefenseConfig { seed: 2, ..DefenseConfig::new(kind, strength) };
        let up = apply_defense(&cfg, &model, None, &batch, &g, &[0])?.upload;
        let zeros = up.iter().filter(|v| **v == 0.0).count();
        println!("{entry:<18} {:>10.4} {:>8.4} {:>8}", up.distance(&g)?, up.dot(&g)? / (up.norm() * g.norm()), zeros);
    }
    Ok(())
}
