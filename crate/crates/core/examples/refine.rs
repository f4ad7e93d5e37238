//! Synthesizes robust data for one batch and shows the upload staying
//! inside the ε-ball while x* drifts away from the real images.
//!
//! cargo run --release -p glab --example refine

use glab::data::synth_dataset;
use glab::evalnet::{train_eval_net, EvalNetConfig};
use glab::metrics::{mse, psnr};
use glab::model::{small_cnn, Activation};
use glab::refiner::{refine, RefinerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_dataset(10, 20, 16, 16, 1)?;
    let net = train_eval_net(&data, &EvalNetConfig { channels: [8, 16, 32], epochs: 5, ..EvalNetConfig::default() })?.net;
    let model = small_cnn(data.image_shape(), 10, 1, Activation::Sigmoid)?.init_gain(2.5).build(1)?;
    let batch = data.batch(&[0, 25, 50, 75]);
    let (_, g) = model.gradient(&batch)?;

    for epsilon in [0.05, 0.1, 0.5] {
        let cfg = RefinerConfig { epsilon, seed: 1, ..RefinerConfig::default() };
        let res = refine(&model, &net, &batch, Some(&g), &cfg)?;
        let (x, xs) = (batch.inputs.to_vec(), res.x_star.to_vec());
        println!(
            "ε={epsilon}: objective {:.4} → {:.4}, D(x*) {:.3}, MSE(x*, x) {:.4}, PSNR {:.1} dB, ‖g*−g‖ {:.3}, ‖upload−g‖ {:.3}",
            res.objective_trace[0],
            res.objective_trace.last().unwrap(),
            res.pm_trace.last().unwrap(),
            mse(&xs, &x)?,
            psnr(&xs, &x)?.value(),
            res.g_star.distance(&g)?,
            res.uploaded.distance(&g)?,
        );
    }
    Ok(())
}
