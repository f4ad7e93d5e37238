//! Reconstructs a training image from its gradient, undefended and under
//! DP noise, and writes the images as PPM files.
//!
//! cargo run --release -p glab --example attack

use glab::attacks::{gradient_match_attack, infer_labels, AttackConfig};
use glab::config::parse_defense;
use glab::data::synth_dataset;
use glab::defenses::{apply_defense, DefenseConfig};
use glab::metrics::{psnr, ssim};
use glab::model::{small_cnn, Activation};
use glab::pnm;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_dataset(10, 2, 16, 16, 4)?;
    let shape = data.image_shape();
    let model = small_cnn(shape, 10, 1, Activation::Sigmoid)?.init_gain(2.5).build(4)?;
    let batch = data.batch(&[3]);
    let (_, g) = model.gradient(&batch)?;
    let out = std::env::temp_dir().join("glab-example-attack");
    std::fs::create_dir_all(&out)?;
    pnm::write(&out.join("original.ppm"), batch.inputs.data(), shape)?;

    for entry in ["none:0", "dp_gaussian:0.01", "dp_gaussian:0.1"] {
        let (kind, strength) = parse_defense(entry)?;
        let upload = apply_defense(&DefenseConfig::new(kind, strength), &model, None, &batch, &g, &[0])?.upload;
        let labels = infer_labels(&model, &upload, 1)?;
        let cfg = AttackConfig { restarts: 2, seed: 4, ..AttackConfig::igla() };
        let res = gradient_match_attack(&model, &upload, &cfg, [1, shape[0], shape[1], shape[2]])?;
        let (x, xh) = (batch.inputs.to_vec(), res.x_hat.to_vec());
        println!(
            "{entry:<16} label {:?} (true {:?}), PSNR {:.2} dB, SSIM {:.4}",
            labels.labels,
            batch.labels,
            psnr(&xh, &x)?.value(),
            ssim(&xh, &x, shape)?.value
        );
        pnm::write(&out.join(format!("{}.ppm", entry.replace(':', "_"))), &xh, shape)?;
    }
    println!("images in {}", out.display());
    Ok(())
}
