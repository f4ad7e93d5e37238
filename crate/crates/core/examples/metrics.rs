//! PSNR and SSIM of an image against noisier and noisier copies.
//!
//! cargo run --release -p glab --example metrics

use glab::data::{sample_uniform_noise, synth_dataset};
use glab::evalnet::mix;
use glab::metrics::{mse, psnr, ssim};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_dataset(1, 1, 32, 32, 6)?;
    let x = data.image(0);
    let noise = sample_uniform_noise(&[x.len()], 6).to_vec();
    println!("  r     MSE      PSNR    SSIM");
    for r in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8] {
        let y = mix(x, &noise, r);
        println!("{r:4.2}  {:.5}  {:7.2}  {:.4}", mse(&y, x)?, psnr(&y, x)?.value(), ssim(&y, x, data.image_shape())?.value);
    }
    Ok(())
}
