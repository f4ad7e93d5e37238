//! Trains a small CNN centrally for a few hundred SGD steps, saves it and
//! checks the reloaded copy predicts identically.
//!
//! cargo run --release -p glab --example checkpoint

use glab::checkpoint::{load_model, save_model};
use glab::data::synth_dataset;
use glab::model::{small_cnn, Activation};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (train, test) = synth_dataset(10, 60, 16, 16, 3)?.split(200, 3)?;
    let mut model = small_cnn(train.image_shape(), 10, 1, Activation::Sigmoid)?.init_gain(2.5).build(0)?;
    println!("{} parameters in {} layers", model.num_params(), model.num_layers());

    let held = test.all();
    for step in 0..400 {
        let idx: Vec<usize> = (0..16).map(|i| (step * 16 + i) % train.len()).collect();
        let (loss, g) = model.gradient(&train.batch(&idx))?;
        model.apply_gradient(&g, 0.3)?;
        if step % 100 == 99 {
            println!("step {}: batch loss {loss:.4}, held-out accuracy {:.3}", step + 1, model.accuracy(&held.inputs, &held.labels)?);
        }
    }

    let path = std::env::temp_dir().join("glab-example-cnn.glab");
    save_model(&path, &model)?;
    let back = load_model(&path)?;
    assert_eq!(back.predict(&held.inputs)?, model.predict(&held.inputs)?);
    println!("reloaded {} ({} bytes): predictions match", path.display(), std::fs::metadata(&path)?.len());
    Ok(())
}
