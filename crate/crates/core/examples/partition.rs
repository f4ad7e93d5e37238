//! Synthetic images split across clients, IID and label-skewed.
//!
//! cargo run --release -p glab --example partition

use glab::data::{partition_dirichlet, partition_iid, synth_dataset, Dataset, Partition};

fn histogram(data: &Dataset, p: &Partition) {
    for (c, idx) in p.clients.iter().enumerate() {
        let mut counts = vec![0; data.num_classes()];
        for &i in idx {
            counts[data.labels()[i]] += 1;
        }
        println!("  client {c}: {counts:?}");
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_dataset(5, 40, 16, 16, 7)?;
    let (train, test) = data.split(50, 7)?;
    println!("{} train / {} held-out images of shape {:?}", train.len(), test.len(), train.image_shape());

    println!("iid:");
    histogram(&train, &partition_iid(&train, 4, 1)?);
    for concentration in [10.0, 0.1] {
        println!("dirichlet, concentration {concentration}:");
        histogram(&train, &partition_dirichlet(&train, 4, concentration, 1)?);
    }
    Ok(())
}
