//! FedAvg over label-skewed clients, with and without Gaussian DP.
//!
//! cargo run --release -p glab --example federated

use glab::data::synth_dataset;
use glab::defenses::{DefenseConfig, DefenseKind};
use glab::fl::{run_training, FlConfig, PartitionKind};
use glab::model::{small_cnn, Activation};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (train, test) = synth_dataset(10, 50, 16, 16, 5)?.split(200, 5)?;
    let model = small_cnn(train.image_shape(), 10, 1, Activation::Sigmoid)?.init_gain(2.5).build(5)?;
    for defense in [DefenseConfig::none(), DefenseConfig::new(DefenseKind::DpGaussian, 0.05)] {
        let cfg = FlConfig {
            num_clients: 8,
            clients_per_round: 4,
            rounds: 150,
            batch_size: 16,
            lr: 0.3,
            partition: PartitionKind::Dirichlet { concentration: 1.0 },
            defense: defense.clone(),
            eval_every: 50,
            seed: 5,
            ..FlConfig::default()
        };
        let (_, hist) = run_training(model.clone(), &train, &test, &cfg, None)?;
        let accs: Vec<String> = hist.rounds.iter().filter_map(|r| r.accuracy.map(|a| format!("round {}: {a:.3}", r.round + 1))).collect();
        println!("{} {}: {} (loss over last 10 rounds {:.4})", defense.kind, defense.strength, accs.join(", "), hist.tail_loss(10).unwrap());
    }
    Ok(())
}
