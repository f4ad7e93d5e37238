//! Runs a miniature defense sweep from an inline TOML config and prints the
//! resulting CSV, the same path the `glab tradeoff` verb takes.
//!
//! cargo run --release -p glab --example tradeoff

use glab::config::ExperimentConfig;
use glab::experiments::cmd_tradeoff;

// Sized to finish in under a minute; PMM is noisy this far from convergence.
const CONFIG: &str = r#"
[data]
per_class = 40
height = 16
width = 16
held_out = 200

[fl]
clients_per_round = 4
rounds = 120
batch_size = 16

[defense]
sweep = ["none:0", "dp_gaussian:0.01", "gq:4", "refiner:0.1"]

[attack]
iterations = 100
restarts = 1
trials = 2

[evalnet]
channels = [8, 16, 32]
epochs = 8

[run]
plots = false
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let out = std::env::temp_dir().join("glab-example-tradeoff");
    cmd_tradeoff(&cfg, &out, &[0])?;
    print!("{}", std::fs::read_to_string(out.join("tradeoff.csv"))?);
    Ok(())
}
