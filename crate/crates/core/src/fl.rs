//! Federated averaging with one local step per round and a defense hook on
//! every client upload.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use glab_autodiff::{GradientVector, Tensor};
use rand::seq::{index, SliceRandom};

use crate::data::{partition_dirichlet, partition_iid, Dataset, Partition};
use crate::defenses::{apply_defense, DefenseConfig, DefenseKind};
use crate::error::{invalid, io_err, Error, Result};
use crate::evalnet::EvalNet;
use crate::model::{Batch, Model};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartitionKind {
    Iid,
    Dirichlet { concentration: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub partition: PartitionKind,
    pub defense: DefenseConfig,
    /// Held-out accuracy is measured every this many rounds (and at the end).
    pub eval_every: usize,
    /// Record wall-clock defense time (non-deterministic).
    pub record_time: bool,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            clients_per_round: 10,
            rounds: 300,
            batch_size: 32,
            lr: 0.01,
            partition: PartitionKind::Iid,
            defense: DefenseConfig::none(),
            eval_every: 50,
            record_time: false,
            seed: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(invalid("clients per round", format!("{} of {}", self.clients_per_round, self.num_clients)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(invalid("fl config", format!("lr {} batch {}", self.lr, self.batch_size)));
        }
        self.defense.validate()
    }
}

/// Elementwise mean of client uploads.
pub fn aggregate(grads: &[GradientVector]) -> Result<GradientVector> {
    let first = grads.first().ok_or_else(|| invalid("aggregate", "no gradients"))?;
    let mut sum = GradientVector::zeros_like(first);
    for g in grads {
        sum = sum.add(g)?;
    }
    Ok(sum.scale(1.0 / grads.len() as f64))
}

/// The server only ever handles uploaded gradients.
#[derive(Clone, Debug)]
pub struct Server {
    model: Model,
}

impl Server {
    pub fn new(model: Model) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// θ ← θ − η·mean(uploads).
    pub fn apply(&mut self, uploads: &[GradientVector], lr: f64) -> Result<()> {
        let g = aggregate(uploads)?;
        self.model.apply_gradient(&g, lr)
    }
}

/// A client's view of the data: its own index list.
#[derive(Clone, Debug)]
pub struct Client {
    pub id: usize,
    indices: Vec<usize>,
}

/// What a client sends in one round.
#[derive(Clone, Debug)]
pub struct Upload {
    pub client: usize,
    pub gradient: GradientVector,
    /// Loss of the client's real batch.
    pub loss: f64,
    pub defense_time_s: f64,
}

impl Client {
    pub fn sample_batch(&self, data: &Dataset, size: usize, seed: u64, round: usize) -> Batch {
        let mut r = rng::rng(seed, &[tag::ROUND, round as u64, tag::CLIENT, self.id as u64]);
        let k = size.min(self.indices.len());
        let picks: Vec<usize> = index::sample(&mut r, self.indices.len(), k).into_iter().map(|i| self.indices[i]).collect();
        data.batch(&picks)
    }

    /// Local step: gradient of the sampled batch, passed through the defense.
    pub fn local_update(&self, model: &Model, data: &Dataset, cfg: &FlConfig, evalnet: Option<&EvalNet>, round: usize) -> Result<(Upload, Batch, Option<Tensor>)> {
        let batch = self.sample_batch(data, cfg.batch_size, cfg.seed, round);
        let (loss, g) = model.gradient(&batch)?;
        let start = Instant::now();
        let out = apply_defense(&cfg.defense, model, evalnet, &batch, &g, &[round as u64, self.id as u64])?;
        let elapsed = start.elapsed().as_secs_f64();
        if cfg.defense.kind == DefenseKind::Refiner {
            let d = out.upload.distance(&g)?;
            if d > cfg.defense.strength + 1e-12 {
                return Err(invalid("refiner upload", format!("distance {d} exceeds epsilon {}", cfg.defense.strength)));
            }
        }
        let upload = Upload { client: self.id, gradient: out.upload, loss, defense_time_s: if cfg.record_time { elapsed } else { 0.0 } };
        Ok((upload, batch, out.robust))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean real-batch loss over participating clients.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub defense_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub rounds: Vec<RoundRecord>,
    /// Set when training stopped early because the loss blew up.
    pub diverged_at: Option<usize>,
}

impl TrainingHistory {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.iter().rev().find_map(|r| r.accuracy)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.loss)
    }

    /// Mean loss over the last `k` rounds.
    pub fn tail_loss(&self, k: usize) -> Option<f64> {
        let tail = &self.rounds[self.rounds.len().saturating_sub(k)..];
        (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        out.write_record(["round", "loss", "accuracy", "defense_time_s"]).map_err(csv_err)?;
        for r in &self.rounds {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.write_record([r.round.to_string(), r.loss.to_string(), acc, r.defense_time_s.to_string()]).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Config(format!("csv: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        self.write_csv(f)
    }
}

/// Everything that evolves over training.
#[derive(Clone, Debug)]
pub struct FlState {
    pub server: Server,
    pub clients: Vec<Client>,
    pub round: usize,
}

impl FlState {
    pub fn new(model: Model, train: &Dataset, cfg: &FlConfig) -> Result<Self> {
        cfg.validate()?;
        let partition = match cfg.partition {
            PartitionKind::Iid => partition_iid(train, cfg.num_clients, cfg.seed)?,
            PartitionKind::Dirichlet { concentration } => partition_dirichlet(train, cfg.num_clients, concentration, cfg.seed)?,
        };
        Ok(Self::from_partition(model, partition))
    }

    pub fn from_partition(model: Model, partition: Partition) -> Self {
        let clients = partition.clients.into_iter().enumerate().map(|(id, indices)| Client { id, indices }).collect();
        Self { server: Server::new(model), clients, round: 0 }
    }
}

/// Outcome of one round.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub record: RoundRecord,
    /// Kept when requested: `(upload, real batch, robust batch)`.
    pub uploads: Vec<(Upload, Batch, Option<Tensor>)>,
    pub skipped: Vec<usize>,
}

/// Clients taking part in `round`, sampled without replacement from a
/// round-derived stream.
pub fn sample_clients(num_clients: usize, k: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..num_clients).collect();
    ids.shuffle(&mut rng::rng(seed, &[tag::ROUND, round as u64]));
    let mut picked = ids[..k].to_vec();
    picked.sort_unstable();
    picked
}

pub fn run_round(state: &mut FlState, train: &Dataset, cfg: &FlConfig, evalnet: Option<&EvalNet>, keep_uploads: bool) -> Result<RoundOutput> {
    let round = state.round;
    let picked = sample_clients(state.clients.len(), cfg.clients_per_round, cfg.seed, round);
    let mut grads = Vec::with_capacity(picked.len());
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    let (mut loss, mut time) = (0.0, 0.0);
    for &c in &picked {
        match state.clients[c].local_update(state.server.model(), train, cfg, evalnet, round) {
            Ok((up, batch, robust)) => {
                loss += up.loss;
                time += up.defense_time_s;
                grads.push(up.gradient.clone());
                if keep_uploads {
                    kept.push((up, batch, robust));
                }
            }
            Err(e) => {
                log::warn!("round {round}: client {c} skipped: {e}");
                skipped.push(c);
            }
        }
    }
    if grads.is_empty() {
        return Err(Error::Diverged { round, msg: "every client failed".into() });
    }
    let record = RoundRecord { round, loss: loss / grads.len() as f64, accuracy: None, defense_time_s: time };
    state.server.apply(&grads, cfg.lr)?;
    state.round += 1;
    Ok(RoundOutput { record, uploads: kept, skipped })
}

/// Runs `cfg.rounds` rounds from `model`, evaluating on `test`.
pub fn run_training(model: Model, train: &Dataset, test: &Dataset, cfg: &FlConfig, evalnet: Option<&EvalNet>) -> Result<(Model, TrainingHistory)> {
    let mut state = FlState::new(model, train, cfg)?;
    let mut history = TrainingHistory::default();
    let test_batch = test.all();
    for r in 0..cfg.rounds {
        let mut out = run_round(&mut state, train, cfg, evalnet, false)?;
        let last = r + 1 == cfg.rounds;
        if last || (cfg.eval_every > 0 && (r + 1) % cfg.eval_every == 0) {
            out.record.accuracy = Some(state.server.model().accuracy(&test_batch.inputs, &test_batch.labels)?);
        }
        let l = out.record.loss;
        history.rounds.push(out.record);
        if !l.is_finite() || l > 1e6 {
            log::warn!("training diverged at round {r}: loss {l}");
            history.diverged_at = Some(r);
            break;
        }
    }
    Ok((state.server.into_model(), history))
}
