//! Experiment configuration files.
//!
//! A config is TOML restricted to flat `section.key = value` pairs (either
//! written with `[section]` headers or as dotted keys). Every key is
//! optional; missing keys take the desk defaults below. Unknown keys are
//! rejected so typos do not silently fall back to defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attacks::AttackConfig;
use crate::data::{self, Dataset, SynthParams};
use crate::defenses::{DefenseConfig, DefenseKind};
use crate::error::{invalid, io_err, Error, Result};
use crate::evalnet::{EvalNetConfig, MixSampling};
use crate::fl::{FlConfig, PartitionKind};
use crate::model::{small_cnn, Activation, Model};
use crate::refiner::RefinerConfig;

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub fl: FlSection,
    pub defense: DefenseSection,
    pub refiner: RefinerSection,
    pub attack: AttackSection,
    pub evalnet: EvalNetSection,
    pub ablation: AblationSection,
    pub timing: TimingSection,
    pub validate: ValidateSection,
    pub demo: DemoSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `synthetic` or `cifar10`.
    pub source: String,
    /// CIFAR-10 binary batch file.
    pub path: Option<PathBuf>,
    /// Keep only the first `limit` CIFAR records (0 keeps all).
    pub limit: usize,
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub jitter: f64,
    pub pixel_noise: f64,
    pub gain_spread: f64,
    pub held_out: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            path: None,
            limit: 0,
            classes: 10,
            per_class: 200,
            height: 16,
            width: 16,
            jitter: 0.25,
            pixel_noise: 0.15,
            gain_spread: 0.3,
            held_out: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width_scale: usize,
    pub activation: String,
    /// Fresh weights are drawn from `U(±init_gain/√fan_in)`.
    pub init_gain: f64,
    /// Start from this checkpoint instead of a fresh model.
    pub path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { width_scale: 1, activation: "sigmoid".into(), init_gain: 2.5, path: None }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FlSection {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `iid` or `dirichlet`.
    pub partition: String,
    pub concentration: f64,
    pub eval_every: usize,
    pub record_time: bool,
}

impl Default for FlSection {
    fn default() -> Self {
        Self {
            num_clients: 10,
            clients_per_round: 10,
            rounds: 300,
            batch_size: 32,
            lr: 0.3,
            partition: "iid".into(),
            concentration: 1.0,
            eval_every: 50,
            record_time: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    /// Entries `kind:strength`, e.g. `dp_gaussian:0.01` or `refiner:0.1`.
    pub sweep: Vec<String>,
    pub clip_norm: f64,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self { sweep: vec!["none:0".into()], clip_norm: 1.0 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerSection {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub iterations: usize,
    pub step_size: f64,
    /// Measure UM relative to the weighted norm of the true gradient.
    pub relative_um: bool,
}

impl Default for RefinerSection {
    fn default() -> Self {
        let d = RefinerConfig::default();
        Self { alpha: d.alpha, beta: d.beta, tau: d.tau, iterations: d.iterations, step_size: d.step_size, relative_um: d.relative_um }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// `igla`, `inverting_grad` or `grad_inversion`.
    pub preset: String,
    /// Overrides of the preset; 0 keeps the preset's value.
    pub iterations: usize,
    pub restarts: usize,
    /// Images per attacked upload.
    pub batch_size: usize,
    /// Attacked uploads per (defense, seed) cell.
    pub trials: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { preset: "igla".into(), iterations: 0, restarts: 3, batch_size: 1, trials: 4 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalNetSection {
    /// Load a trained network instead of training one.
    pub path: Option<PathBuf>,
    pub channels: [usize; 3],
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `grid` or `uniform`.
    pub mixing: String,
    /// Draws per image for `uniform` mixing.
    pub draws: usize,
    pub seed: u64,
}

impl Default for EvalNetSection {
    fn default() -> Self {
        let d = EvalNetConfig::default();
        Self { path: None, channels: d.channels, lr: d.lr, batch_size: d.batch_size, epochs: d.epochs, mixing: "grid".into(), draws: 11, seed: d.seed }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// `alpha`, `beta`, `iota` or `tau`.
    pub knob: String,
    pub values: Vec<f64>,
    pub epsilon: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { knob: "alpha".into(), values: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9], epsilon: 0.1 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSection {
    /// Final dense layer input widths for the Soteria scan.
    pub widths: Vec<usize>,
    /// Refinement iteration counts.
    pub iotas: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub batch_size: usize,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self { widths: vec![32, 64, 128, 256], iotas: vec![5, 10, 20, 40], reps: 10, warmup: 3, batch_size: 8 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub rates: Vec<f64>,
    pub noise: f64,
    /// Model activation for these training-only comparisons.
    pub activation: String,
    pub init_gain: f64,
    pub lr: f64,
    pub rounds: usize,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self { rates: vec![0.2, 0.4, 0.6, 0.8], noise: 0.1, activation: "relu".into(), init_gain: 1.0, lr: 0.05, rounds: 300 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSection {
    /// `kind:strength` of the defense shown.
    pub defense: String,
}

impl Default for DemoSection {
    fn default() -> Self {
        Self { defense: "refiner:0.1".into() }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Sweep cells executed concurrently.
    pub workers: usize,
    pub plots: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { workers: 1, plots: true }
    }
}

/// Parses `kind:strength`.
pub fn parse_defense(entry: &str) -> Result<(DefenseKind, f64)> {
    let (kind, strength) = entry.rsplit_once(':').ok_or_else(|| Error::Config(format!("defense entry {entry:?} is not kind:strength")))?;
    let strength: f64 = strength.trim().parse().map_err(|_| Error::Config(format!("bad strength in {entry:?}")))?;
    Ok((kind.trim().parse()?, strength))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.defense.sweep.is_empty() {
            return Err(Error::Config("defense.sweep must not be empty".into()));
        }
        for entry in &self.defense.sweep {
            self.defense_config(entry, 0)?.validate()?;
        }
        self.activation()?;
        if !(self.model.init_gain > 0.0 && self.model.init_gain.is_finite()) {
            return Err(Error::Config(format!("model.init_gain {} must be positive", self.model.init_gain)));
        }
        self.fl_config(DefenseConfig::none(), 0).validate()?;
        self.attack_config(0)?.validate()?;
        self.refiner_config(0).validate()
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::parse(&self.model.activation).ok_or_else(|| Error::Config(format!("unknown activation {:?}", self.model.activation)))
    }

    /// Loads or generates the dataset, then holds out the test split.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let ds = match d.source.as_str() {
            "synthetic" => {
                let params = SynthParams { jitter: d.jitter, pixel_noise: d.pixel_noise, gain_spread: d.gain_spread };
                data::synth_dataset_with(d.classes, d.per_class, d.height, d.width, params, d.seed)?
            }
            "cifar10" => {
                let path = d.path.as_deref().ok_or_else(|| Error::Config("data.path is required for cifar10".into()))?;
                let full = data::load_cifar10_binary(path)?;
                if d.limit > 0 && d.limit < full.len() {
                    full.subset(&(0..d.limit).collect::<Vec<_>>())
                } else {
                    full
                }
            }
            other => return Err(Error::Config(format!("unknown data.source {other:?}"))),
        };
        ds.split(d.held_out, d.seed)
    }

    pub fn model(&self, image_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Model> {
        match &self.model.path {
            Some(p) => crate::checkpoint::load_model(p),
            None => small_cnn(image_shape, num_classes, self.model.width_scale, self.activation()?)?.init_gain(self.model.init_gain).build(seed),
        }
    }

    pub fn refiner_config(&self, seed: u64) -> RefinerConfig {
        let r = &self.refiner;
        RefinerConfig { alpha: r.alpha, beta: r.beta, tau: r.tau, iterations: r.iterations, step_size: r.step_size, relative_um: r.relative_um, seed, ..RefinerConfig::default() }
    }

    pub fn defense_config(&self, entry: &str, seed: u64) -> Result<DefenseConfig> {
        let (kind, strength) = parse_defense(entry)?;
        Ok(DefenseConfig { kind, strength, clip_norm: self.defense.clip_norm, refiner: self.refiner_config(seed), seed })
    }

    pub fn fl_config(&self, defense: DefenseConfig, seed: u64) -> FlConfig {
        let f = &self.fl;
        let partition = match f.partition.as_str() {
            "dirichlet" => PartitionKind::Dirichlet { concentration: f.concentration },
            _ => PartitionKind::Iid,
        };
        FlConfig {
            num_clients: f.num_clients,
            clients_per_round: f.clients_per_round,
            rounds: f.rounds,
            batch_size: f.batch_size,
            lr: f.lr,
            partition,
            defense,
            eval_every: f.eval_every,
            record_time: f.record_time,
            seed,
        }
    }

    pub fn attack_config(&self, seed: u64) -> Result<AttackConfig> {
        let a = &self.attack;
        let mut cfg = AttackConfig::preset(&a.preset)?;
        if a.iterations > 0 {
            cfg.iterations = a.iterations;
        }
        if a.restarts > 0 {
            cfg.restarts = a.restarts;
        }
        if a.batch_size == 0 || a.trials == 0 {
            return Err(invalid("attack", "batch_size and trials must be at least 1"));
        }
        cfg.seed = seed;
        Ok(cfg)
    }

    pub fn evalnet_config(&self) -> Result<EvalNetConfig> {
        let e = &self.evalnet;
        let mixing = match e.mixing.as_str() {
            "grid" => MixSampling::default_grid(),
            "uniform" => MixSampling::Uniform { draws: e.draws },
            other => return Err(Error::Config(format!("unknown evalnet.mixing {other:?}"))),
        };
        Ok(EvalNetConfig { channels: e.channels, lr: e.lr, batch_size: e.batch_size, epochs: e.epochs, mixing, seed: e.seed })
    }
}

/// `"0,1,2"` → `[0, 1, 2]`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad seed {t:?}"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(seeds)
}
