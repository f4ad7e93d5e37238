//! Experiment runners behind the command-line verbs. Each runner writes
//! CSV files (the contract) and optional SVG charts into an output
//! directory; every CSV row is a pure function of the config and seed
//! unless wall-clock recording is switched on.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use glab_autodiff::Tensor;

use crate::attacks::gradient_match_attack;
use crate::checkpoint;
use crate::config::{parse_defense, ExperimentConfig};
use crate::data::{uniform_noise, Dataset};
use crate::defenses::{apply_defense, DefenseConfig, DefenseKind, PruneStrategy};
use crate::error::{invalid, io_err, Error, Result};
use crate::evalnet::{mix, train_eval_net, EvalNet};
use crate::fl::{run_round, run_training, FlConfig, FlState};
use crate::metrics::{self, Psnr};
use crate::model::{Activation, Model, ModelBuilder};
use crate::plot::{line_chart, Series};
use crate::pnm;
use crate::refiner::RefinerConfig;
use crate::rng::{self, tag};

pub const RECORD_HEADER: [&str; 10] = ["defense", "strength", "attack", "seed", "pmm", "psnr", "ssim", "evalnet", "mse", "time_s"];

/// One row of a trade-off or ablation table. Metric fields are `None` when
/// the cell failed or the metric does not apply.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub defense: String,
    pub strength: f64,
    pub attack: String,
    pub seed: u64,
    pub pmm: Option<f64>,
    pub psnr: Option<Psnr>,
    pub ssim: Option<f64>,
    pub evalnet: Option<f64>,
    pub mse: Option<f64>,
    pub time_s: Option<f64>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentRecord {
    fn empty(defense: String, strength: f64, attack: &str, seed: u64) -> Self {
        Self { defense, strength, attack: attack.into(), seed, pmm: None, psnr: None, ssim: None, evalnet: None, mse: None, time_s: None }
    }

    pub fn to_row(&self) -> Vec<String> {
        vec![
            self.defense.clone(),
            self.strength.to_string(),
            self.attack.clone(),
            self.seed.to_string(),
            opt(self.pmm),
            opt(self.psnr),
            opt(self.ssim),
            opt(self.evalnet),
            opt(self.mse),
            opt(self.time_s),
        ]
    }

    pub fn from_row(row: &csv::StringRecord) -> Result<Self> {
        let field = |i: usize| row.get(i).ok_or_else(|| Error::Config(format!("short row {row:?}")));
        let num = |i: usize| -> Result<Option<f64>> {
            let s = field(i)?;
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Config(format!("bad number {s:?}")))
            }
        };
        let psnr = match field(5)? {
            "" => None,
            "inf" => Some(Psnr::Infinite),
            s => Some(Psnr::Db(s.parse().map_err(|_| Error::Config(format!("bad psnr {s:?}")))?)),
        };
        Ok(Self {
            defense: field(0)?.to_string(),
            strength: num(1)?.unwrap_or(0.0),
            attack: field(2)?.to_string(),
            seed: field(3)?.parse().map_err(|_| Error::Config("bad seed".into()))?,
            pmm: num(4)?,
            psnr,
            ssim: num(6)?,
            evalnet: num(7)?,
            mse: num(8)?,
            time_s: num(9)?,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Writes `header` then `rows` to `path`.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    write_csv(path, &RECORD_HEADER, records.iter().map(|r| r.to_row()))
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.records().map(|row| ExperimentRecord::from_row(&row.map_err(csv_err)?)).collect()
}

/// Runs `f(0..n)` on up to `workers` threads and returns results in index order.
pub fn run_jobs<T: Send, F: Fn(usize) -> T + Sync>(n: usize, workers: usize, f: F) -> Vec<T> {
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                *slots[i].lock().expect("result slot") = Some(v);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("result slot").expect("every job ran")).collect()
}

/// Data, evaluation network and config shared by every cell of a run.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub evalnet: Option<EvalNet>,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, need_evalnet: bool) -> Result<Self> {
        let (train, test) = cfg.datasets()?;
        let mut ws = Self { cfg, train, test, evalnet: None };
        if need_evalnet {
            ws.evalnet = Some(ws.load_or_train_evalnet()?);
        }
        Ok(ws)
    }

    fn load_or_train_evalnet(&self) -> Result<EvalNet> {
        match &self.cfg.evalnet.path {
            Some(p) => {
                let net = EvalNet::from_model(checkpoint::load_model(p)?)?;
                if net.image_shape() != self.train.image_shape() {
                    return Err(invalid("evaluation network", format!("input {:?} does not match images {:?}", net.image_shape(), self.train.image_shape())));
                }
                Ok(net)
            }
            None => {
                log::info!("training evaluation network (seed {})", self.cfg.evalnet.seed);
                Ok(train_eval_net(&self.train, &self.cfg.evalnet_config()?)?.net)
            }
        }
    }

    pub fn model(&self, seed: u64) -> Result<Model> {
        self.cfg.model(self.train.image_shape(), self.train.num_classes(), seed)
    }

    fn evalnet_score(&self, x: &Tensor) -> Result<Option<f64>> {
        self.evalnet.as_ref().map(|n| n.pm_score(x)).transpose()
    }
}

/// Averages of reconstruction quality over attacked uploads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSummary {
    pub psnr: Psnr,
    pub ssim: f64,
    pub mse: f64,
    pub evalnet: Option<f64>,
    /// Mean `MSE(x*, x)` when the defense synthesized robust data.
    pub robust_mse: Option<f64>,
    pub uploads: usize,
}

/// One attacked upload with everything needed for dumps.
#[derive(Clone, Debug)]
pub struct AttackCase {
    pub original: Tensor,
    pub labels: Vec<usize>,
    pub robust: Option<Tensor>,
    pub reconstruction: Tensor,
    pub inferred_labels: Vec<usize>,
}

/// Per-image PSNR averaged in dB; any exact reconstruction makes it infinite.
pub fn mean_psnr(values: &[Psnr]) -> Psnr {
    if values.iter().any(|p| p.is_infinite()) {
        return Psnr::Infinite;
    }
    Psnr::Db(values.iter().map(|p| p.value()).sum::<f64>() / values.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-image metrics of `x_hat` against `x`, both `(n, c, h, w)`.
pub fn image_metrics(x_hat: &[f64], x: &[f64], shape: [usize; 3]) -> Result<(Vec<Psnr>, Vec<f64>, Vec<f64>)> {
    let per: usize = shape.iter().product();
    let (mut p, mut s, mut m) = (Vec::new(), Vec::new(), Vec::new());
    for (a, b) in x_hat.chunks(per).zip(x.chunks(per)) {
        p.push(metrics::psnr(a, b)?);
        s.push(metrics::ssim(a, b, shape)?.value);
        m.push(metrics::mse(a, b)?);
    }
    Ok((p, s, m))
}

/// Runs the round-0 protocol from `model` with the attack's batch size,
/// then attacks every upload the server received.
pub fn attack_round_zero(ws: &Workspace, model: &Model, fl: &FlConfig, seed: u64) -> Result<(AttackSummary, Vec<AttackCase>)> {
    let a = &ws.cfg.attack;
    let mut cfg = fl.clone();
    cfg.batch_size = a.batch_size;
    cfg.clients_per_round = a.trials.min(cfg.num_clients);
    let mut state = FlState::new(model.clone(), &ws.train, &cfg)?;
    let round = run_round(&mut state, &ws.train, &cfg, ws.evalnet.as_ref(), true)?;
    let shape = ws.train.image_shape();
    let (mut ps, mut ss, mut ms, mut es, mut rs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut cases = Vec::new();
    for (upload, batch, robust) in round.uploads {
        let mut acfg = ws.cfg.attack_config(rng::derive(seed, &[tag::ATTACK, upload.client as u64]))?;
        acfg.name = a.preset.clone();
        let n = batch.len();
        let res = gradient_match_attack(model, &upload.gradient, &acfg, [n, shape[0], shape[1], shape[2]])?;
        let (p, s, m) = image_metrics(&res.x_hat.to_vec(), &batch.inputs.to_vec(), shape)?;
        ps.extend(p);
        ss.extend(s);
        ms.extend(m);
        if let Some(e) = ws.evalnet_score(&res.x_hat)? {
            es.push(e);
        }
        if let Some(r) = &robust {
            rs.push(metrics::mse(&r.to_vec(), &batch.inputs.to_vec())?);
        }
        cases.push(AttackCase { original: batch.inputs, labels: batch.labels, robust, reconstruction: res.x_hat, inferred_labels: res.labels });
    }
    if ps.is_empty() {
        return Err(Error::Attack("no uploads were attacked".into()));
    }
    let summary = AttackSummary {
        psnr: mean_psnr(&ps),
        ssim: mean(&ss),
        mse: mean(&ms),
        evalnet: (!es.is_empty()).then(|| mean(&es)),
        robust_mse: (!rs.is_empty()).then(|| mean(&rs)),
        uploads: cases.len(),
    };
    Ok((summary, cases))
}

/// Held-out accuracy of the model trained under `fl`, plus mean defense
/// time per upload when it was recorded.
pub fn train_accuracy(ws: &Workspace, model: Model, fl: &FlConfig) -> Result<(f64, Option<f64>)> {
    let (trained, hist) = run_training(model, &ws.train, &ws.test, fl, ws.evalnet.as_ref())?;
    if let Some(r) = hist.diverged_at {
        log::warn!("{} {}: diverged at round {r}", fl.defense.kind, fl.defense.strength);
    }
    let t = ws.test.all();
    let acc = trained.accuracy(&t.inputs, &t.labels)?;
    let time = fl.record_time.then(|| {
        let uploads = (hist.rounds.len() * fl.clients_per_round).max(1);
        hist.rounds.iter().map(|r| r.defense_time_s).sum::<f64>() / uploads as f64
    });
    Ok((acc, time))
}

/// A sweep cell: one defense configuration and one seed.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub strength: f64,
    pub defense: DefenseConfig,
    pub seed: u64,
}

fn baseline_accuracies(ws: &Workspace, seeds: &[u64]) -> Vec<Result<f64>> {
    run_jobs(seeds.len(), ws.cfg.run.workers, |i| {
        let seed = seeds[i];
        log::info!("baseline training, seed {seed}");
        let fl = ws.cfg.fl_config(DefenseConfig::none(), seed);
        train_accuracy(ws, ws.model(seed)?, &fl).map(|(a, _)| a)
    })
}

fn run_cell(ws: &Workspace, cell: &Cell, baseline: Option<f64>) -> ExperimentRecord {
    let mut rec = ExperimentRecord::empty(cell.label.clone(), cell.strength, &ws.cfg.attack.preset, cell.seed);
    let what = format!("cell {} {} seed {}", cell.label, cell.strength, cell.seed);
    let fl = ws.cfg.fl_config(cell.defense.clone(), cell.seed);
    let model = match ws.model(cell.seed) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("{what} failed: {e}");
            return rec;
        }
    };
    match attack_round_zero(ws, &model, &fl, cell.seed) {
        Ok((summary, _)) => {
            rec.psnr = Some(summary.psnr);
            rec.ssim = Some(summary.ssim);
            rec.mse = Some(summary.mse);
            rec.evalnet = summary.evalnet;
        }
        Err(e) => log::warn!("{what}: attack failed: {e}"),
    }
    let utility = || -> Result<(f64, Option<f64>)> {
        let baseline = baseline.ok_or_else(|| Error::Config("baseline training failed".into()))?;
        let (acc, time) = if cell.defense.kind == DefenseKind::None && !fl.record_time {
            (baseline, None)
        } else {
            train_accuracy(ws, model, &fl)?
        };
        Ok((metrics::pmm(acc, baseline)?, time))
    };
    match utility() {
        Ok((pmm, time)) => {
            rec.pmm = Some(pmm);
            rec.time_s = time;
        }
        Err(e) => log::warn!("{what}: utility failed: {e}"),
    }
    rec
}

/// Runs every cell; failed cells keep empty metric fields.
pub fn run_cells(ws: &Workspace, cells: &[Cell], seeds: &[u64]) -> Vec<ExperimentRecord> {
    let base: Vec<Option<f64>> = baseline_accuracies(ws, seeds)
        .into_iter()
        .zip(seeds)
        .map(|(r, s)| r.map_err(|e| log::warn!("baseline for seed {s} failed: {e}")).ok())
        .collect();
    run_jobs(cells.len(), ws.cfg.run.workers, |i| {
        let cell = &cells[i];
        log::info!("cell {}/{}: {} {} seed {}", i + 1, cells.len(), cell.label, cell.strength, cell.seed);
        let b = seeds.iter().position(|&s| s == cell.seed).and_then(|k| base[k]);
        run_cell(ws, cell, b)
    })
}

/// Mean of a metric per `(defense, strength)` in first-seen order.
pub fn seed_means(records: &[ExperimentRecord], metric: impl Fn(&ExperimentRecord) -> Option<f64>) -> Vec<(String, f64, f64)> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(d, s)| *d == r.defense && *s == r.strength) {
            keys.push((r.defense.clone(), r.strength));
        }
    }
    keys.into_iter()
        .map(|(d, s)| {
            let vals: Vec<f64> = records.iter().filter(|r| r.defense == d && r.strength == s).filter_map(&metric).collect();
            let m = if vals.is_empty() { f64::NAN } else { mean(&vals) };
            (d, s, m)
        })
        .collect()
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(io_err(path))
}

fn psnr_of(r: &ExperimentRecord) -> Option<f64> {
    r.psnr.map(|p| p.value()).filter(|v| v.is_finite())
}

/// Defense sweep: privacy from round-0 attacks, utility as PMM.
pub fn cmd_tradeoff(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<ExperimentRecord>> {
    ensure_dir(out)?;
    let need_net = cfg.defense.sweep.iter().any(|e| parse_defense(e).is_ok_and(|(k, _)| k == DefenseKind::Refiner));
    let ws = Workspace::new(cfg.clone(), need_net)?;
    let mut cells = Vec::new();
    for entry in &cfg.defense.sweep {
        let (kind, strength) = parse_defense(entry)?;
        for &seed in seeds {
            cells.push(Cell { label: kind.to_string(), strength, defense: cfg.defense_config(entry, seed)?, seed });
        }
    }
    let records = run_cells(&ws, &cells, seeds);
    write_records(&out.join("tradeoff.csv"), &records)?;
    if cfg.run.plots {
        let psnr = seed_means(&records, psnr_of);
        let pmm = seed_means(&records, |r| r.pmm);
        let mut series: Vec<Series> = Vec::new();
        for ((d, _, p), (_, _, u)) in psnr.iter().zip(&pmm) {
            match series.iter_mut().find(|s| s.name == *d) {
                Some(s) => s.points.push((*p, *u)),
                None => series.push(Series { name: d.clone(), points: vec![(*p, *u)] }),
            }
        }
        write_svg(&out.join("tradeoff.svg"), &line_chart("Utility vs privacy", "attack PSNR (dB)", "PMM (%)", &series))?;
    }
    Ok(records)
}

/// Sets one refiner knob.
pub fn with_knob(mut rc: RefinerConfig, knob: &str, value: f64) -> Result<RefinerConfig> {
    match knob {
        "alpha" => rc.alpha = value,
        "beta" => rc.beta = value,
        "tau" => rc.tau = value,
        "iota" => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(invalid("iota", format!("{value} is not a positive integer")));
            }
            rc.iterations = value as usize;
        }
        other => return Err(invalid("ablation knob", format!("{other:?} is not one of alpha, beta, iota, tau"))),
    }
    rc.validate()?;
    Ok(rc)
}

/// Refiner sweep over one knob at `ε = ablation.epsilon`.
pub fn cmd_ablation(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<ExperimentRecord>> {
    ensure_dir(out)?;
    let knob = cfg.ablation.knob.as_str();
    if cfg.ablation.values.is_empty() {
        return Err(Error::Config("ablation.values must not be empty".into()));
    }
    let ws = Workspace::new(cfg.clone(), true)?;
    let mut cells = Vec::new();
    for &v in &cfg.ablation.values {
        for &seed in seeds {
            let refiner = with_knob(cfg.refiner_config(seed), knob, v)?;
            let defense = DefenseConfig { kind: DefenseKind::Refiner, strength: cfg.ablation.epsilon, clip_norm: cfg.defense.clip_norm, refiner, seed };
            cells.push(Cell { label: format!("refiner_{knob}"), strength: v, defense, seed });
        }
    }
    let records = run_cells(&ws, &cells, seeds);
    write_records(&out.join(format!("ablation_{knob}.csv")), &records)?;
    if cfg.run.plots {
        let psnr: Vec<(f64, f64)> = seed_means(&records, psnr_of).into_iter().map(|(_, s, m)| (s, m)).collect();
        let pmm: Vec<(f64, f64)> = seed_means(&records, |r| r.pmm).into_iter().map(|(_, s, m)| (s, m)).collect();
        write_svg(&out.join(format!("ablation_{knob}_psnr.svg")), &line_chart(&format!("Attack PSNR over {knob}"), knob, "PSNR (dB)", &[Series { name: "psnr".into(), points: psnr }]))?;
        write_svg(&out.join(format!("ablation_{knob}_pmm.svg")), &line_chart(&format!("PMM over {knob}"), knob, "PMM (%)", &[Series { name: "pmm".into(), points: pmm }]))?;
    }
    Ok(records)
}

/// One timing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub defense: String,
    pub knob: String,
    pub value: f64,
    pub median_s: f64,
}

/// Median wall time of `f` over `reps` runs after `warmup` discarded runs.
pub fn median_time(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut t = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64());
    }
    t.sort_by(f64::total_cmp);
    let n = t.len();
    Ok(if n % 2 == 1 { t[n / 2] } else { 0.5 * (t[n / 2 - 1] + t[n / 2]) })
}

/// Ordinary least squares `y ≈ a + b·x`; returns `(a, b, R²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let r2 = if syy > 0.0 && sxx > 0.0 { sxy * sxy / (sxx * syy) } else { f64::NAN };
    (a, b, r2)
}

/// Small CNN whose final dense layer reads `width` features.
pub fn timing_model(image_shape: [usize; 3], num_classes: usize, width: usize, activation: Activation, seed: u64) -> Result<Model> {
    ModelBuilder::new(&image_shape)
        .conv(6, 5, 2, 2, activation)
        .conv(16, 5, 2, 2, activation)
        .dense(width, activation)
        .dense(num_classes, Activation::None)
        .build(seed)
}

/// Per-iteration defense cost over fc widths (Soteria), refinement
/// iterations (Refiner) and every defense at its default strength.
pub fn cmd_timing(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<TimingRow>> {
    ensure_dir(out)?;
    let ws = Workspace::new(cfg.clone(), true)?;
    let t = &cfg.timing;
    let seed = seeds[0];
    let idx: Vec<usize> = (0..t.batch_size.min(ws.train.len())).collect();
    let batch = ws.train.batch(&idx);
    let net = ws.evalnet.as_ref().expect("evaluation network was requested");
    let mut rows = Vec::new();
    let timed = |defense: &DefenseConfig, model: &Model| -> Result<f64> {
        let (_, g) = model.gradient(&batch)?;
        median_time(t.warmup, t.reps, || apply_defense(defense, model, Some(net), &batch, &g, &[0]).map(|_| ()))
    };

    for &width in &t.widths {
        let model = timing_model(ws.train.image_shape(), ws.train.num_classes(), width, cfg.activation()?, seed)?;
        let s = timed(&DefenseConfig::new(DefenseKind::Soteria, 0.4), &model)?;
        log::info!("soteria width {width}: {s:.5}s");
        rows.push(TimingRow { defense: "soteria".into(), knob: "fc_width".into(), value: width as f64, median_s: s });
    }
    let model = ws.model(seed)?;
    for &iota in &t.iotas {
        let mut d = cfg.defense_config("refiner:0.1", seed)?;
        d.refiner.iterations = iota;
        let s = timed(&d, &model)?;
        log::info!("refiner iota {iota}: {s:.5}s");
        rows.push(TimingRow { defense: "refiner".into(), knob: "iota".into(), value: iota as f64, median_s: s });
    }
    for entry in ["dp_gaussian:0.01", "dp_laplace:0.01", "gq:8", "prune:0.4", "prune_grad:0.4", "prune_weight:0.4", "soteria:0.4", "refiner:0.1"] {
        let (kind, strength) = parse_defense(entry)?;
        let s = timed(&cfg.defense_config(entry, seed)?, &model)?;
        rows.push(TimingRow { defense: kind.to_string(), knob: "default".into(), value: strength, median_s: s });
    }
    write_csv(
        &out.join("timing.csv"),
        &["defense", "knob", "value", "median_s"],
        rows.iter().map(|r| [r.defense.clone(), r.knob.clone(), r.value.to_string(), r.median_s.to_string()]),
    )?;
    if cfg.run.plots {
        let pts = |d: &str, k: &str| rows.iter().filter(|r| r.defense == d && r.knob == k).map(|r| (r.value, r.median_s)).collect::<Vec<_>>();
        write_svg(&out.join("timing_soteria.svg"), &line_chart("Soteria time per iteration", "fc input width", "seconds", &[Series { name: "soteria".into(), points: pts("soteria", "fc_width") }]))?;
        write_svg(&out.join("timing_refiner.svg"), &line_chart("Refiner time per iteration", "iterations", "seconds", &[Series { name: "refiner".into(), points: pts("refiner", "iota") }]))?;
    }
    Ok(rows)
}

/// One cell of the pruning-strategy and layer-noise comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRow {
    pub experiment: String,
    pub setting: String,
    pub strength: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
}

/// Trains under each pruning strategy and rate, and with noise on the first
/// or last layer's gradients, reporting held-out accuracy.
pub fn cmd_validate_weights(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<ValidationRow>> {
    ensure_dir(out)?;
    let mut cfg = cfg.clone();
    cfg.model.activation = cfg.validate.activation.clone();
    cfg.model.init_gain = cfg.validate.init_gain;
    cfg.fl.lr = cfg.validate.lr;
    cfg.fl.rounds = cfg.validate.rounds;
    cfg.fl.record_time = false;
    let ws = Workspace::new(cfg.clone(), false)?;
    let last = ws.model(0)?.num_layers();
    let mut cells: Vec<(String, String, DefenseKind, f64)> = vec![("control".into(), "none".into(), DefenseKind::None, 0.0)];
    for &rate in &cfg.validate.rates {
        for s in [PruneStrategy::WeightGradProduct, PruneStrategy::Grad, PruneStrategy::Weight] {
            cells.push(("prune".into(), s.name().into(), DefenseKind::Prune(s), rate));
        }
    }
    for layer in [1, last] {
        cells.push(("layer_noise".into(), format!("layer_{layer}"), DefenseKind::LayerNoise(layer), cfg.validate.noise));
    }
    cells.push(("layer_noise".into(), "layer_1".into(), DefenseKind::LayerNoise(1), 0.0));
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let rows = run_jobs(jobs.len(), cfg.run.workers, |j| {
        let (c, seed) = jobs[j];
        let (exp, setting, kind, strength) = &cells[c];
        log::info!("validate {exp} {setting} {strength} seed {seed}");
        let defense = DefenseConfig { kind: *kind, strength: *strength, seed, ..DefenseConfig::none() };
        let acc = ws.model(seed).and_then(|m| train_accuracy(&ws, m, &cfg.fl_config(defense, seed))).map(|(a, _)| a);
        let accuracy = acc.map_err(|e| log::warn!("{exp} {setting} {strength} seed {seed} failed: {e}")).ok();
        ValidationRow { experiment: exp.clone(), setting: setting.clone(), strength: *strength, seed, accuracy }
    });
    write_csv(
        &out.join("validate_weights.csv"),
        &["experiment", "setting", "strength", "seed", "accuracy"],
        rows.iter().map(|r| [r.experiment.clone(), r.setting.clone(), r.strength.to_string(), r.seed.to_string(), opt(r.accuracy)]),
    )?;
    let summary = validation_means(&rows);
    write_csv(
        &out.join("validate_weights_summary.csv"),
        &["experiment", "setting", "strength", "mean_accuracy"],
        summary.iter().map(|(e, s, k, m)| [e.clone(), s.clone(), k.to_string(), m.to_string()]),
    )?;
    if cfg.run.plots {
        let series: Vec<Series> = [PruneStrategy::WeightGradProduct, PruneStrategy::Grad, PruneStrategy::Weight]
            .iter()
            .map(|s| Series {
                name: s.name().into(),
                points: summary.iter().filter(|(e, n, _, _)| e == "prune" && n == s.name()).map(|(_, _, k, m)| (*k, *m)).collect(),
            })
            .collect();
        write_svg(&out.join("validate_pruning.svg"), &line_chart("Accuracy under gradient pruning", "pruning rate", "held-out accuracy", &series))?;
    }
    Ok(rows)
}

/// Seed-mean accuracy per `(experiment, setting, strength)`.
pub fn validation_means(rows: &[ValidationRow]) -> Vec<(String, String, f64, f64)> {
    let mut out: Vec<(String, String, f64, f64)> = Vec::new();
    for r in rows {
        if out.iter().any(|(e, s, k, _)| *e == r.experiment && *s == r.setting && *k == r.strength) {
            continue;
        }
        let vals: Vec<f64> = rows
            .iter()
            .filter(|q| q.experiment == r.experiment && q.setting == r.setting && q.strength == r.strength)
            .filter_map(|q| q.accuracy)
            .collect();
        out.push((r.experiment.clone(), r.setting.clone(), r.strength, if vals.is_empty() { f64::NAN } else { mean(&vals) }));
    }
    out
}

/// Writes original, robust and reconstructed images of round-0 uploads
/// under the demo defense, plus one metrics row per seed.
pub fn cmd_attack_demo(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<ExperimentRecord>> {
    ensure_dir(out)?;
    let (kind, strength) = parse_defense(&cfg.demo.defense)?;
    let ws = Workspace::new(cfg.clone(), true)?;
    let shape = ws.train.image_shape();
    let per: usize = shape.iter().product();
    let mut records = Vec::new();
    for &seed in seeds {
        let fl = cfg.fl_config(cfg.defense_config(&cfg.demo.defense, seed)?, seed);
        let model = ws.model(seed)?;
        let mut rec = ExperimentRecord::empty(kind.to_string(), strength, &cfg.attack.preset, seed);
        match attack_round_zero(&ws, &model, &fl, seed) {
            Ok((summary, cases)) => {
                for (u, case) in cases.iter().enumerate() {
                    let dump = |name: &str, t: &Tensor| -> Result<()> {
                        for (i, img) in t.to_vec().chunks(per).enumerate() {
                            pnm::write(&out.join(format!("{name}_s{seed}_u{u}_{i}.{}", if shape[0] == 1 { "pgm" } else { "ppm" })), img, shape)?;
                        }
                        Ok(())
                    };
                    dump("original", &case.original)?;
                    dump("reconstructed", &case.reconstruction)?;
                    if let Some(r) = &case.robust {
                        dump("robust", r)?;
                    }
                }
                rec.psnr = Some(summary.psnr);
                rec.ssim = Some(summary.ssim);
                rec.mse = Some(summary.mse);
                rec.evalnet = summary.evalnet;
                let robust_scores: Vec<f64> =
                    cases.iter().filter_map(|c| c.robust.as_ref()).map(|r| ws.evalnet_score(r)).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
                if !robust_scores.is_empty() {
                    log::info!("seed {seed}: mean evaluation score of robust data {:.3}", mean(&robust_scores));
                }
            }
            Err(e) => log::warn!("attack demo seed {seed} failed: {e}"),
        }
        records.push(rec);
    }
    write_records(&out.join("attack_demo.csv"), &records)?;
    Ok(records)
}

/// Quality of a trained evaluation network on held-out images.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalNetQuality {
    /// `(r, mean prediction, mean |prediction − r|)` per grid point.
    pub per_ratio: Vec<(f64, f64, f64)>,
    pub mae: f64,
    /// Share of images whose predictions are nondecreasing along the grid.
    pub monotone_fraction: f64,
    /// Share of images with `D(noise) > 0.8` and `D(image) < 0.2`.
    pub separation_fraction: f64,
}

/// Scores held-out images mixed at `r ∈ {0.1, …, 0.9}`. Each image walks
/// one interpolation path: its noise image is drawn once and reused across
/// the grid.
pub fn evaluate_evalnet(net: &EvalNet, test: &Dataset, seed: u64) -> Result<EvalNetQuality> {
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let [c, h, w] = test.image_shape();
    let per = test.image_len();
    let mut r = rng::rng(seed, &[tag::EVALNET, u64::MAX]);
    let n = test.len();
    let noise: Vec<Vec<f64>> = (0..n).map(|_| uniform_noise(&[per], &mut r).to_vec()).collect();
    let mut preds = vec![vec![0.0; grid.len()]; n];
    for (k, &ratio) in grid.iter().enumerate() {
        let mut xs = Vec::with_capacity(n * per);
        for (i, v) in noise.iter().enumerate() {
            xs.extend(mix(test.image(i), v, ratio));
        }
        let scores = net.scores(&Tensor::new(xs, &[n, c, h, w])?)?;
        for i in 0..n {
            preds[i][k] = scores[i];
        }
    }
    let per_ratio: Vec<(f64, f64, f64)> = grid
        .iter()
        .enumerate()
        .map(|(k, &ratio)| {
            let col: Vec<f64> = preds.iter().map(|p| p[k]).collect();
            (ratio, mean(&col), col.iter().map(|p| (p - ratio).abs()).sum::<f64>() / n as f64)
        })
        .collect();
    let mae = per_ratio.iter().map(|t| t.2).sum::<f64>() / per_ratio.len() as f64;
    let monotone = preds.iter().filter(|p| p.windows(2).all(|w| w[1] >= w[0])).count();
    let clean = net.scores(&test.all().inputs)?;
    let noise = net.scores(&uniform_noise(&[n, c, h, w], &mut r))?;
    let separated = clean.iter().zip(&noise).filter(|(a, b)| **a < 0.2 && **b > 0.8).count();
    Ok(EvalNetQuality { per_ratio, mae, monotone_fraction: monotone as f64 / n as f64, separation_fraction: separated as f64 / n as f64 })
}

/// Trains one evaluation network per seed and reports held-out quality.
pub fn cmd_train_evalnet(cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<Vec<(u64, EvalNetQuality)>> {
    ensure_dir(out)?;
    let (train, test) = cfg.datasets()?;
    let mut losses = Vec::new();
    let mut quality = Vec::new();
    for &seed in seeds {
        let mut ec = cfg.evalnet_config()?;
        ec.seed = seed;
        let trained = train_eval_net(&train, &ec)?;
        checkpoint::save_model(&out.join(format!("evalnet_s{seed}.glab")), trained.net.model())?;
        for (e, l) in trained.epoch_losses.iter().enumerate() {
            losses.push([seed.to_string(), (e + 1).to_string(), l.to_string()]);
        }
        let q = evaluate_evalnet(&trained.net, &test, seed)?;
        log::info!("seed {seed}: MAE {:.4}, monotone {:.3}", q.mae, q.monotone_fraction);
        quality.push((seed, q));
    }
    write_csv(&out.join("evalnet_training.csv"), &["seed", "epoch", "loss"], losses)?;
    write_csv(
        &out.join("evalnet_quality.csv"),
        &["seed", "r", "mean_prediction", "mae"],
        quality.iter().flat_map(|(s, q)| q.per_ratio.iter().map(move |(r, p, m)| [s.to_string(), r.to_string(), p.to_string(), m.to_string()])),
    )?;
    write_csv(
        &out.join("evalnet_summary.csv"),
        &["seed", "mae", "monotone_fraction", "separation_fraction"],
        quality.iter().map(|(s, q)| [s.to_string(), q.mae.to_string(), q.monotone_fraction.to_string(), q.separation_fraction.to_string()]),
    )?;
    if cfg.run.plots {
        let series: Vec<Series> = quality.iter().map(|(s, q)| Series { name: format!("seed {s}"), points: q.per_ratio.iter().map(|t| (t.0, t.1)).collect() }).collect();
        write_svg(&out.join("evalnet_quality.svg"), &line_chart("Predicted vs true noise ratio", "r", "mean D(mix)", &series))?;
    }
    Ok(quality)
}

/// The verbs of the command-line tool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verb {
    Tradeoff,
    Ablation,
    Timing,
    ValidateWeights,
    AttackDemo,
    TrainEvalnet,
}

/// Dispatches `verb` and returns the primary CSV it wrote.
pub fn run_verb(verb: Verb, cfg: &ExperimentConfig, out: &Path, seeds: &[u64]) -> Result<PathBuf> {
    Ok(match verb {
        Verb::Tradeoff => {
            cmd_tradeoff(cfg, out, seeds)?;
            out.join("tradeoff.csv")
        }
        Verb::Ablation => {
            cmd_ablation(cfg, out, seeds)?;
            out.join(format!("ablation_{}.csv", cfg.ablation.knob))
        }
        Verb::Timing => {
            cmd_timing(cfg, out, seeds)?;
            out.join("timing.csv")
        }
        Verb::ValidateWeights => {
            cmd_validate_weights(cfg, out, seeds)?;
            out.join("validate_weights.csv")
        }
        Verb::AttackDemo => {
            cmd_attack_demo(cfg, out, seeds)?;
            out.join("attack_demo.csv")
        }
        Verb::TrainEvalnet => {
            cmd_train_evalnet(cfg, out, seeds)?;
            out.join("evalnet_summary.csv")
        }
    })
}
