//! Gradient-matching reconstruction attacks.
//!
//! The attacker sees only the model snapshot and an uploaded
//! [`GradientVector`]; nothing here can reach a client's batch.

use std::fmt;
use std::str::FromStr;

use glab_autodiff::{grad, GradientVector, Optimizer, OptimizerKind, Tensor};
use rand_distr::{Distribution, Normal};

use crate::data::uniform_noise;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLoss {
    /// `Σ ‖∇ − g‖²`.
    Euclidean,
    /// `1 − ⟨∇, g⟩ / (‖∇‖ ‖g‖)` over all parameters.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub name: String,
    pub loss: MatchLoss,
    pub tv_weight: f64,
    pub l2_weight: f64,
    /// Batch-norm statistics prior. Desk models have no batch norm, so
    /// this term contributes nothing.
    pub bn_weight: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub infer_labels: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Euclidean matching with L-BFGS.
    pub fn igla() -> Self {
        Self {
            name: "igla".into(),
            loss: MatchLoss::Euclidean,
            tv_weight: 0.0,
            l2_weight: 0.0,
            bn_weight: 0.0,
            optimizer: OptimizerKind::Lbfgs,
            lr: 1.0,
            iterations: 300,
            restarts: 1,
            infer_labels: true,
            seed: 0,
        }
    }

    /// Cosine matching with Adam and a total-variation prior.
    pub fn inverting_grad() -> Self {
        Self {
            name: "inverting_grad".into(),
            loss: MatchLoss::Cosine,
            tv_weight: 1e-4,
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            iterations: 4000,
            ..Self::igla()
        }
    }

    /// Euclidean matching with Adam, total-variation and L2 priors.
    pub fn grad_inversion() -> Self {
        Self {
            name: "grad_inversion".into(),
            loss: MatchLoss::Euclidean,
            tv_weight: 1e-4,
            l2_weight: 1e-6,
            bn_weight: 0.0,
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            iterations: 4000,
            ..Self::igla()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "igla" => Ok(Self::igla()),
            "inverting_grad" => Ok(Self::inverting_grad()),
            "grad_inversion" => Ok(Self::grad_inversion()),
            other => Err(invalid("attack preset", format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.tv_weight, self.l2_weight, self.bn_weight];
        if self.iterations == 0 || self.restarts == 0 || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !(self.lr > 0.0) {
            return Err(invalid("attack config", format!("{self:?}")));
        }
        Ok(())
    }
}

impl fmt::Display for MatchLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchLoss::Euclidean => "euclidean",
            MatchLoss::Cosine => "cosine",
        })
    }
}

impl FromStr for MatchLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(MatchLoss::Euclidean),
            "cosine" => Ok(MatchLoss::Cosine),
            other => Err(invalid("matching loss", other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelInference {
    pub labels: Vec<usize>,
    /// No negative bias-gradient entry was found; labels must be optimized.
    pub fallback: bool,
}

/// Reads labels off the sign pattern of the final dense layer's bias
/// gradient: the `batch_size` most negative entries, ascending by value.
pub fn infer_labels(model: &Model, uploaded: &GradientVector, batch_size: usize) -> Result<LabelInference> {
    let last = model.num_layers() - 1;
    if !model.layers()[last].is_dense() {
        return Err(Error::Unsupported("label inference needs a dense final layer".into()));
    }
    model.param_vector().check_aligned(uploaded)?;
    let (_, bias) = model.split_slot(uploaded, last);
    let mut neg: Vec<usize> = (0..bias.len()).filter(|&i| bias[i] < 0.0).collect();
    if neg.is_empty() || batch_size == 0 {
        return Ok(LabelInference { labels: Vec::new(), fallback: true });
    }
    neg.sort_by(|&a, &b| bias[a].total_cmp(&bias[b]).then(a.cmp(&b)));
    let labels = (0..batch_size).map(|i| neg[i % neg.len()]).collect();
    Ok(LabelInference { labels, fallback: false })
}

const TV_EPS: f64 = 1e-8;

fn smooth_abs(d: &Tensor) -> Tensor {
    d.square().add_scalar(TV_EPS * TV_EPS).sqrt().add_scalar(-TV_EPS)
}

/// Anisotropic total variation of an `(n, c, h, w)` tensor with
/// `sqrt(d² + ε²) − ε` as the absolute value.
pub fn tv_penalty(x: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = x.shape()[..] else {
        return Err(invalid("tv input", format!("expected (n, c, h, w), got {:?}", x.shape())));
    };
    let mut acc = Tensor::scalar(0.0);
    if h > 1 {
        let d = x.narrow(2, 1, h - 1)?.sub(&x.narrow(2, 0, h - 1)?)?;
        acc = acc.add(&smooth_abs(&d).sum())?;
    }
    if w > 1 {
        let d = x.narrow(3, 1, w - 1)?.sub(&x.narrow(3, 0, w - 1)?)?;
        acc = acc.add(&smooth_abs(&d).sum())?;
    }
    Ok(acc)
}

/// Distance between differentiable gradients `[dw1, db1, ...]` and the
/// uploaded vector.
pub fn matching_loss(kind: MatchLoss, model: &Model, grads: &[Tensor], target: &GradientVector) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(grads.len());
    for (i, pair) in grads.chunks(2).enumerate() {
        let (tw, tb) = model.split_slot(target, i);
        parts.push((&pair[0], Tensor::new(tw.to_vec(), pair[0].shape())?));
        parts.push((&pair[1], Tensor::new(tb.to_vec(), pair[1].shape())?));
    }
    let mut acc = Tensor::scalar(0.0);
    match kind {
        MatchLoss::Euclidean => {
            for (g, t) in parts {
                acc = acc.add(&g.sub(&t)?.square().sum())?;
            }
            Ok(acc)
        }
        MatchLoss::Cosine => {
            let mut gg = Tensor::scalar(0.0);
            let mut tt = 0.0;
            for (g, t) in &parts {
                acc = acc.add(&g.dot(t)?)?;
                gg = gg.add(&g.square().sum())?;
                tt += t.data().iter().map(|v| v * v).sum::<f64>();
            }
            let denom = gg.sqrt().scale(tt.sqrt()).add_scalar(1e-30);
            Ok(acc.div(&denom)?.neg().add_scalar(1.0))
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub x_hat: Tensor,
    pub labels: Vec<usize>,
    /// Labels came from joint optimization rather than inference.
    pub label_fallback: bool,
    /// Lowest objective reached by the selected restart.
    pub loss: f64,
    /// Best objective of each restart; `NaN` for discarded restarts.
    pub restart_losses: Vec<f64>,
    /// Objective per iteration of the selected restart.
    pub trace: Vec<f64>,
}

struct Restart {
    x: Vec<f64>,
    labels: Vec<usize>,
    best: f64,
    trace: Vec<f64>,
}

fn argmax_rows(v: &[f64], cols: usize) -> Vec<usize> {
    v.chunks(cols)
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0)
        .collect()
}

/// Runs one optimization from `x0`. With `labels = None` the labels are
/// optimized jointly as softmax-relaxed logits.
fn run_restart(model: &Model, uploaded: &GradientVector, cfg: &AttackConfig, x0: Vec<f64>, shape: &[usize], labels: Option<&[usize]>, restart: u64) -> Result<Restart> {
    let params = model.param_tensors(true);
    let n = shape[0];
    let classes = model.num_outputs();
    let nx = x0.len();
    let mut p = x0;
    if labels.is_none() {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut r = rng::rng(cfg.seed, &[tag::ATTACK, restart, 1]);
        p.extend((0..n * classes).map(|_| normal.sample(&mut r)));
    }

    let mut eval = |p: &[f64]| -> glab_autodiff::Result<(f64, Vec<f64>)> {
        let x = Tensor::variable(p[..nx].to_vec(), shape)?;
        let (loss, z) = match labels {
            Some(y) => (model.loss_with(&params, &x, y).map_err(to_ad)?, None),
            None => {
                let z = Tensor::variable(p[nx..].to_vec(), &[n, classes])?;
                let logp = model.forward_with(&params, &x).map_err(to_ad)?.softmax()?.add_scalar(1e-12).ln();
                let loss = z.softmax()?.mul(&logp)?.sum().scale(-1.0 / n as f64);
                (loss, Some(z))
            }
        };
        let grads = grad(&loss, &params, true)?;
        let mut obj = matching_loss(cfg.loss, model, &grads, uploaded).map_err(to_ad)?;
        if cfg.tv_weight > 0.0 {
            obj = obj.add(&tv_penalty(&x).map_err(to_ad)?.scale(cfg.tv_weight))?;
        }
        if cfg.l2_weight > 0.0 {
            obj = obj.add(&x.square().sum().scale(cfg.l2_weight))?;
        }
        let mut wrt = vec![x];
        wrt.extend(z);
        let g: Vec<f64> = grad(&obj, &wrt, false)?.iter().flat_map(|t| t.to_vec()).collect();
        Ok((obj.item()?, g))
    };
    let project = |p: &mut [f64]| p[..nx].iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let (mut value, mut g) = eval(&p).map_err(Error::from)?;
    let mut best = (value, p.clone());
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("matching loss {value}")));
        }
        trace.push(value);
        if value < best.0 {
            best = (value, p.clone());
        }
        if g.iter().all(|v| *v == 0.0) {
            break;
        }
        match opt.step(&mut p, value, &g, &mut eval, &project) {
            Ok(Some(next)) => (value, g) = next,
            Ok(None) => (value, g) = eval(&p)?,
            Err(glab_autodiff::AutodiffError::LineSearch(_)) => break,
            Err(e) => return Err(e.into()),
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("matching loss {value}")));
    }
    trace.push(value);
    if value < best.0 {
        best = (value, p.clone());
    }
    let labels = match labels {
        Some(y) => y.to_vec(),
        None => argmax_rows(&best.1[nx..], classes),
    };
    Ok(Restart { x: best.1[..nx].to_vec(), labels, best: best.0, trace })
}

fn to_ad(e: Error) -> glab_autodiff::AutodiffError {
    match e {
        Error::Autodiff(a) => a,
        other => glab_autodiff::AutodiffError::Invalid(other.to_string()),
    }
}

/// Reconstructs a batch of shape `image_shape = (n, c, h, w)` from uploaded
/// gradients, starting each restart from fresh uniform noise.
pub fn gradient_match_attack(model: &Model, uploaded: &GradientVector, cfg: &AttackConfig, image_shape: [usize; 4]) -> Result<ReconstructionResult> {
    attack_impl(model, uploaded, cfg, image_shape, None)
}

/// Like [`gradient_match_attack`] but every restart starts at `init`.
pub fn gradient_match_attack_from(model: &Model, uploaded: &GradientVector, cfg: &AttackConfig, init: &Tensor) -> Result<ReconstructionResult> {
    let [n, c, h, w] = init.shape()[..] else {
        return Err(invalid("attack init", format!("expected (n, c, h, w), got {:?}", init.shape())));
    };
    attack_impl(model, uploaded, cfg, [n, c, h, w], Some(init))
}

fn attack_impl(model: &Model, uploaded: &GradientVector, cfg: &AttackConfig, image_shape: [usize; 4], init: Option<&Tensor>) -> Result<ReconstructionResult> {
    cfg.validate()?;
    if image_shape[1..] != model.input_shape()[..] {
        return Err(invalid("attack shape", format!("{image_shape:?} does not fit model input {:?}", model.input_shape())));
    }
    let inferred = if cfg.infer_labels {
        infer_labels(model, uploaded, image_shape[0])?
    } else {
        LabelInference { labels: Vec::new(), fallback: true }
    };
    let fixed = (!inferred.fallback).then_some(inferred.labels.as_slice());

    let mut best: Option<Restart> = None;
    let mut restart_losses = Vec::with_capacity(cfg.restarts);
    let mut failures = Vec::new();
    for k in 0..cfg.restarts {
        let x0 = match init {
            Some(t) => t.to_vec(),
            None => uniform_noise(&image_shape, &mut rng::rng(cfg.seed, &[tag::ATTACK, k as u64])).to_vec(),
        };
        match run_restart(model, uploaded, cfg, x0, &image_shape, fixed, k as u64) {
            Ok(r) => {
                restart_losses.push(r.best);
                if best.as_ref().is_none_or(|b| r.best < b.best) {
                    best = Some(r);
                }
            }
            Err(e) => {
                log::warn!("attack restart {k} discarded: {e}");
                restart_losses.push(f64::NAN);
                failures.push(e.to_string());
            }
        }
    }
    let best = best.ok_or_else(|| Error::Attack(format!("all {} restarts failed: {}", cfg.restarts, failures.join("; "))))?;
    Ok(ReconstructionResult {
        x_hat: Tensor::new(best.x, &image_shape)?,
        labels: best.labels,
        label_fallback: inferred.fallback,
        loss: best.best,
        restart_losses,
        trace: best.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_of_two_pixel_step() {
        let x = Tensor::new(vec![0.0, 1.0], &[1, 1, 1, 2]).unwrap();
        assert!((tv_penalty(&x).unwrap().item().unwrap() - 1.0).abs() < 1e-7);
        let c = Tensor::full(&[1, 3, 4, 4], 0.3);
        assert_eq!(tv_penalty(&c).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn presets_match_their_names() {
        for name in ["igla", "inverting_grad", "grad_inversion"] {
            assert_eq!(AttackConfig::preset(name).unwrap().name, name);
        }
        assert!(AttackConfig::preset("gga").is_err());
    }
}
