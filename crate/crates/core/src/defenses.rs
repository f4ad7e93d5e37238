//! Gradient perturbation defenses and a common dispatch for all of them.

use std::fmt;
use std::str::FromStr;

use glab_autodiff::{grad, GradientVector, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::evalnet::EvalNet;
use crate::model::{Batch, LayerKind, Model};
use crate::refiner::{refine, RefinerConfig};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PruneStrategy {
    /// Smallest `|g|` first.
    Grad,
    /// Smallest `|θ|` first.
    Weight,
    /// Smallest `|g·θ|` first.
    WeightGradProduct,
}

impl PruneStrategy {
    pub fn name(self) -> &'static str {
        match self {
            PruneStrategy::Grad => "grad",
            PruneStrategy::Weight => "weight",
            PruneStrategy::WeightGradProduct => "weight_grad_product",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DefenseKind {
    None,
    Refiner,
    DpGaussian,
    DpLaplace,
    Gq,
    Prune(PruneStrategy),
    Soteria,
    /// Uniform noise on one layer's gradients only (1-based layer index).
    LayerNoise(usize),
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DefenseKind::None => "none",
            DefenseKind::Refiner => "refiner",
            DefenseKind::DpGaussian => "dp_gaussian",
            DefenseKind::DpLaplace => "dp_laplace",
            DefenseKind::Gq => "gq",
            DefenseKind::Prune(PruneStrategy::Grad) => "prune_grad",
            DefenseKind::Prune(PruneStrategy::Weight) => "prune_weight",
            DefenseKind::Prune(PruneStrategy::WeightGradProduct) => "prune",
            DefenseKind::Soteria => "soteria",
            DefenseKind::LayerNoise(i) => return write!(f, "layer_noise:{i}"),
        };
        f.write_str(name)
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => DefenseKind::None,
            "refiner" => DefenseKind::Refiner,
            "dp" | "dp_gaussian" => DefenseKind::DpGaussian,
            "dp_laplace" => DefenseKind::DpLaplace,
            "gq" => DefenseKind::Gq,
            "prune" | "prune_weight_grad_product" => DefenseKind::Prune(PruneStrategy::WeightGradProduct),
            "prune_grad" => DefenseKind::Prune(PruneStrategy::Grad),
            "prune_weight" => DefenseKind::Prune(PruneStrategy::Weight),
            "soteria" => DefenseKind::Soteria,
            other if other.starts_with("layer_noise:") => match other["layer_noise:".len()..].parse() {
                Ok(i) if i >= 1 => DefenseKind::LayerNoise(i),
                _ => return Err(invalid("defense", format!("bad layer in {other:?}"))),
            },
            other => return Err(invalid("defense", format!("unknown kind {other:?}"))),
        })
    }
}

/// A defense and its single strength knob: noise magnitude (DP), bits (GQ),
/// pruning ratio (pruning, Soteria), ε (Refiner) or noise half-width
/// (single-layer noise).
#[derive(Clone, Debug, PartialEq)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub strength: f64,
    /// DP clipping norm.
    pub clip_norm: f64,
    /// Refiner settings; `epsilon` is overridden by `strength`.
    pub refiner: RefinerConfig,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn none() -> Self {
        Self { kind: DefenseKind::None, strength: 0.0, clip_norm: 1.0, refiner: RefinerConfig::default(), seed: 0 }
    }

    pub fn new(kind: DefenseKind, strength: f64) -> Self {
        Self { kind, strength, ..Self::none() }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.strength;
        let ok = match self.kind {
            DefenseKind::None => true,
            DefenseKind::DpGaussian | DefenseKind::DpLaplace => s > 0.0 && s.is_finite() && self.clip_norm > 0.0,
            DefenseKind::Gq => s.fract() == 0.0 && (1.0..=28.0).contains(&s),
            DefenseKind::Prune(_) | DefenseKind::Soteria => s > 0.0 && s < 1.0,
            DefenseKind::Refiner => s > 0.0,
            DefenseKind::LayerNoise(_) => s >= 0.0 && s.is_finite(),
        };
        if !ok {
            return Err(invalid("defense strength", format!("{s} is not legal for {}", self.kind)));
        }
        if self.kind == DefenseKind::Refiner {
            self.refiner.validate()?;
        }
        Ok(())
    }
}

/// Scales `g` so that its global L2 norm is at most `clip_norm`.
pub fn clip_global(g: &GradientVector, clip_norm: f64) -> GradientVector {
    let n = g.norm();
    if n > clip_norm {
        g.scale(clip_norm / n)
    } else {
        g.clone()
    }
}

fn laplace(r: &mut impl Rng, scale: f64) -> f64 {
    // Inverse CDF on u ∈ (-1/2, 1/2).
    let u: f64 = r.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Global L2 clipping followed by i.i.d. Gaussian (std) or Laplace (scale)
/// noise of the given magnitude.
pub fn dp_perturb(g: &GradientVector, kind: DefenseKind, magnitude: f64, clip_norm: f64, r: &mut impl Rng) -> Result<GradientVector> {
    if !(magnitude > 0.0) || !(clip_norm > 0.0) {
        return Err(invalid("dp parameters", format!("magnitude {magnitude}, clip {clip_norm}")));
    }
    let mut out = clip_global(g, clip_norm);
    match kind {
        DefenseKind::DpGaussian => {
            let normal = Normal::new(0.0, magnitude).map_err(|e| invalid("dp magnitude", e.to_string()))?;
            out.layers_mut().iter_mut().flatten().for_each(|v| *v += normal.sample(r));
        }
        DefenseKind::DpLaplace => out.layers_mut().iter_mut().flatten().for_each(|v| *v += laplace(r, magnitude)),
        other => return Err(invalid("dp kind", other.to_string())),
    }
    Ok(out)
}

/// Per-layer symmetric uniform quantization to `2^bits` levels on
/// `[-M, M]`, `M` the layer's max magnitude.
pub fn gq_quantize(g: &GradientVector, bits: u32) -> Result<GradientVector> {
    if !(1..=28).contains(&bits) {
        return Err(invalid("bits", format!("{bits} outside 1..=28")));
    }
    let levels = (1u64 << bits) as f64;
    let layers = g
        .layers()
        .iter()
        .map(|layer| {
            let m = layer.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m == 0.0 {
                return layer.clone();
            }
            let step = 2.0 * m / (levels - 1.0);
            layer.iter().map(|&v| (-m + ((v + m) / step).round() * step).clamp(-m, m)).collect()
        })
        .collect();
    Ok(GradientVector::new(layers))
}

/// Zeroes the `⌊ratio·N⌋` entries with the smallest score, globally across
/// layers; ties go to the lower (layer, index) first.
pub fn prune_gradients(g: &GradientVector, params: &Model, ratio: f64, strategy: PruneStrategy) -> Result<GradientVector> {
    prune_with_theta(g, &params.param_vector(), ratio, strategy)
}

pub fn prune_with_theta(g: &GradientVector, theta: &GradientVector, ratio: f64, strategy: PruneStrategy) -> Result<GradientVector> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid("prune ratio", format!("{ratio} outside (0, 1)")));
    }
    g.check_aligned(theta)?;
    let flat_g = g.flatten();
    let flat_t = theta.flatten();
    let score = |i: usize| match strategy {
        PruneStrategy::Grad => flat_g[i].abs(),
        PruneStrategy::Weight => flat_t[i].abs(),
        PruneStrategy::WeightGradProduct => (flat_g[i] * flat_t[i]).abs(),
    };
    let k = (ratio * flat_g.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..flat_g.len()).collect();
    order.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
    let mut out = flat_g;
    for &i in &order[..k] {
        out[i] = 0.0;
    }
    Ok(GradientVector::from_flat(&out, g)?)
}

/// Per-feature leakage scores for the input of the final dense layer.
///
/// Feature `f` of the representation `r` is isolated, and one backward pass
/// measures `‖∂ Σ_n r_f / ∂x‖ / ‖r_f‖`: how strongly the input drives that
/// feature relative to its magnitude. One pass per feature.
pub fn soteria_scores(model: &Model, batch: &Batch) -> Result<Vec<f64>> {
    let k = model.num_layers();
    if !model.layers()[k - 1].is_dense() {
        return Err(Error::Unsupported("final layer must be dense".into()));
    }
    let params = model.param_tensors(false);
    let x = Tensor::variable(batch.inputs.to_vec(), batch.inputs.shape())?;
    let n = batch.len();
    let features = model.final_fan_in();
    let mut scores = Vec::with_capacity(features);

    // With a dense representation layer each feature is one weight column,
    // so a feature costs one column product plus a backward pass through
    // the earlier layers.
    let rep_dense = k >= 2 && model.layers()[k - 2].kind == LayerKind::Dense;
    if rep_dense {
        let act = model.layers()[k - 2].activation;
        let trunk = model.forward_prefix(&params, &x, k - 2)?;
        let h = trunk.reshape(&[n, trunk.len() / n])?;
        let (w, b) = (&params[2 * (k - 2)], &params[2 * (k - 2) + 1]);
        for f in 0..features {
            let z = h.matmul(&w.narrow(1, f, 1)?)?.add(&b.narrow(0, f, 1)?.broadcast(n, 1, &[n, 1])?)?;
            let rf = act.apply(z);
            scores.push(score_feature(&rf, &x)?);
        }
    } else {
        let rep = model.features_with(&params, &x)?;
        for f in 0..features {
            scores.push(score_feature(&rep.narrow(1, f, 1)?, &x)?);
        }
    }
    Ok(scores)
}

fn score_feature(rf: &Tensor, x: &Tensor) -> Result<f64> {
    let magnitude = rf.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let dx = grad(&rf.sum(), std::slice::from_ref(x), false)?.remove(0);
    let sensitivity = dx.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(sensitivity / (magnitude + 1e-12))
}

/// Prunes the final dense layer's gradient rows of the `⌊ratio·F⌋` most
/// leaky representation features; all other layers are untouched.
pub fn soteria_defense(model: &Model, batch: &Batch, g: &GradientVector, ratio: f64) -> Result<GradientVector> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid("soteria ratio", format!("{ratio} outside (0, 1)")));
    }
    let scores = soteria_scores(model, batch)?;
    let k = (ratio * scores.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let last = model.num_layers() - 1;
    let outs = model.num_outputs();
    let mut out = g.clone();
    let slot = &mut out.layers_mut()[last];
    for &f in &order[..k] {
        slot[f * outs..(f + 1) * outs].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// Adds i.i.d. `U(−magnitude, magnitude)` noise to the gradients of layer
/// `layer` (1-based) and leaves the rest untouched.
pub fn layer_noise(g: &GradientVector, layer: usize, magnitude: f64, r: &mut impl Rng) -> Result<GradientVector> {
    if layer == 0 || layer > g.num_layers() {
        return Err(invalid("noisy layer", format!("{layer} of {}", g.num_layers())));
    }
    let mut out = g.clone();
    if magnitude > 0.0 {
        out.layers_mut()[layer - 1].iter_mut().for_each(|v| *v += r.random_range(-magnitude..magnitude));
    }
    Ok(out)
}

/// What a client sends, plus the robust batch when one was synthesized.
#[derive(Clone, Debug)]
pub struct DefenseOutput {
    pub upload: GradientVector,
    pub robust: Option<Tensor>,
}

/// Applies `cfg` to the true gradient `g` of `batch`. `salt` separates the
/// random streams of different clients and rounds.
pub fn apply_defense(cfg: &DefenseConfig, model: &Model, evalnet: Option<&EvalNet>, batch: &Batch, g: &GradientVector, salt: &[u64]) -> Result<DefenseOutput> {
    cfg.validate()?;
    let seed = rng::derive(cfg.seed, salt);
    let plain = |upload| Ok(DefenseOutput { upload, robust: None });
    match cfg.kind {
        DefenseKind::None => plain(g.clone()),
        DefenseKind::DpGaussian | DefenseKind::DpLaplace => {
            plain(dp_perturb(g, cfg.kind, cfg.strength, cfg.clip_norm, &mut rng::rng(seed, &[tag::DEFENSE]))?)
        }
        DefenseKind::Gq => plain(gq_quantize(g, cfg.strength as u32)?),
        DefenseKind::Prune(s) => plain(prune_gradients(g, model, cfg.strength, s)?),
        DefenseKind::Soteria => plain(soteria_defense(model, batch, g, cfg.strength)?),
        DefenseKind::LayerNoise(layer) => plain(layer_noise(g, layer, cfg.strength, &mut rng::rng(seed, &[tag::DEFENSE]))?),
        DefenseKind::Refiner => {
            let net = evalnet.ok_or_else(|| invalid("refiner", "an evaluation network is required"))?;
            let rc = RefinerConfig { epsilon: cfg.strength, seed, ..cfg.refiner.clone() };
            let res = refine(model, net, batch, Some(g), &rc)?;
            Ok(DefenseOutput { upload: res.uploaded, robust: Some(res.x_star) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bit_is_sign_times_max() {
        let g = GradientVector::new(vec![vec![0.3, -0.2]]);
        let q = gq_quantize(&g, 1).unwrap();
        assert_eq!(q.layers()[0], vec![0.3, -0.3]);
    }

    #[test]
    fn zero_layer_is_unchanged() {
        let g = GradientVector::new(vec![vec![0.0, 0.0], vec![1.0]]);
        assert_eq!(gq_quantize(&g, 4).unwrap().layers()[0], vec![0.0, 0.0]);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            DefenseKind::None,
            DefenseKind::Refiner,
            DefenseKind::DpGaussian,
            DefenseKind::DpLaplace,
            DefenseKind::Gq,
            DefenseKind::Prune(PruneStrategy::Grad),
            DefenseKind::Prune(PruneStrategy::Weight),
            DefenseKind::Prune(PruneStrategy::WeightGradProduct),
            DefenseKind::Soteria,
            DefenseKind::LayerNoise(3),
        ] {
            assert_eq!(k.to_string().parse::<DefenseKind>().unwrap(), k);
        }
    }
}
