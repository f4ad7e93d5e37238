//! Robust-data synthesis.
//!
//! A client replaces its batch `x` with a synthesized batch `x*` that keeps
//! the important gradient coordinates close to the real ones (utility)
//! while looking like noise to the evaluation network (privacy), then
//! uploads the gradient of `x*` projected into an ε-ball around the real
//! gradient.

use glab_autodiff::{grad, GradientVector, Tensor};
use rand::Rng;

use crate::data::uniform_noise;
use crate::error::{invalid, Error, Result};
use crate::evalnet::EvalNet;
use crate::model::{Batch, Model};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerConfig {
    /// Share of uniform noise in the starting point.
    pub alpha: f64,
    /// Weight of the privacy term.
    pub beta: f64,
    /// Per-layer decay of the utility weights.
    pub tau: f64,
    pub iterations: usize,
    /// Radius of the upload ball around the true gradient.
    pub epsilon: f64,
    pub step_size: f64,
    /// Divide UM by `Σ‖w ⊙ g‖²` inside the objective so that it is
    /// dimensionless and comparable with the privacy score.
    pub relative_um: bool,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 1.0, tau: 0.95, iterations: 10, epsilon: 0.1, step_size: 1.0, relative_um: false, seed: 0 }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(invalid("refiner config", msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.step_size > 0.0) {
            return bad(format!("beta {} / step size {}", self.beta, self.step_size));
        }
        Ok(())
    }
}

/// `|g ⊙ θ|` elementwise.
pub fn element_weight(grads: &GradientVector, params: &Model) -> Result<GradientVector> {
    let theta = params.param_vector();
    grads.check_aligned(&theta)?;
    Ok(GradientVector::new(
        grads.layers().iter().zip(theta.layers()).map(|(g, t)| g.iter().zip(t).map(|(a, b)| (a * b).abs()).collect()).collect(),
    ))
}

/// `τ^i` for the 1-based layer index `i`.
pub fn layer_weight(tau: f64, i: usize) -> f64 {
    tau.powi(i as i32)
}

/// Element weight times layer weight.
pub fn ultimate_weights(grads: &GradientVector, params: &Model, tau: f64) -> Result<GradientVector> {
    let mut w = element_weight(grads, params)?;
    for (i, layer) in w.layers_mut().iter_mut().enumerate() {
        let lw = layer_weight(tau, i + 1);
        layer.iter_mut().for_each(|v| *v *= lw);
    }
    Ok(w)
}

/// `Σ_i ‖w_i ⊙ (∇_{θ_i} L − g_i)‖²` from differentiable parameter
/// gradients in `[dw1, db1, ...]` order.
pub fn weighted_distance(model: &Model, grads: &[Tensor], target: &GradientVector, weights: &GradientVector) -> Result<Tensor> {
    target.check_aligned(weights)?;
    if grads.len() != 2 * target.num_layers() {
        return Err(invalid("gradients", format!("{} tensors for {} layers", grads.len(), target.num_layers())));
    }
    let mut acc = Tensor::scalar(0.0);
    for (i, pair) in grads.chunks(2).enumerate() {
        let (tw, tb) = model.split_slot(target, i);
        let (ww, wb) = model.split_slot(weights, i);
        for (g, t, w) in [(&pair[0], tw, ww), (&pair[1], tb, wb)] {
            let t = Tensor::new(t.to_vec(), g.shape())?;
            let w = Tensor::new(w.to_vec(), g.shape())?;
            acc = acc.add(&g.sub(&t)?.mul(&w)?.square().sum())?;
        }
    }
    Ok(acc)
}

/// Utility metric as a differentiable function of `x_star`.
pub fn utility_metric(model: &Model, x_star: &Tensor, labels: &[usize], target: &GradientVector, weights: &GradientVector) -> Result<Tensor> {
    let params = model.param_tensors(true);
    let loss = model.loss_with(&params, x_star, labels)?;
    let grads = grad(&loss, &params, true)?;
    weighted_distance(model, &grads, target, weights)
}

/// `(1 − α)·x + α·v` with `v ~ U[0, 1]`.
pub fn noise_blend_init(x: &Tensor, alpha: f64, r: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("alpha", format!("{alpha} outside [0, 1]")));
    }
    let v = uniform_noise(x.shape(), r);
    let data = x.data().iter().zip(v.data()).map(|(a, b)| ((1.0 - alpha) * a + alpha * b).clamp(0.0, 1.0)).collect();
    Ok(Tensor::new(data, x.shape())?)
}

/// Closest point to `g_star` in the Euclidean ball of radius `epsilon`
/// around `g`.
pub fn project_gradients(g_star: &GradientVector, g: &GradientVector, epsilon: f64) -> Result<GradientVector> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", format!("{epsilon} must be positive")));
    }
    let diff = g_star.sub(g)?;
    let dist = diff.norm();
    if dist <= epsilon {
        return Ok(g_star.clone());
    }
    Ok(g.add(&diff.scale(epsilon / dist))?)
}

/// `Q'(1)` for `Q(u) = L(F_{uθ}(x), y)`, i.e. `∇_θ L · θ`.
pub fn q_function_derivative(model: &Model, batch: &Batch) -> Result<f64> {
    let (_, g) = model.gradient(batch)?;
    Ok(g.dot(&model.param_vector())?)
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub x_star: Tensor,
    /// `∇_θ L(F_θ(x*), y)`.
    pub g_star: GradientVector,
    pub uploaded: GradientVector,
    /// Objective `UM − β·PM` (UM possibly rescaled) at the start and after each accepted step.
    pub objective_trace: Vec<f64>,
    pub um_trace: Vec<f64>,
    pub pm_trace: Vec<f64>,
    /// Refinement hit a non-finite objective and fell back to the
    /// initialization.
    pub fell_back: bool,
}

struct Eval {
    objective: f64,
    um: f64,
    pm: f64,
    dx: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(model: &Model, evalnet: &EvalNet, x: &[f64], shape: &[usize], labels: &[usize], target: &GradientVector, weights: &GradientVector, um_scale: f64, beta: f64) -> Result<Eval> {
    let xt = Tensor::variable(x.to_vec(), shape)?;
    let um = utility_metric(model, &xt, labels, target, weights)?;
    let pm = evalnet.forward(&xt)?.mean();
    let objective = um.scale(um_scale).sub(&pm.scale(beta))?;
    let dx = grad(&objective, std::slice::from_ref(&xt), false)?.remove(0).to_vec();
    Ok(Eval { objective: objective.item()?, um: um.item()?, pm: pm.item()?, dx })
}

/// Synthesizes robust data for `batch` and returns the gradient to upload.
///
/// `true_grad` is the gradient of the real batch; it is recomputed when
/// absent.
pub fn refine(model: &Model, evalnet: &EvalNet, batch: &Batch, true_grad: Option<&GradientVector>, cfg: &RefinerConfig) -> Result<RefineResult> {
    cfg.validate()?;
    let g = match true_grad {
        Some(g) => g.clone(),
        None => model.gradient(batch)?.1,
    };
    let weights = ultimate_weights(&g, model, cfg.tau)?;
    let um_scale = if cfg.relative_um {
        let norm: f64 = g.iter().zip(weights.iter()).map(|(a, w)| (a * w) * (a * w)).sum();
        if norm > 0.0 { 1.0 / norm } else { 1.0 }
    } else {
        1.0
    };
    let shape = batch.inputs.shape().to_vec();
    let mut r = rng::rng(cfg.seed, &[tag::DEFENSE]);
    let init = noise_blend_init(&batch.inputs, cfg.alpha, &mut r)?;

    let mut x = init.to_vec();
    let mut objective_trace = Vec::with_capacity(cfg.iterations + 1);
    let mut um_trace = Vec::with_capacity(cfg.iterations + 1);
    let mut pm_trace = Vec::with_capacity(cfg.iterations + 1);
    let mut fell_back = false;
    let eval = |x: &[f64]| evaluate(model, evalnet, x, &shape, &batch.labels, &g, &weights, um_scale, cfg.beta);

    match eval(&x) {
        Ok(e) if e.objective.is_finite() => {
            let mut cur = e;
            objective_trace.push(cur.objective);
            um_trace.push(cur.um);
            pm_trace.push(cur.pm);
            'outer: for it in 0..cfg.iterations {
                let mut step = cfg.step_size;
                for _attempt in 0..=5 {
                    let cand: Vec<f64> = x.iter().zip(&cur.dx).map(|(v, d)| (v - step * d).clamp(0.0, 1.0)).collect();
                    match eval(&cand) {
                        Ok(next) if next.objective.is_finite() && next.dx.iter().all(|v| v.is_finite()) => {
                            x = cand;
                            cur = next;
                            objective_trace.push(cur.objective);
                            um_trace.push(cur.um);
                            pm_trace.push(cur.pm);
                            continue 'outer;
                        }
                        _ => step *= 0.5,
                    }
                }
                log::warn!("refinement objective non-finite at iteration {it}; keeping the initialization");
                fell_back = true;
                break;
            }
        }
        _ => {
            log::warn!("refinement objective non-finite at the initialization");
            fell_back = true;
        }
    }
    if fell_back {
        x = init.to_vec();
    }
    let x_star = Tensor::new(x, &shape)?;
    let (_, g_star) = model.gradient(&Batch { inputs: x_star.clone(), labels: batch.labels.clone() })?;
    if !g_star.is_finite() {
        return Err(Error::NonFinite("gradient of the refined batch".into()));
    }
    let uploaded = project_gradients(&g_star, &g, cfg.epsilon)?;
    Ok(RefineResult { x_star, g_star, uploaded, objective_trace, um_trace, pm_trace, fell_back })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_scales_onto_sphere() {
        let g = GradientVector::new(vec![vec![0.0, 0.0]]);
        let gs = GradientVector::new(vec![vec![3.0, 4.0]]);
        let p = project_gradients(&gs, &g, 1.0).unwrap();
        assert!((p.layers()[0][0] - 0.6).abs() < 1e-15 && (p.layers()[0][1] - 0.8).abs() < 1e-15);
        assert_eq!(project_gradients(&g, &g, 0.5).unwrap(), g);
    }

    #[test]
    fn layer_weight_values() {
        assert_eq!(layer_weight(1.0, 7), 1.0);
        assert!((layer_weight(0.95, 2) - 0.9025).abs() < 1e-15);
    }
}
