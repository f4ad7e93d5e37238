//! The evaluation network: a regressor trained to predict how much uniform
//! noise has been blended into an image. Its output on robust data is the
//! privacy score.

use glab_autodiff::{grad, no_grad, Adam, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::{Activation, Model, ModelBuilder};
use crate::rng::{self, tag};

/// How mixing ratios are drawn during training.
#[derive(Clone, Debug, PartialEq)]
pub enum MixSampling {
    /// Every image is mixed once per grid point.
    Grid(Vec<f64>),
    /// Every image is mixed `draws` times with `r ~ U(0, 1)`.
    Uniform { draws: usize },
}

impl MixSampling {
    /// `{0, 0.1, ..., 1}`.
    pub fn default_grid() -> Self {
        MixSampling::Grid((0..=10).map(|i| i as f64 / 10.0).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalNetConfig {
    pub channels: [usize; 3],
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mixing: MixSampling,
    pub seed: u64,
}

impl Default for EvalNetConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64], lr: 1e-3, batch_size: 128, epochs: 20, mixing: MixSampling::default_grid(), seed: 0 }
    }
}

/// `(1 − r)·image + r·noise` with target `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPair {
    pub image: Vec<f64>,
    pub r: f64,
}

pub fn mix(image: &[f64], noise: &[f64], r: f64) -> Vec<f64> {
    image.iter().zip(noise).map(|(a, b)| ((1.0 - r) * a + r * b).clamp(0.0, 1.0)).collect()
}

/// One pair per (image, r) with fresh uniform noise for each.
pub fn gen_mix_pairs(images: &[f64], image_len: usize, r_grid: &[f64], seed: u64) -> Result<Vec<MixPair>> {
    gen_mix_pairs_with(images, image_len, r_grid, &mut rng::rng(seed, &[tag::NOISE]))
}

fn gen_mix_pairs_with(images: &[f64], image_len: usize, r_grid: &[f64], r: &mut impl Rng) -> Result<Vec<MixPair>> {
    if let Some(bad) = r_grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid("mixing ratio", format!("{bad} is outside [0, 1]")));
    }
    if image_len == 0 || images.len() % image_len != 0 {
        return Err(invalid("images", format!("{} values do not split into images of {image_len}", images.len())));
    }
    let mut out = Vec::with_capacity(images.len() / image_len * r_grid.len());
    for img in images.chunks(image_len) {
        for &ratio in r_grid {
            let noise: Vec<f64> = (0..image_len).map(|_| r.random::<f64>()).collect();
            out.push(MixPair { image: mix(img, &noise, ratio), r: ratio });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalNet {
    model: Model,
}

/// Training outcome: the network and mean loss per epoch.
#[derive(Clone, Debug)]
pub struct EvalNetTraining {
    pub net: EvalNet,
    pub epoch_losses: Vec<f64>,
}

impl EvalNet {
    /// Three 3×3 stride-2 ReLU convolutions, then a dense sigmoid unit.
    pub fn build(image_shape: [usize; 3], channels: [usize; 3], seed: u64) -> Result<Self> {
        let model = ModelBuilder::new(&image_shape)
            .conv(channels[0], 3, 2, 1, Activation::Relu)
            .conv(channels[1], 3, 2, 1, Activation::Relu)
            .conv(channels[2], 3, 2, 1, Activation::Relu)
            .dense(1, Activation::Sigmoid)
            .build(rng::derive(seed, &[tag::EVALNET]))?;
        Ok(Self { model })
    }

    pub fn from_model(model: Model) -> Result<Self> {
        let last = model.layers().last().expect("non-empty");
        if model.num_outputs() != 1 || last.activation != Activation::Sigmoid {
            return Err(invalid("evaluation network", "final layer must be a single sigmoid unit"));
        }
        Ok(Self { model })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn image_shape(&self) -> &[usize] {
        self.model.input_shape()
    }

    /// `D(x)` per image as an `(n, 1)` tensor; differentiable in `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.model.forward(x)
    }

    /// Per-image noise scores.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let out = no_grad(|| self.forward(x))?;
        Ok(out.to_vec())
    }

    /// Mean noise score over a batch; in `[0, 1]`.
    pub fn pm_score(&self, x: &Tensor) -> Result<f64> {
        let s = self.scores(x)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }
}

/// Trains `D` to regress the mixing ratio with a squared-error loss.
pub fn train_eval_net(dataset: &Dataset, cfg: &EvalNetConfig) -> Result<EvalNetTraining> {
    if dataset.is_empty() {
        return Err(invalid("dataset", "evaluation network needs at least one image"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(invalid("evaluation network config", format!("{cfg:?}")));
    }
    let shape = dataset.image_shape();
    let mut net = EvalNet::build(shape, cfg.channels, cfg.seed)?;
    let mut theta = net.model.param_vector().flatten();
    let mut adam = Adam::new(cfg.lr);
    let plen = dataset.image_len();
    let [c, h, w] = shape;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::rng(cfg.seed, &[tag::EVALNET, epoch as u64]);
        let grid: Vec<f64> = match &cfg.mixing {
            MixSampling::Grid(g) => g.clone(),
            MixSampling::Uniform { draws } => (0..*draws).map(|_| r.random::<f64>()).collect(),
        };
        let mut pairs = gen_mix_pairs_with(dataset.images(), plen, &grid, &mut r)?;
        pairs.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in pairs.chunks(cfg.batch_size) {
            let xs: Vec<f64> = chunk.iter().flat_map(|p| p.image.iter().copied()).collect();
            let x = Tensor::new(xs, &[chunk.len(), c, h, w])?;
            let target = Tensor::new(chunk.iter().map(|p| p.r).collect(), &[chunk.len(), 1])?;
            let params = net.model.param_tensors(true);
            let loss = net.model.forward_with(&params, &x)?.mse(&target)?;
            let lv = loss.item()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("evaluation network loss {lv} at epoch {epoch} (seed {})", cfg.seed)));
            }
            let g: Vec<f64> = grad(&loss, &params, false)?.iter().flat_map(|t| t.to_vec()).collect();
            adam.step(&mut theta, &g)?;
            net.model.set_param_vector(&glab_autodiff::GradientVector::from_flat(&theta, &net.model.param_vector())?)?;
            total += lv * chunk.len() as f64;
        }
        let mean = total / pairs.len() as f64;
        log::info!("evaluation network epoch {}: loss {mean:.5}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(EvalNetTraining { net, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_endpoints_and_midpoint() {
        let img = vec![0.2; 4];
        let noise = vec![0.8; 4];
        assert_eq!(mix(&img, &noise, 0.0), img);
        assert_eq!(mix(&img, &noise, 1.0), noise);
        assert!(mix(&img, &noise, 0.5).iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn ratio_outside_unit_interval_is_rejected() {
        assert!(gen_mix_pairs(&[0.5; 4], 4, &[1.5], 0).is_err());
    }
}
