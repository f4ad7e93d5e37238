//! Layered models with an explicit, stable layer order.
//!
//! Layer `i` (1-based) owns one weight tensor and one bias tensor. Its slot
//! in a [`GradientVector`] is the weight values followed by the bias values.

use glab_autodiff::{grad, no_grad, GradientVector, Tensor};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, t: Tensor) -> Tensor {
        match self {
            Activation::None => t,
            Activation::Relu => t.relu(),
            Activation::Sigmoid => t.sigmoid(),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Activation::None),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Weight shape `(in, out)`, bias `(out)`. Inputs are flattened per sample.
    Dense,
    /// Weight shape `(out_ch, in_ch, kh, kw)`, bias `(out_ch)`.
    Conv2d { stride: usize, pad: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub weight_shape: Vec<usize>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn numel(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_dense(&self) -> bool {
        self.kind == LayerKind::Dense
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        let shape_err = |msg: String| Error::Shape { layer: index, msg };
        match self.kind {
            LayerKind::Dense => {
                let [fan_in, out] = self.weight_shape[..] else {
                    return Err(shape_err(format!("dense weight must be 2-D, got {:?}", self.weight_shape)));
                };
                let n: usize = input.iter().product();
                if n != fan_in {
                    return Err(shape_err(format!("dense layer expects {fan_in} inputs, got {input:?}")));
                }
                Ok(vec![out])
            }
            LayerKind::Conv2d { stride, pad } => {
                let [o, c, kh, kw] = self.weight_shape[..] else {
                    return Err(shape_err(format!("conv weight must be 4-D, got {:?}", self.weight_shape)));
                };
                let [ic, h, w] = input[..] else {
                    return Err(shape_err(format!("conv layer expects (c, h, w) input, got {input:?}")));
                };
                if ic != c {
                    return Err(shape_err(format!("conv layer expects {c} channels, got {ic}")));
                }
                if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
                    return Err(shape_err(format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{w}")));
                }
                Ok(vec![o, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1])
            }
        }
    }

    fn forward(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let h = match self.kind {
            LayerKind::Dense => {
                let flat = if x.shape().len() == 2 { x.clone() } else { x.reshape(&[n, x.len() / n])? };
                let h = flat.matmul(w)?;
                h.add(&b.broadcast(n, 1, h.shape())?)?
            }
            LayerKind::Conv2d { stride, pad } => {
                let h = x.conv2d(w, stride, pad)?;
                let spatial = h.shape()[2] * h.shape()[3];
                h.add(&b.broadcast(n, spatial, h.shape())?)?
            }
        };
        Ok(self.activation.apply(h))
    }
}

/// A batch of images in `[0, 1]` with class labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) || labels.is_empty() {
            return Err(invalid("batch", format!("{} labels for inputs of shape {:?}", labels.len(), inputs.shape())));
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("batch", "pixel values must lie in [0, 1]"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Model {
    /// Validates shape compatibility and finiteness.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("model", "at least one layer is required"));
        }
        let mut shape = input_shape.clone();
        for (i, l) in layers.iter().enumerate() {
            let idx = i + 1;
            if l.weight.len() != l.weight_shape.iter().product::<usize>() {
                return Err(Error::Shape { layer: idx, msg: "weight length does not match its shape".into() });
            }
            let out_ch = match l.kind {
                LayerKind::Dense => l.weight_shape.get(1).copied(),
                LayerKind::Conv2d { .. } => l.weight_shape.first().copied(),
            };
            if out_ch != Some(l.bias.len()) {
                return Err(Error::Shape { layer: idx, msg: format!("bias length {} does not match outputs", l.bias.len()) });
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {idx}")));
            }
            shape = l.output_shape(&shape, idx)?;
        }
        Ok(Self { input_shape, layers })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::numel).sum()
    }

    /// Size of the final layer's output.
    pub fn num_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    /// Flattened input width of the final layer.
    pub fn final_fan_in(&self) -> usize {
        let last = self.layers.last().expect("non-empty");
        match last.kind {
            LayerKind::Dense => last.weight_shape[0],
            LayerKind::Conv2d { .. } => last.weight_shape[1..].iter().product(),
        }
    }

    /// `[w1, b1, w2, b2, ...]` as tensors, tracking gradients if `track`.
    pub fn param_tensors(&self, track: bool) -> Vec<Tensor> {
        let mk = |d: &Vec<f64>, s: &[usize]| {
            if track {
                Tensor::variable(d.clone(), s)
            } else {
                Tensor::new(d.clone(), s)
            }
            .expect("validated shapes")
        };
        self.layers
            .iter()
            .flat_map(|l| [mk(&l.weight, &l.weight_shape), mk(&l.bias, &[l.bias.len()])])
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] || x.shape()[0] == 0 {
            return Err(Error::Shape {
                layer: 1,
                msg: format!("expected input (n, {:?}), got {:?}", self.input_shape, x.shape()),
            });
        }
        Ok(())
    }

    /// Output of the first `upto` layers.
    pub fn forward_prefix(&self, params: &[Tensor], x: &Tensor, upto: usize) -> Result<Tensor> {
        self.check_input(x)?;
        if params.len() != 2 * self.layers.len() {
            return Err(invalid("parameters", format!("{} tensors for {} layers", params.len(), self.layers.len())));
        }
        let mut h = x.clone();
        for (i, l) in self.layers[..upto].iter().enumerate() {
            h = l.forward(&h, &params[2 * i], &params[2 * i + 1]).map_err(|e| match e {
                Error::Autodiff(err) => Error::Shape { layer: i + 1, msg: err.to_string() },
                other => other,
            })?;
        }
        Ok(h)
    }

    /// Logits `(n, outputs)` computed from the given parameter tensors.
    pub fn forward_with(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        self.forward_prefix(params, x, self.layers.len())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(&self.param_tensors(false), x)
    }

    /// Input of the final layer, flattened to `(n, features)`.
    pub fn features_with(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let h = self.forward_prefix(params, x, self.layers.len() - 1)?;
        let n = h.shape()[0];
        Ok(h.reshape(&[n, h.len() / n])?)
    }

    /// Mean softmax cross-entropy.
    pub fn loss_with(&self, params: &[Tensor], x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let logits = self.forward_with(params, x)?;
        logits.softmax_cross_entropy(labels).map_err(|e| invalid("labels", e.to_string()))
    }

    pub fn loss(&self, batch: &Batch) -> Result<Tensor> {
        self.loss_with(&self.param_tensors(false), &batch.inputs, &batch.labels)
    }

    /// Loss value and `d loss / d params` on a batch.
    pub fn gradient(&self, batch: &Batch) -> Result<(f64, GradientVector)> {
        let params = self.param_tensors(true);
        let loss = self.loss_with(&params, &batch.inputs, &batch.labels)?;
        let grads = grad(&loss, &params, false)?;
        Ok((loss.item()?, Self::pack(&grads)))
    }

    /// Packs `[dw1, db1, ...]` tensors into per-layer slots.
    pub fn pack(tensors: &[Tensor]) -> GradientVector {
        GradientVector::new(tensors.chunks(2).map(|p| [p[0].data(), p[1].data()].concat()).collect())
    }

    /// Parameters θ in gradient layout.
    pub fn param_vector(&self) -> GradientVector {
        GradientVector::new(self.layers.iter().map(|l| [l.weight.as_slice(), &l.bias].concat()).collect())
    }

    pub fn set_param_vector(&mut self, theta: &GradientVector) -> Result<()> {
        self.param_vector().check_aligned(theta)?;
        for (l, v) in self.layers.iter_mut().zip(theta.layers()) {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&v[..nw]);
            l.bias.copy_from_slice(&v[nw..]);
        }
        Ok(())
    }

    /// θ ← θ − lr·g.
    pub fn apply_gradient(&mut self, g: &GradientVector, lr: f64) -> Result<()> {
        let theta = self.param_vector().sub(&g.scale(lr))?;
        self.set_param_vector(&theta)
    }

    /// Copy with every parameter multiplied by `u`.
    pub fn scaled(&self, u: f64) -> Model {
        let mut m = self.clone();
        for l in &mut m.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= u);
        }
        m
    }

    /// Splits a gradient slot into its weight and bias parts.
    pub fn split_slot<'a>(&self, g: &'a GradientVector, layer: usize) -> (&'a [f64], &'a [f64]) {
        let nw = self.layers[layer].weight.len();
        g.layers()[layer].split_at(nw)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = no_grad(|| self.forward(x))?;
        let c = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Incremental model construction with seeded `U(±gain/√fan_in)` init
/// (gain 1 unless set).
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    shape: Vec<usize>,
    specs: Vec<(LayerKind, Activation, Vec<usize>)>,
    gain: f64,
}

impl ModelBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self { input_shape: input_shape.to_vec(), shape: input_shape.to_vec(), specs: Vec::new(), gain: 1.0 }
    }

    pub fn init_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn conv(mut self, out: usize, kernel: usize, stride: usize, pad: usize, act: Activation) -> Self {
        let c = self.shape.first().copied().unwrap_or(0);
        let (h, w) = (self.shape.get(1).copied().unwrap_or(0), self.shape.get(2).copied().unwrap_or(0));
        let ws = vec![out, c, kernel, kernel];
        self.shape = vec![out, (h + 2 * pad).saturating_sub(kernel) / stride.max(1) + 1, (w + 2 * pad).saturating_sub(kernel) / stride.max(1) + 1];
        self.specs.push((LayerKind::Conv2d { stride, pad }, act, ws));
        self
    }

    pub fn dense(mut self, out: usize, act: Activation) -> Self {
        let fan_in: usize = self.shape.iter().product();
        self.specs.push((LayerKind::Dense, act, vec![fan_in, out]));
        self.shape = vec![out];
        self
    }

    pub fn build(self, seed: u64) -> Result<Model> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(invalid("init gain", format!("{} must be positive", self.gain)));
        }
        let mut rng = rng::rng(seed, &[tag::INIT]);
        let layers = self
            .specs
            .into_iter()
            .map(|(kind, activation, ws)| {
                let (fan_in, out) = match kind {
                    LayerKind::Dense => (ws[0], ws[1]),
                    LayerKind::Conv2d { .. } => (ws[1] * ws[2] * ws[3], ws[0]),
                };
                let bound = self.gain / (fan_in.max(1) as f64).sqrt();
                let n: usize = ws.iter().product();
                let weight = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                let bias = (0..out).map(|_| rng.random_range(-bound..=bound)).collect();
                Layer { kind, activation, weight, weight_shape: ws, bias }
            })
            .collect();
        Model::new(self.input_shape, layers)
    }
}

/// LeNet-style stack: two 5×5 stride-2 convolutions (6·s and 16·s
/// channels) followed by a dense classifier.
pub fn build_small_cnn(input: [usize; 3], num_classes: usize, width_scale: usize, activation: Activation, seed: u64) -> Result<Model> {
    small_cnn(input, num_classes, width_scale, activation)?.build(seed)
}

/// Builder behind [`build_small_cnn`], for callers that change the init gain.
pub fn small_cnn(input: [usize; 3], num_classes: usize, width_scale: usize, activation: Activation) -> Result<ModelBuilder> {
    if width_scale == 0 {
        return Err(invalid("width_scale", "must be at least 1"));
    }
    Ok(ModelBuilder::new(&input)
        .conv(6 * width_scale, 5, 2, 2, activation)
        .conv(16 * width_scale, 5, 2, 2, activation)
        .dense(num_classes, Activation::None))
}

/// Fully connected network; `dims[0]` is the flattened input width.
pub fn build_mlp(dims: &[usize], activation: Activation, seed: u64) -> Result<Model> {
    if dims.len() < 2 {
        return Err(invalid("dims", "need an input width and at least one layer"));
    }
    let mut b = ModelBuilder::new(&dims[..1]);
    for (i, &d) in dims[1..].iter().enumerate() {
        let act = if i + 2 == dims.len() { Activation::None } else { activation };
        b = b.dense(d, act);
    }
    b.build(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        let m = build_mlp(&[4, 3, 2], Activation::Relu, 0).unwrap();
        assert_eq!(m.num_layers(), 2);
        assert_eq!(m.num_params(), 23);
    }

    #[test]
    fn dense_affine_value() {
        let l = Layer { kind: LayerKind::Dense, activation: Activation::None, weight: vec![2.0], weight_shape: vec![1, 1], bias: vec![1.0] };
        let m = Model::new(vec![1], vec![l]).unwrap();
        let out = m.forward(&Tensor::new(vec![3.0], &[1, 1]).unwrap()).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn mismatched_input_names_first_layer() {
        let m = build_mlp(&[4, 2], Activation::Relu, 0).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 5])).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 1, .. }), "{err}");
    }

    #[test]
    fn incompatible_stack_is_rejected() {
        let mut m = build_mlp(&[4, 3, 2], Activation::Relu, 0).unwrap();
        let mut layers = m.layers_mut().to_vec();
        layers[1].weight_shape = vec![2, 3];
        assert!(matches!(Model::new(vec![4], layers), Err(Error::Shape { layer: 2, .. })));
    }
}
