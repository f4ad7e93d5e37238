//! Image datasets, client partitioning and noise sampling.

use std::fs;
use std::path::Path;

use glab_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::checkpoint::{self, RawTensor};
use crate::error::{invalid, io_err, Error, Result};
use crate::model::Batch;
use crate::rng::{self, tag};

/// Images `(n, c, h, w)` in `[0, 1]` with labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    images: Vec<f64>,
    image_shape: [usize; 3],
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<f64>, image_shape: [usize; 3], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(invalid("dataset", format!("{} values for {} images of shape {image_shape:?}", images.len(), labels.len())));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid("dataset", format!("label {y} out of range for {num_classes} classes")));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("dataset", "pixel values must lie in [0, 1]"));
        }
        Ok(Self { name: name.into(), images, image_shape, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.image_len();
        &self.images[i * p..(i + 1) * p]
    }

    /// Tensor `(k, c, h, w)` of the selected images.
    pub fn inputs(&self, indices: &[usize]) -> Tensor {
        let data: Vec<f64> = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let [c, h, w] = self.image_shape;
        Tensor::new(data, &[indices.len(), c, h, w]).expect("consistent shape")
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch { inputs: self.inputs(indices), labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn all(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let images = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { name: self.name.clone(), images, image_shape: self.image_shape, labels, num_classes: self.num_classes }
    }

    /// Shuffled split into `(rest, held_out)` with `held_out` of size `n_test`.
    pub fn split(&self, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n_test >= self.len() {
            return Err(invalid("split", format!("cannot hold out {n_test} of {} samples", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::rng(seed, &[tag::SPLIT]));
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    pub fn to_records(&self) -> Vec<RawTensor> {
        let [c, h, w] = self.image_shape;
        vec![
            RawTensor { shape: vec![self.len(), c, h, w], data: self.images.clone() },
            RawTensor { shape: vec![self.len()], data: self.labels.iter().map(|&y| y as f64).collect() },
            RawTensor { shape: vec![1], data: vec![self.num_classes as f64] },
        ]
    }

    pub fn from_records(name: &str, records: Vec<RawTensor>) -> Result<Dataset> {
        let [images, labels, classes] = <[RawTensor; 3]>::try_from(records).map_err(|_| invalid("dataset file", "expected three tensors"))?;
        let [_, c, h, w] = images.shape[..] else {
            return Err(invalid("dataset file", format!("image tensor has shape {:?}", images.shape)));
        };
        let labels = labels.data.iter().map(|&y| y as usize).collect();
        Dataset::new(name, images.data, [c, h, w], labels, classes.data.first().copied().unwrap_or(0.0) as usize)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_tensors(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Dataset::from_records(&name, checkpoint::load_tensors(path)?)
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Parses CIFAR-10 binary records (label byte, then 3×32×32 pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            msg: format!("truncated record: {} of {CIFAR_RECORD} bytes", bytes.len() - whole),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format { offset: (i * CIFAR_RECORD) as u64, msg: format!("label out of range: {}", rec[0]) });
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Dataset::new("cifar10", images, [3, 32, 32], labels, 10)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    parse_cifar10(&fs::read(path).map_err(io_err(path))?)
}

/// Per-sample variation of [`synth_dataset_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    /// Std of the blob-position shift, as a fraction of the image side.
    pub jitter: f64,
    /// Std of i.i.d. pixel noise.
    pub pixel_noise: f64,
    /// Half-width of the uniform brightness gain around 1.
    pub gain_spread: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { jitter: 0.05, pixel_noise: 0.02, gain_spread: 0.2 }
    }
}

/// Class-conditional images built from smooth Gaussian blobs.
///
/// Each class owns a background tint and three coloured blobs; samples
/// jitter blob positions, sizes and brightness and add mild pixel noise.
pub fn synth_dataset(num_classes: usize, n_per_class: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(num_classes, n_per_class, h, w, SynthParams::default(), seed)
}

pub fn synth_dataset_with(num_classes: usize, n_per_class: usize, h: usize, w: usize, params: SynthParams, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || n_per_class == 0 || h == 0 || w == 0 {
        return Err(invalid("synthetic dataset", "all sizes must be at least 1"));
    }
    struct Blob {
        cy: f64,
        cx: f64,
        radius: f64,
        colour: [f64; 3],
    }
    let protos: Vec<([f64; 3], Vec<Blob>)> = (0..num_classes)
        .map(|k| {
            let mut r = rng::rng(seed, &[tag::DATA, k as u64]);
            let bg = [r.random_range(0.1..0.5), r.random_range(0.1..0.5), r.random_range(0.1..0.5)];
            let blobs = (0..3)
                .map(|_| Blob {
                    cy: r.random_range(0.15..0.85),
                    cx: r.random_range(0.15..0.85),
                    radius: r.random_range(0.12..0.28),
                    colour: [r.random_range(-0.4..0.6), r.random_range(-0.4..0.6), r.random_range(-0.4..0.6)],
                })
                .collect();
            (bg, blobs)
        })
        .collect();

    let jitter = Normal::new(0.0, params.jitter).map_err(|e| invalid("jitter", e.to_string()))?;
    let pixel = Normal::new(0.0, params.pixel_noise).map_err(|e| invalid("pixel noise", e.to_string()))?;
    let mut r = rng::rng(seed, &[tag::DATA, u64::MAX]);
    let mut samples: Vec<(Vec<f64>, usize)> = Vec::with_capacity(num_classes * n_per_class);
    for (k, (bg, blobs)) in protos.iter().enumerate() {
        for _ in 0..n_per_class {
            let shift = [jitter.sample(&mut r), jitter.sample(&mut r)];
            let gain: f64 = 1.0 + params.gain_spread * (2.0 * r.random::<f64>() - 1.0);
            let mut img = vec![0.0; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
                    for (c, &base) in bg.iter().enumerate() {
                        let mut v = base + 0.15 * fy;
                        for b in blobs {
                            let d2 = (fy - b.cy - shift[0]).powi(2) + (fx - b.cx - shift[1]).powi(2);
                            v += gain * b.colour[c] * (-d2 / (2.0 * b.radius * b.radius)).exp();
                        }
                        img[(c * h + y) * w + x] = (v + pixel.sample(&mut r)).clamp(0.0, 1.0);
                    }
                }
            }
            samples.push((img, k));
        }
    }
    samples.shuffle(&mut r);
    let labels = samples.iter().map(|s| s.1).collect();
    let images = samples.into_iter().flat_map(|s| s.0).collect();
    Dataset::new(format!("synthetic-{num_classes}x{n_per_class}"), images, [3, h, w], labels, num_classes)
}

/// Disjoint per-client index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }
}

/// Shuffled split into `k` parts whose sizes differ by at most one.
pub fn partition_iid(dataset: &Dataset, k: usize, seed: u64) -> Result<Partition> {
    let n = dataset.len();
    if k == 0 || k > n {
        return Err(invalid("partition", format!("cannot split {n} samples over {k} clients")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(seed, &[tag::PARTITION]));
    let (base, extra) = (n / k, n % k);
    let mut clients = Vec::with_capacity(k);
    let mut at = 0;
    for c in 0..k {
        let size = base + usize::from(c < extra);
        clients.push(idx[at..at + size].to_vec());
        at += size;
    }
    Ok(Partition { clients })
}

/// Label-skewed split: each client draws a label mixture from a symmetric
/// Dirichlet and fills an equal quota of `n / k` samples accordingly.
pub fn partition_dirichlet(dataset: &Dataset, k: usize, concentration: f64, seed: u64) -> Result<Partition> {
    let n = dataset.len();
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(invalid("concentration", format!("{concentration} must be positive")));
    }
    if k == 0 || k > n {
        return Err(invalid("partition", format!("cannot split {n} samples over {k} clients")));
    }
    let classes = dataset.num_classes();
    let mut r = rng::rng(seed, &[tag::PARTITION]);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in dataset.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for p in &mut pools {
        p.shuffle(&mut r);
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| invalid("concentration", e.to_string()))?;
    let quota = n / k;
    let mut clients = Vec::with_capacity(k);
    for client in 0..k {
        let mut p: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut r)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 && total.is_finite() {
            p.iter_mut().for_each(|v| *v /= total);
        } else {
            p = vec![1.0 / classes as f64; classes];
        }
        let counts = apportion(&p, quota);
        let mut mine = Vec::with_capacity(quota);
        let mut short = 0;
        for (y, &want) in counts.iter().enumerate() {
            let take = want.min(pools[y].len());
            short += want - take;
            mine.extend(pools[y].drain(..take));
        }
        if short > 0 {
            log::debug!("client {client}: {short} samples redrawn from remaining labels");
            let mut order: Vec<usize> = (0..classes).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            for y in order {
                let take = short.min(pools[y].len());
                mine.extend(pools[y].drain(..take));
                short -= take;
            }
        }
        clients.push(mine);
    }
    Ok(Partition { clients })
}

/// Largest-remainder rounding of `p · total` to integers summing to `total`.
fn apportion(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|v| v * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut left = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// I.i.d. `U[0, 1)` values of the given shape.
pub fn sample_uniform_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng(seed, &[tag::NOISE]);
    uniform_noise(shape, &mut r)
}

pub fn uniform_noise(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| r.random::<f64>()).collect(), shape).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 10).iter().sum::<usize>(), 10);
        assert_eq!(apportion(&[1.0, 0.0], 3), vec![3, 0]);
    }
}
