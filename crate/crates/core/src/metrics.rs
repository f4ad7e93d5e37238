//! Reconstruction-quality and utility metrics.

use std::fmt;

use crate::error::{invalid, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.is_empty() {
        return Err(invalid("metric inputs", format!("lengths {} and {}", x.len(), y.len())));
    }
    Ok(())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Peak signal-to-noise ratio for signals with peak value 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    /// The inputs are identical.
    Infinite,
}

impl Psnr {
    /// Numeric view; `Infinite` maps to `f64::INFINITY`.
    pub fn value(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn psnr(x: &[f64], y: &[f64]) -> Result<Psnr> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 { Psnr::Infinite } else { Psnr::Db(10.0 * (1.0 / m).log10()) })
}

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ssim {
    pub value: f64,
    /// The image was smaller than the window; one global window was used.
    pub global_fallback: bool,
}

fn window_ssim(x: &[f64], y: &[f64], idx: impl Iterator<Item = usize> + Clone) -> f64 {
    let n = idx.clone().count() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in idx.clone() {
        sx += x[i];
        sy += y[i];
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for i in idx {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    // Unbiased (sample) covariance.
    let norm = if n > 1.0 { n - 1.0 } else { 1.0 };
    let (vx, vy, cxy) = (vx / norm, vy / norm, cxy / norm);
    ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

/// Mean SSIM over all 7×7 windows, channels and images.
///
/// `shape` is the per-image `(c, h, w)`; `x` and `y` may hold several
/// images back to back.
pub fn ssim(x: &[f64], y: &[f64], shape: [usize; 3]) -> Result<Ssim> {
    check_pair(x, y)?;
    let [c, h, w] = shape;
    let plane = h * w;
    if plane == 0 || x.len() % (c * plane) != 0 {
        return Err(invalid("ssim inputs", format!("length {} is not a multiple of {shape:?}", x.len())));
    }
    let planes = x.len() / plane;
    let fallback = h < SSIM_WINDOW || w < SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let (xp, yp) = (&x[p * plane..(p + 1) * plane], &y[p * plane..(p + 1) * plane]);
        if fallback {
            total += window_ssim(xp, yp, 0..plane);
            count += 1;
            continue;
        }
        for i in 0..=h - SSIM_WINDOW {
            for j in 0..=w - SSIM_WINDOW {
                let idx = (i..i + SSIM_WINDOW).flat_map(move |r| (j..j + SSIM_WINDOW).map(move |col| r * w + col));
                total += window_ssim(xp, yp, idx);
                count += 1;
            }
        }
    }
    Ok(Ssim { value: total / count as f64, global_fallback: fallback })
}

/// Performance-maintenance metric: accuracy with a defense as a percentage
/// of the undefended accuracy.
pub fn pmm(defense_acc: f64, original_acc: f64) -> Result<f64> {
    if !(original_acc > 0.0) {
        return Err(invalid("pmm", format!("original accuracy {original_acc} must be positive")));
    }
    Ok(defense_acc / original_acc * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr: Psnr,
    pub ssim: f64,
    pub eval_net_score: f64,
    pub pmm: Option<f64>,
}
