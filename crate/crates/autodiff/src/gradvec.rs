use crate::error::{AutodiffError, Result};

/// Per-layer flat gradient (or parameter) values, aligned with a model's
/// layer order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradientVector {
    layers: Vec<Vec<f64>>,
}

impl GradientVector {
    pub fn new(layers: Vec<Vec<f64>>) -> Self {
        Self { layers }
    }

    pub fn zeros_like(other: &GradientVector) -> Self {
        Self { layers: other.layers.iter().map(|l| vec![0.0; l.len()]).collect() }
    }

    /// Rebuilds a vector with the same layout as `template` from a flat buffer.
    pub fn from_flat(flat: &[f64], template: &GradientVector) -> Result<Self> {
        if flat.len() != template.numel() {
            return Err(AutodiffError::Invalid(format!(
                "flat buffer of {} values for a layout of {}",
                flat.len(),
                template.numel()
            )));
        }
        let mut layers = Vec::with_capacity(template.layers.len());
        let mut at = 0;
        for l in &template.layers {
            layers.push(flat[at..at + l.len()].to_vec());
            at += l.len();
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Vec<f64>> {
        self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn numel(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn layout(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.concat()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn check_aligned(&self, other: &GradientVector) -> Result<()> {
        if self.layout() != other.layout() {
            return Err(AutodiffError::Invalid(format!(
                "gradient layouts differ: {:?} vs {:?}",
                self.layout(),
                other.layout()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &GradientVector, f: impl Fn(f64, f64) -> f64) -> Result<GradientVector> {
        self.check_aligned(other)?;
        Ok(GradientVector {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        })
    }

    pub fn add(&self, other: &GradientVector) -> Result<GradientVector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GradientVector) -> Result<GradientVector> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> GradientVector {
        GradientVector { layers: self.layers.iter().map(|l| l.iter().map(|v| v * c).collect()).collect() }
    }

    pub fn dot(&self, other: &GradientVector) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &GradientVector) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn misaligned_layouts_are_rejected() {
        let a = GradientVector::new(vec![vec![1.0], vec![2.0, 3.0]]);
        let b = GradientVector::new(vec![vec![1.0, 2.0], vec![3.0]]);
        assert!(a.add(&b).is_err());
        assert!(a.dot(&b).is_err());
    }

    #[test]
    fn flat_round_trip_keeps_layout() {
        let a = GradientVector::new(vec![vec![1.0, 2.0], vec![], vec![3.0]]);
        assert_eq!(GradientVector::from_flat(&a.flatten(), &a).unwrap(), a);
    }

    proptest! {
        #[test]
        fn self_dot_is_nonnegative(v in proptest::collection::vec(-1e3f64..1e3, 0..40)) {
            let g = GradientVector::new(vec![v.clone(), v]);
            prop_assert!(g.dot(&g).unwrap() >= 0.0);
            prop_assert!((g.dot(&g).unwrap().sqrt() - g.norm()).abs() <= 1e-9 * (1.0 + g.norm()));
        }
    }
}
