//! Dense row-major tensor of `f64` values.
//!
//! Images are stored as `[height, width, channels]`; gradients and
//! perturbations share the same layout. Geometry flattens tensors to plain
//! vectors, so no strided views are needed.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("tensor construction: non-finite value"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same shape as `self`, data replaced.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Tensor::new(self.shape.clone(), data)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &Tensor) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Round every value through `f32` and back.
    ///
    /// Data that must survive the 32-bit raw container losslessly is
    /// quantized at the source so later save/load cycles are identity maps.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Elementwise mean of equally-shaped tensors.
pub fn mean_tensor(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::parameter("mean of empty tensor list"))?;
    let mut acc = vec![0.0; first.len()];
    for t in items {
        if !t.same_shape(first) {
            return Err(Error::shape(format!(
                "mean over mixed shapes {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        for (a, v) in acc.iter_mut().zip(t.as_slice()) {
            *a += v;
        }
    }
    let scale = 1.0 / items.len() as f64;
    for a in &mut acc {
        *a *= scale;
    }
    first.with_data(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![0.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn linf_distance_picks_worst_pixel() {
        let a = Tensor::new(vec![3], vec![0.0, 0.5, 1.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, 0.5, 0.7]).unwrap();
        assert!((a.linf_distance(&b) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mean_of_two() {
        let a = Tensor::zeros(vec![4]);
        let b = Tensor::full(vec![4], 1.0);
        let m = mean_tensor(&[a, b]).unwrap();
        assert!(m.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn mean_of_empty_errors() {
        assert!(mean_tensor(&[]).is_err());
    }
}
