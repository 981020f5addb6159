//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus row-major data. Differentiation
//! happens on a [`Tape`](tape::Tape): forward builders record every operation,
//! `backward` replays them in reverse and accumulates gradients into the
//! leaves that asked for them. Everything is 64-bit so analytic gradients can
//! be validated against central finite differences ([`grad_check`]).

pub mod gradcheck;
pub mod io;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values. Rank 0 (scalar), 1, or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `data` matches the shape's element count.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar value; shape must be rank 0.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )))
        }
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Error if any element is NaN or infinite. `what` names the tensor in
    /// the message.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "{what}: non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two equal-length vectors: a·b / (‖a‖‖b‖).
///
/// Plain (non-differentiated) version; the tape has a differentiable
/// counterpart. Zero-norm inputs are an explicit error rather than NaN.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_sim: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < crate::tensor::tape::MIN_COSINE_NORM || nb < crate::tensor::tape::MIN_COSINE_NORM {
        return Err(Error::Numerical(
            "cosine_sim: zero-norm input vector".into(),
        ));
    }
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(dot / (na * nb))
}

/// Numerically stable softmax of a non-empty slice (max-subtraction).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Data("softmax: empty vector".into()));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numerical("softmax: non-finite input".into()));
    }
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(4.25).item().unwrap(), 4.25);
        assert!(Tensor::vector(vec![1.0, 2.0]).item().is_err());
    }

    #[test]
    fn validate_finite_reports_index() {
        let t = Tensor::vector(vec![1.0, f64::NAN, 3.0]);
        let err = t.validate_finite("probe").unwrap_err();
        assert!(err.to_string().contains("index 1"));
    }

    #[test]
    fn cosine_identical_orthogonal_scaled() {
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 0.0], &[5.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_errors() {
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_sim(&[], &[]).is_err());
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for w in &u {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        // e^1/(e^1+e^0) evaluated directly.
        let s = softmax(&[1.0, 0.0]).unwrap();
        assert!((s[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((s[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        // No overflow at extreme magnitudes.
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!(big[0] > 0.999_999_999);
        assert!(big[1] < 1e-9);
        assert!(softmax(&[]).is_err());
    }
}
