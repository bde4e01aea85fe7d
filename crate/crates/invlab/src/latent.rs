//! Flat latent vectors with shape metadata.

use crate::error::{Error, Result};

/// A flat real-valued vector with shape metadata; the state of every
/// forward, denoising, and inversion process in the crate.
///
/// Construction rejects NaN/Inf. Intermediate arithmetic does not revalidate;
/// solvers check finiteness on each iterate instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    values: Vec<f64>,
    shape: Vec<usize>,
    step_tag: Option<usize>,
}

impl Latent {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: vec![values.len()],
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent construction".into()));
        }
        Ok(Self {
            values,
            shape,
            step_tag: None,
        })
    }

    /// One-dimensional latent.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let dim = values.len();
        Self::new(values, vec![dim])
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            shape: vec![dim],
            step_tag: None,
        }
    }

    /// Skips the finite check; for internal arithmetic whose inputs were
    /// already validated.
    pub(crate) fn from_raw(values: Vec<f64>, shape: Vec<usize>) -> Self {
        Self {
            values,
            shape,
            step_tag: None,
        }
    }

    /// Annotates the latent with the model timestep it belongs to.
    pub fn with_tag(mut self, t: usize) -> Self {
        self.step_tag = Some(t);
        self
    }

    pub fn step_tag(&self) -> Option<usize> {
        self.step_tag
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Latent) -> Result<Latent> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Latent::from_raw(values, self.shape.clone()))
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Latent::from_raw(values, self.shape.clone()))
    }

    pub fn scale(&self, k: f64) -> Latent {
        let values = self.values.iter().map(|v| k * v).collect();
        Latent::from_raw(values, self.shape.clone())
    }

    /// `self + k * other`, elementwise.
    pub fn add_scaled(&self, k: f64, other: &Latent) -> Result<Latent> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + k * b)
            .collect();
        Ok(Latent::from_raw(values, self.shape.clone()))
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_values() {
        assert!(Latent::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(Latent::from_vec(vec![f64::INFINITY]).is_err());
        assert!(Latent::from_vec(vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn rejects_shape_size_mismatch() {
        assert!(Latent::new(vec![1.0, 2.0, 3.0], vec![2, 2]).is_err());
        assert!(Latent::new(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).is_ok());
    }

    #[test]
    fn arithmetic_and_norms() {
        let a = Latent::from_vec(vec![1.0, -2.0]).unwrap();
        let b = Latent::from_vec(vec![0.5, 1.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().values(), &[1.5, -1.0]);
        assert_eq!(a.sub(&b).unwrap().values(), &[0.5, -3.0]);
        assert_eq!(a.scale(2.0).values(), &[2.0, -4.0]);
        assert_eq!(a.add_scaled(2.0, &b).unwrap().values(), &[2.0, 0.0]);
        assert_eq!(a.linf_norm(), 2.0);
        assert_eq!(a.l2_norm(), 5.0_f64.sqrt());
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = Latent::from_vec(vec![1.0, 2.0]).unwrap();
        let b = Latent::from_vec(vec![1.0]).unwrap();
        assert!(a.add(&b).is_err());
        assert!(a.sub(&b).is_err());
    }
}
