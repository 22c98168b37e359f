//! Adapter exposing a step with a large internal parameter vector through a
//! smaller outer parameter via a fixed affine embedding θ = θ₀ + E·c.

use crate::linalg::Vector;
use crate::step::{DifferentiableStep, StepError};

/// Sparse affine embedding of a layer parameter c into the inner step's
/// parameter vector θ: θ = base + Σ coeff·c[c_idx] scattered at theta_idx.
pub struct EmbeddedParamStep<S> {
    inner: S,
    base: Vector,
    /// (theta index, c index, coefficient) triplets.
    map: Vec<(usize, usize, f64)>,
    param_dim: usize,
}

impl<S: DifferentiableStep> EmbeddedParamStep<S> {
    pub fn new(inner: S, base: Vector, map: Vec<(usize, usize, f64)>, param_dim: usize) -> Self {
        assert_eq!(base.len(), inner.param_dim(), "embedding base length");
        for &(ti, ci, _) in &map {
            assert!(ti < base.len() && ci < param_dim, "embedding index range");
        }
        Self {
            inner,
            base,
            map,
            param_dim,
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    /// Materialize the inner parameter vector for a given c.
    pub fn theta(&self, c: &Vector) -> Vector {
        assert_eq!(c.len(), self.param_dim);
        let mut theta = self.base.to_vec();
        for &(ti, ci, coeff) in &self.map {
            theta[ti] += coeff * c[ci];
        }
        Vector::from_raw(theta)
    }
}

impl<S: DifferentiableStep> DifferentiableStep for EmbeddedParamStep<S> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn param_dim(&self) -> usize {
        self.param_dim
    }
    fn forward(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError> {
        self.inner.forward(x, &self.theta(c))
    }
    fn vjp_state(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        self.inner.vjp_state(x, &self.theta(c), v)
    }
    fn vjp_param(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let cot_theta = self.inner.vjp_param(x, &self.theta(c), v)?;
        let mut out = vec![0.0; self.param_dim];
        for &(ti, ci, coeff) in &self.map {
            out[ci] += coeff * cot_theta[ti];
        }
        Ok(Vector::from_raw(out))
    }
}
