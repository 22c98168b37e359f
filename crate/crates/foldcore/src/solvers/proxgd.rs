//! Proximal gradient descent: x_{k+1} = Prox_{αg}(x_k − α∇f(x_k, c)).

use crate::linalg::Vector;
use crate::prox::{soft_threshold, soft_threshold_vjp};
use crate::solvers::pgd::SmoothObjective;
use crate::step::{DifferentiableStep, StepError};

/// Proximal operator of αg with its VJP at the prox input point.
pub trait ProxOperator: Send + Sync {
    fn prox(&self, y: &Vector, alpha: f64) -> Vector;
    fn vjp(&self, y: &Vector, alpha: f64, v: &Vector) -> Vector;
}

/// g = λ‖·‖₁, whose prox is the soft threshold with level αλ.
pub struct L1Prox {
    pub lambda: f64,
}

impl ProxOperator for L1Prox {
    fn prox(&self, y: &Vector, alpha: f64) -> Vector {
        soft_threshold(y, alpha * self.lambda)
    }
    fn vjp(&self, y: &Vector, alpha: f64, v: &Vector) -> Vector {
        soft_threshold_vjp(y, alpha * self.lambda, v)
    }
}

/// One proximal-gradient update.
pub struct ProxGdStep<F, G> {
    pub objective: F,
    pub prox: G,
    pub alpha: f64,
}

impl<F: SmoothObjective, G: ProxOperator> ProxGdStep<F, G> {
    pub fn new(objective: F, prox: G, alpha: f64) -> Self {
        assert!(alpha > 0.0, "proxgd: alpha must be positive");
        Self {
            objective,
            prox,
            alpha,
        }
    }

    fn pre_prox(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError> {
        let g = self.objective.grad(x, c)?;
        if !g.is_finite() {
            return Err(StepError::NonFiniteGradient);
        }
        Ok(x.axpy(-self.alpha, &g))
    }
}

impl<F: SmoothObjective, G: ProxOperator> DifferentiableStep for ProxGdStep<F, G> {
    fn state_dim(&self) -> usize {
        self.objective.state_dim()
    }
    fn param_dim(&self) -> usize {
        self.objective.param_dim()
    }

    fn forward(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError> {
        let y = self.pre_prox(x, c)?;
        Ok(self.prox.prox(&y, self.alpha))
    }

    fn vjp_state(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let y = self.pre_prox(x, c)?;
        let w = self.prox.vjp(&y, self.alpha, v);
        let hv = self.objective.grad_vjp_state(x, c, &w)?;
        Ok(w.axpy(-self.alpha, &hv))
    }

    fn vjp_param(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let y = self.pre_prox(x, c)?;
        let w = self.prox.vjp(&y, self.alpha, v);
        Ok(self.objective.grad_vjp_param(x, c, &w)?.scale(-self.alpha))
    }
}
