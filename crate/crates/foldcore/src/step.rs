//! The contract for a differentiable update function U(x, c): forward
//! evaluation plus the two vector-Jacobian products vᵀ·∂U/∂x and vᵀ·∂U/∂c,
//! and a finite-difference oracle for validating any implementation.

use crate::linalg::{LinalgError, Matrix, Vector};
use crate::prox::ProxError;
use thiserror::Error;

/// Base probe step for finite differences; scaled per coordinate by
/// (1 + |entry|).
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Largest deviation between analytic VJPs and the finite-difference Jacobian
/// accepted by `check_step`.
pub const CHECK_PASS_THRESHOLD: f64 = 1e-4;

/// Guard on n·max(n, p) before Jacobians are materialized.
pub const MATERIALIZE_GUARD: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum StepError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("finite-difference probe produced a non-finite value")]
    NonFiniteProbe,
    #[error("gradient evaluation produced a non-finite value")]
    NonFiniteGradient,
    #[error("Jacobian materialization too large: {size} entries")]
    TooLarge { size: usize },
    #[error("KKT matrix is singular")]
    SingularKkt,
    #[error("QP subproblem appears infeasible or its solver failed: {0}")]
    SubproblemInfeasible(String),
    #[error("nested solve failed in {context}: {message}")]
    Nested {
        context: &'static str,
        message: String,
    },
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// One update step U of an iterative solver, with reverse-mode derivatives.
///
/// `vjp_state` returns vᵀ·∂U/∂x (length n) and `vjp_param` returns vᵀ·∂U/∂c
/// (length p). Implementations hold no interior mutable state, so concurrent
/// calls with distinct inputs are safe.
pub trait DifferentiableStep: Send + Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn forward(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError>;
    fn vjp_state(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError>;
    fn vjp_param(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError>;
}

/// Materialized Jacobians of one step at a point: phi = ∂U/∂x (n×n),
/// psi = ∂U/∂c (n×p).
#[derive(Debug, Clone)]
pub struct StepJacobians {
    pub phi: Matrix,
    pub psi: Matrix,
}

/// Which argument of U(x, c) a Jacobian is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    State,
    Param,
}

fn check_dims(step: &dyn DifferentiableStep, x: &Vector, c: &Vector) -> Result<(), StepError> {
    if x.len() != step.state_dim() {
        return Err(StepError::ShapeMismatch {
            context: "state",
            expected: step.state_dim(),
            got: x.len(),
        });
    }
    if c.len() != step.param_dim() {
        return Err(StepError::ShapeMismatch {
            context: "param",
            expected: step.param_dim(),
            got: c.len(),
        });
    }
    Ok(())
}

/// Central-difference Jacobian of U with respect to the state or the
/// parameters. Column j uses the per-coordinate step h·(1 + |entry_j|).
pub fn fd_jacobian(
    step: &dyn DifferentiableStep,
    x: &Vector,
    c: &Vector,
    wrt: Wrt,
    h: f64,
) -> Result<Matrix, StepError> {
    assert!(h > 0.0, "fd_jacobian: h must be positive");
    check_dims(step, x, c)?;
    let n = step.state_dim();
    let cols = match wrt {
        Wrt::State => n,
        Wrt::Param => step.param_dim(),
    };
    let mut jac = Matrix::zeros(n, cols);
    for j in 0..cols {
        let base = match wrt {
            Wrt::State => x[j],
            Wrt::Param => c[j],
        };
        let hj = h * (1.0 + base.abs());
        let probe = |delta: f64| -> Result<Vector, StepError> {
            let out = match wrt {
                Wrt::State => {
                    let mut xp = x.clone();
                    xp.set(j, base + delta);
                    step.forward(&xp, c)?
                }
                Wrt::Param => {
                    let mut cp = c.clone();
                    cp.set(j, base + delta);
                    step.forward(x, &cp)?
                }
            };
            if !out.is_finite() {
                return Err(StepError::NonFiniteProbe);
            }
            Ok(out)
        };
        let plus = probe(hj)?;
        let minus = probe(-hj)?;
        for i in 0..n {
            let d = (plus[i] - minus[i]) / (2.0 * hj);
            if !d.is_finite() {
                return Err(StepError::NonFiniteProbe);
            }
            jac.set(i, j, d);
        }
    }
    Ok(jac)
}

/// Materialize Φ and Ψ row-by-row from the VJPs with unit vectors:
/// phi[i][j] = vjp_state(x, c, eᵢ)[j], psi[i][j] = vjp_param(x, c, eᵢ)[j].
pub fn assemble_jacobians(
    step: &dyn DifferentiableStep,
    x: &Vector,
    c: &Vector,
) -> Result<StepJacobians, StepError> {
    check_dims(step, x, c)?;
    let n = step.state_dim();
    let p = step.param_dim();
    let size = n * n.max(p);
    if size > MATERIALIZE_GUARD {
        return Err(StepError::TooLarge { size });
    }
    let mut phi = Matrix::zeros(n, n);
    let mut psi = Matrix::zeros(n, p);
    for i in 0..n {
        let e = Vector::unit(n, i);
        let row_phi = step.vjp_state(x, c, &e)?;
        let row_psi = step.vjp_param(x, c, &e)?;
        for j in 0..n {
            phi.set(i, j, row_phi[j]);
        }
        for j in 0..p {
            psi.set(i, j, row_psi[j]);
        }
    }
    Ok(StepJacobians { phi, psi })
}

/// Result of comparing analytic VJPs against the finite-difference oracle.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_dev_state: f64,
    pub max_dev_param: f64,
}

impl CheckReport {
    pub fn max_dev(&self) -> f64 {
        self.max_dev_state.max(self.max_dev_param)
    }
    pub fn pass(&self) -> bool {
        self.max_dev() < CHECK_PASS_THRESHOLD
    }
}

/// Compare the assembled analytic Jacobians against central differences at
/// (x, c). Callers are expected to choose points away from kinks.
pub fn check_step(
    step: &dyn DifferentiableStep,
    x: &Vector,
    c: &Vector,
) -> Result<CheckReport, StepError> {
    let jac = assemble_jacobians(step, x, c)?;
    let fd_state = fd_jacobian(step, x, c, Wrt::State, DEFAULT_FD_STEP)?;
    let fd_param = fd_jacobian(step, x, c, Wrt::Param, DEFAULT_FD_STEP)?;
    Ok(CheckReport {
        max_dev_state: jac.phi.sub(&fd_state).norm_max(),
        max_dev_param: jac.psi.sub(&fd_param).norm_max(),
    })
}

#[cfg(test)]
pub(crate) mod test_steps {
    use super::*;

    /// U(x, c) = a·x + c, elementwise (n = p).
    pub struct AffineStep {
        pub n: usize,
        pub a: f64,
    }

    impl DifferentiableStep for AffineStep {
        fn state_dim(&self) -> usize {
            self.n
        }
        fn param_dim(&self) -> usize {
            self.n
        }
        fn forward(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError> {
            Ok(x.scale(self.a).add(c))
        }
        fn vjp_state(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
            Ok(v.scale(self.a))
        }
        fn vjp_param(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
            Ok(v.clone())
        }
    }

    /// U(x, c) = A·x, constant in c (p = 1).
    pub struct MatrixStep {
        pub a: Matrix,
    }

    impl DifferentiableStep for MatrixStep {
        fn state_dim(&self) -> usize {
            self.a.rows()
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn forward(&self, x: &Vector, _c: &Vector) -> Result<Vector, StepError> {
            Ok(self.a.matvec(x))
        }
        fn vjp_state(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
            Ok(self.a.matvec_t(v))
        }
        fn vjp_param(&self, _x: &Vector, _c: &Vector, _v: &Vector) -> Result<Vector, StepError> {
            Ok(Vector::zeros(1))
        }
    }
}
