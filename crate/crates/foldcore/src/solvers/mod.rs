//! Iterative optimization algorithms, each exposed both as a black-box
//! forward solver (iterate one update step U to tolerance) and as a
//! [`DifferentiableStep`] suitable for fixed-point folding.

pub mod admm;
pub mod embed;
pub mod fdpg;
pub mod oracle;
pub mod pgd;
pub mod proxgd;
pub mod qp;
pub mod sqp;

use crate::linalg::Vector;
use crate::step::{DifferentiableStep, StepError};
use thiserror::Error;

pub use admm::{admm_qp_step, solve_qp_general, solve_qp_standard, AdmmQpStep, QpSolution};
pub use embed::EmbeddedParamStep;
pub use fdpg::{fdpg_step, FdpgFoldStep, FdpgState};
pub use pgd::{PgdStep, Projection, SmoothObjective};
pub use proxgd::{L1Prox, ProxGdStep, ProxOperator};
pub use qp::{qp_general_to_standard, QpGeneral, QpStandard, StandardForm};
pub use sqp::{DualUpdate, SqpProblem, SqpStep};

/// Default forward tolerance on the successive-iterate difference.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default iteration cap for forward solves.
pub const DEFAULT_MAX_ITER: usize = 5000;
/// Iterate norms beyond this abort the solve.
pub const SOLVE_DIVERGENCE_CUTOFF: f64 = 1e12;

/// Outcome of a fixed-point solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x_star: Vector,
    /// Dual variables, when the algorithm produces them.
    pub dual: Option<Vector>,
    pub iterations: usize,
    /// ‖U(x*, c) − x*‖∞, recomputed at return.
    pub fixed_point_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("solver did not converge in {} iterations (fixed-point residual {:.3e})", report.iterations, report.fixed_point_residual)]
    NoConvergence { report: Box<SolveReport> },
    #[error("solver iterates diverged: |x| = {norm:.3e} at iteration {iteration}")]
    Divergence { norm: f64, iteration: usize },
    #[error("invalid problem data: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Step(#[from] StepError),
}

/// Refine x0 by repeated application of the update step until the
/// successive-iterate difference ‖x_{k+1} − x_k‖∞ drops below tol.
pub fn solve_fixed_point(
    step: &dyn DifferentiableStep,
    c: &Vector,
    x0: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolverError> {
    assert!(tol > 0.0, "solve_fixed_point: tol must be positive");
    let mut x = x0.clone();
    let mut iterations = 0;
    let mut converged = false;
    for k in 0..max_iter {
        let x_next = step.forward(&x, c)?;
        let diff = x_next.sub(&x).norm_inf();
        iterations = k + 1;
        let norm = x_next.norm_inf();
        if !norm.is_finite() || norm > SOLVE_DIVERGENCE_CUTOFF {
            return Err(SolverError::Divergence {
                norm,
                iteration: iterations,
            });
        }
        x = x_next;
        if diff < tol {
            converged = true;
            break;
        }
    }
    let fixed_point_residual = step.forward(&x, c)?.sub(&x).norm_inf();
    let report = SolveReport {
        x_star: x,
        dual: None,
        iterations,
        fixed_point_residual,
        converged,
    };
    if converged {
        Ok(report)
    } else {
        Err(SolverError::NoConvergence {
            report: Box::new(report),
        })
    }
}
