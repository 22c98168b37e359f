//! foldcore: differentiable optimization layers by fixed-point folding.
//!
//! A parametric optimization mapping x*(c) = argmin f(x, c) over a feasible
//! set is exposed as a layer: the forward pass runs any black-box solver, and
//! the backward pass solves the linear system that arises by differentiating
//! the fixed-point condition x* = U(x*, c) of one solver update step U,
//!
//!     (I − Φ) ∂x*/∂c = Ψ,   Φ = ∂U/∂x,  Ψ = ∂U/∂c,
//!
//! using only vector-Jacobian products of U — no unrolled solver loop and no
//! materialized Jacobians. Gradients for a downstream loss come from solving
//! vᵀ(I − Φ) = gᵀ and returning vᵀΨ.
//!
//! The crate ships:
//! - dense linear algebra and iterative linear solvers ([`linalg`],
//!   [`linsolve`]),
//! - the differentiable-step contract with a finite-difference oracle
//!   ([`step`]),
//! - closed-form projections and proximal operators ([`prox`]),
//! - projected/proximal gradient, FDPG, ADMM-QP, and SQP solver steps
//!   ([`solvers`]),
//! - the folding engine itself ([`folding`]),
//! - canonical layers used by the CLI and diagnostics ([`layers`]),
//! - a small training stack (MLP, SGD/Adam, losses, synthetic data) for the
//!   end-to-end experiments ([`learning`]).

pub mod folding;
pub mod layers;
pub mod learning;
pub mod linalg;
pub mod linsolve;
pub mod prox;
pub mod solvers;
pub mod step;

pub use folding::{BackwardMethod, BackwardReport, FoldedLayer, FoldingConfig, TrajectoryRecord};
pub use linalg::{Matrix, Vector};
pub use step::DifferentiableStep;
