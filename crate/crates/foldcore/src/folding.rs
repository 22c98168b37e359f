//! The fixed-point folding engine: forward pass by any black-box solver,
//! backward pass by solving the differential fixed-point system
//! (I − Φ)·∂x*/∂c = Ψ of one update step, using only that step's VJPs.
//!
//! For a loss gradient g the engine solves vᵀ(I − Φ) = gᵀ and returns
//! vᵀΨ — no Jacobian is ever materialized on the production path. Dense and
//! unfolding modes exist for equivalence and rate studies on small
//! instances.

use crate::linalg::{
    lu_factor, spectral_radius, FnOperator, LinalgError, Matrix, Vector,
};
use crate::linsolve::{empirical_rate, krylov_solve, lfpi, LinSolveReport, SolveError};
use crate::solvers::{SolveReport, SolverError};
use crate::step::{assemble_jacobians, DifferentiableStep, StepError, MATERIALIZE_GUARD};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use thiserror::Error;

/// How the backward linear system is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMethod {
    /// v_{k+1}ᵀ = v_kᵀΦ + gᵀ — the iteration an unrolled backward pass
    /// implicitly performs.
    Lfpi,
    /// Restarted GMRES on (I − Φ)ᵀv = g.
    Krylov,
}

#[derive(Debug, Clone)]
pub struct FoldingConfig {
    pub backward_method: BackwardMethod,
    pub backward_tol: f64,
    pub backward_max_iter: usize,
    /// Tolerance the forward solver was configured with; gates the
    /// fixed-point residual check before any backward pass.
    pub forward_tol: f64,
}

impl Default for FoldingConfig {
    fn default() -> Self {
        Self {
            backward_method: BackwardMethod::Krylov,
            backward_tol: 1e-12,
            backward_max_iter: 200_000,
            forward_tol: 1e-10,
        }
    }
}

/// A black-box forward solver producing the fixed point of the paired step.
pub trait ForwardSolver: Send + Sync {
    fn solve(&self, c: &Vector, x0: Option<&Vector>) -> Result<SolveReport, SolverError>;
}

/// Forward solver that simply iterates the step to tolerance.
pub struct FixedPointSolver {
    step: Arc<dyn DifferentiableStep>,
    pub x0: Vector,
    pub tol: f64,
    pub max_iter: usize,
}

impl FixedPointSolver {
    pub fn new(step: Arc<dyn DifferentiableStep>, x0: Vector, tol: f64, max_iter: usize) -> Self {
        Self {
            step,
            x0,
            tol,
            max_iter,
        }
    }
}

impl ForwardSolver for FixedPointSolver {
    fn solve(&self, c: &Vector, x0: Option<&Vector>) -> Result<SolveReport, SolverError> {
        let start = x0.unwrap_or(&self.x0);
        crate::solvers::solve_fixed_point(self.step.as_ref(), c, start, self.tol, self.max_iter)
    }
}

#[derive(Debug, Error)]
pub enum FoldError {
    #[error("x is not a fixed point of the step: residual {residual:.3e} exceeds gate {gate:.3e}")]
    NotAFixedPoint { residual: f64, gate: f64 },
    #[error("I − Φ is singular (estimated ρ(Φ) = {rho_estimate:.6})")]
    SingularSystem { rho_estimate: f64 },
    #[error("backward pass failed (ρ(Φ) ≥ 1?): {0}")]
    Backward(#[from] SolveError),
    #[error(transparent)]
    Forward(#[from] SolverError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dense reference restricted to n·p ≤ {guard}, got {size}")]
    Guard { size: usize, guard: usize },
}

/// Per-iteration error log of an unfolding run.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// ‖x_k − x*‖₁ / ‖x*‖₁ after each update.
    pub forward_rel_err: Vec<f64>,
    /// ‖J_k − J‖₁ / ‖J‖₁ after each update, J from the dense reference.
    pub backward_rel_err: Vec<f64>,
    /// Power-iteration estimate of ρ(Φ) at the fixed point.
    pub rho_estimate: f64,
}

/// Result of one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardReport {
    /// gᵀ·∂x*/∂c.
    pub grad_c: Vector,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub per_iter_residuals: Vec<f64>,
}

/// Where a rate study starts its unfolding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    FixedPoint,
    Random,
}

/// Pairing of a black-box forward solver with a differentiable step and a
/// backward-pass linear solver.
pub struct FoldedLayer {
    solver: Box<dyn ForwardSolver>,
    step: Arc<dyn DifferentiableStep>,
    config: FoldingConfig,
}

impl FoldedLayer {
    pub fn new(
        solver: Box<dyn ForwardSolver>,
        step: Arc<dyn DifferentiableStep>,
        config: FoldingConfig,
    ) -> Self {
        Self {
            solver,
            step,
            config,
        }
    }

    /// Construct and verify on a probe parameter that the solver's solution
    /// is a fixed point of the step (residual ≤ 10·forward tol).
    pub fn with_self_test(
        solver: Box<dyn ForwardSolver>,
        step: Arc<dyn DifferentiableStep>,
        config: FoldingConfig,
        probe_c: &Vector,
    ) -> Result<Self, FoldError> {
        let layer = Self::new(solver, step, config);
        let report = layer.forward(probe_c)?;
        let gate = 10.0 * layer.config.forward_tol;
        if report.fixed_point_residual > gate {
            return Err(FoldError::NotAFixedPoint {
                residual: report.fixed_point_residual,
                gate,
            });
        }
        Ok(layer)
    }

    pub fn step(&self) -> &dyn DifferentiableStep {
        self.step.as_ref()
    }

    pub fn config(&self) -> &FoldingConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.step.state_dim()
    }

    pub fn param_dim(&self) -> usize {
        self.step.param_dim()
    }

    /// Forward pass: delegate entirely to the black-box solver.
    pub fn forward(&self, c: &Vector) -> Result<SolveReport, FoldError> {
        Ok(self.solver.solve(c, None)?)
    }

    /// Forward pass from a caller-chosen starting point.
    pub fn forward_from(&self, c: &Vector, x0: &Vector) -> Result<SolveReport, FoldError> {
        Ok(self.solver.solve(c, Some(x0))?)
    }

    fn gate_fixed_point(&self, c: &Vector, x_star: &Vector) -> Result<(), FoldError> {
        let residual = self.step.forward(x_star, c)?.sub(x_star).norm_inf();
        let gate = 100.0 * self.config.forward_tol;
        if residual > gate {
            return Err(FoldError::NotAFixedPoint { residual, gate });
        }
        Ok(())
    }

    /// Backward pass: solve vᵀ(I − Φ) = gᵀ with the configured method and
    /// return grad_c = vᵀΨ. Uses only vjp calls of the step; nothing is
    /// materialized.
    pub fn backward_vjp(
        &self,
        c: &Vector,
        x_star: &Vector,
        g: &Vector,
    ) -> Result<BackwardReport, FoldError> {
        self.backward_with(self.config.backward_method, c, x_star, g)
    }

    /// Backward pass with an explicit method choice.
    pub fn backward_with(
        &self,
        method: BackwardMethod,
        c: &Vector,
        x_star: &Vector,
        g: &Vector,
    ) -> Result<BackwardReport, FoldError> {
        self.gate_fixed_point(c, x_star)?;
        let n = self.step.state_dim();
        assert_eq!(g.len(), n, "backward: gradient length");

        let report = match method {
            BackwardMethod::Lfpi => {
                // v_{k+1} = Φᵀ v_k + g, started at v₀ = g (the iterate an
                // unfolded backward pass produces).
                let op = self.phi_transpose_op(c, x_star);
                lfpi(
                    &op,
                    g,
                    g,
                    self.config.backward_tol,
                    self.config.backward_max_iter,
                )?
            }
            BackwardMethod::Krylov => {
                // (I − Φ)ᵀ v = g via GMRES on w ↦ w − Φᵀw.
                let op = self.i_minus_phi_transpose_op(c, x_star);
                krylov_solve(
                    &op,
                    g,
                    &Vector::zeros(n),
                    self.config.backward_tol,
                    self.config.backward_max_iter,
                )?
            }
        };
        self.finish_backward(c, x_star, report)
    }

    fn finish_backward(
        &self,
        c: &Vector,
        x_star: &Vector,
        report: LinSolveReport,
    ) -> Result<BackwardReport, FoldError> {
        let grad_c = self.step.vjp_param(x_star, c, &report.solution)?;
        Ok(BackwardReport {
            grad_c,
            iterations: report.iterations,
            residual: report.residual_norm,
            converged: report.converged,
            per_iter_residuals: report.per_iter_residuals,
        })
    }

    /// The operator w ↦ Φᵀw = vjp_state(x*, c, w).
    fn phi_transpose_op<'a>(
        &'a self,
        c: &'a Vector,
        x_star: &'a Vector,
    ) -> FnOperator<impl Fn(&Vector) -> Result<Vector, LinalgError> + 'a> {
        let n = self.step.state_dim();
        FnOperator::new(n, n, move |w: &Vector| {
            self.step
                .vjp_state(x_star, c, w)
                .map_err(|_| LinalgError::NonFinite("vjp_state"))
        })
    }

    /// The operator w ↦ w − Φᵀw, acting as (I − Φ)ᵀ on reverse-mode vectors.
    fn i_minus_phi_transpose_op<'a>(
        &'a self,
        c: &'a Vector,
        x_star: &'a Vector,
    ) -> FnOperator<impl Fn(&Vector) -> Result<Vector, LinalgError> + 'a> {
        let n = self.step.state_dim();
        FnOperator::new(n, n, move |w: &Vector| {
            let phi_t_w = self
                .step
                .vjp_state(x_star, c, w)
                .map_err(|_| LinalgError::NonFinite("vjp_state"))?;
            Ok(w.sub(&phi_t_w))
        })
    }

    /// Power-iteration estimate of ρ(Φ) at (x*, c) (ρ(Φᵀ) = ρ(Φ)).
    pub fn spectral_radius_phi(&self, c: &Vector, x_star: &Vector) -> Result<f64, FoldError> {
        let op = self.phi_transpose_op(c, x_star);
        match spectral_radius(&op, 20_000, 1e-9) {
            Ok(r) => Ok(r),
            Err(LinalgError::NoConvergence { estimate }) => Ok(estimate),
            Err(e) => Err(e.into()),
        }
    }

    fn guard(&self) -> Result<(), FoldError> {
        let n = self.step.state_dim();
        let p = self.step.param_dim();
        let size = n * n.max(p);
        if size > MATERIALIZE_GUARD {
            return Err(FoldError::Guard {
                size,
                guard: MATERIALIZE_GUARD,
            });
        }
        Ok(())
    }

    /// Dense reference Jacobian: materialize Φ, Ψ and solve
    /// (I − Φ)·J = Ψ column-by-column with an LU factorization.
    pub fn jacobian_dense(&self, c: &Vector, x_star: &Vector) -> Result<Matrix, FoldError> {
        self.guard()?;
        self.gate_fixed_point(c, x_star)?;
        let jac = assemble_jacobians(self.step.as_ref(), x_star, c)?;
        let n = self.step.state_dim();
        let p = self.step.param_dim();
        let i_minus_phi = Matrix::identity(n).sub(&jac.phi);
        let factors = lu_factor(&i_minus_phi).map_err(|_| {
            let rho = self
                .spectral_radius_phi(c, x_star)
                .unwrap_or(f64::NAN);
            FoldError::SingularSystem { rho_estimate: rho }
        })?;
        let mut j = Matrix::zeros(n, p);
        for col in 0..p {
            let rhs = Vector::from_raw((0..n).map(|i| jac.psi.get(i, col)).collect::<Vec<_>>());
            let x = factors.solve(&rhs)?;
            for i in 0..n {
                j.set(i, col, x[i]);
            }
        }
        Ok(j)
    }

    /// The Jacobian a k-step unrolled backward pass at the fixed point
    /// produces: J₀ = Ψ, J_{j+1} = Φ·J_j + Ψ, returned after exactly k
    /// recursion steps. Rows of Φ and Ψ come from the VJPs.
    pub fn unfold_jacobian(
        &self,
        c: &Vector,
        x_star: &Vector,
        k: usize,
    ) -> Result<Matrix, FoldError> {
        self.guard()?;
        let jac = assemble_jacobians(self.step.as_ref(), x_star, c)?;
        let mut j = jac.psi.clone();
        for _ in 0..k {
            j = jac.phi.matmul(&j).add(&jac.psi);
        }
        Ok(j)
    }

    /// Emulate unrolling from a chosen start: iterate x_{j+1} = U(x_j, c)
    /// and the true backward recursion J_{j+1} = Φ(x_j)·J_j + Ψ(x_j) with
    /// J₀ = 0, recording forward and backward errors relative to the
    /// converged solution and the dense reference Jacobian.
    pub fn rate_study(
        &self,
        c: &Vector,
        mode: StartMode,
        k: usize,
        seed: u64,
    ) -> Result<TrajectoryRecord, FoldError> {
        self.guard()?;
        let fwd = self.forward(c)?;
        let x_star = fwd.x_star;
        let j_ref = self.jacobian_dense(c, &x_star)?;
        let rho_estimate = self.spectral_radius_phi(c, &x_star)?;
        let n = self.step.state_dim();
        let p = self.step.param_dim();

        let mut x = match mode {
            StartMode::FixedPoint => x_star.clone(),
            StartMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Vector::from_fn(n, |_| rng.gen_range(0.0..1.0)).expect("finite")
            }
        };
        let mut j = Matrix::zeros(n, p);
        let x_norm = x_star.norm_l1().max(f64::MIN_POSITIVE);
        let j_norm = j_ref.norm_l1().max(f64::MIN_POSITIVE);

        let mut forward_rel_err = Vec::with_capacity(k);
        let mut backward_rel_err = Vec::with_capacity(k);
        for _ in 0..k {
            let jac = assemble_jacobians(self.step.as_ref(), &x, c)?;
            j = jac.phi.matmul(&j).add(&jac.psi);
            x = self.step.forward(&x, c)?;
            forward_rel_err.push(x.sub(&x_star).norm_l1() / x_norm);
            backward_rel_err.push(j.sub(&j_ref).norm_l1() / j_norm);
        }
        Ok(TrajectoryRecord {
            forward_rel_err,
            backward_rel_err,
            rho_estimate,
        })
    }

    /// Decay ratio of the backward residuals under LFPI, for comparison with
    /// ρ(Φ).
    pub fn backward_decay_ratio(
        &self,
        c: &Vector,
        x_star: &Vector,
        g: &Vector,
    ) -> Result<f64, FoldError> {
        let report = self.backward_with(BackwardMethod::Lfpi, c, x_star, g)?;
        let rate = empirical_rate(&report.per_iter_residuals)?;
        Ok((-rate).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::step::StepError;

    /// U(x, c) = a·x + c (scalar): x* = c/(1−a), Φ = a, Ψ = 1.
    struct ScalarToy {
        a: f64,
    }
    impl DifferentiableStep for ScalarToy {
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
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

    fn toy_layer(a: f64) -> FoldedLayer {
        let step = Arc::new(ScalarToy { a });
        let solver = FixedPointSolver::new(step.clone(), Vector::zeros(1), 1e-12, 10_000);
        FoldedLayer::new(
            Box::new(solver),
            step,
            FoldingConfig {
                forward_tol: 1e-12,
                ..FoldingConfig::default()
            },
        )
    }

    fn vecf(v: &[f64]) -> Vector {
        Vector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn scalar_toy_forward_and_backward() {
        let layer = toy_layer(0.5);
        let c = vecf(&[1.0]);
        let fwd = layer.forward(&c).unwrap();
        assert!((fwd.x_star[0] - 2.0).abs() < 1e-9);
        // dx*/dc = 1/(1−0.5) = 2 for either method.
        for method in [BackwardMethod::Lfpi, BackwardMethod::Krylov] {
            let back = layer
                .backward_with(method, &c, &fwd.x_star, &vecf(&[1.0]))
                .unwrap();
            assert!(
                (back.grad_c[0] - 2.0).abs() < 1e-8,
                "{method:?}: {:?}",
                back.grad_c
            );
        }
    }

    #[test]
    fn jacobian_dense_scalar() {
        let layer = toy_layer(0.5);
        let c = vecf(&[1.0]);
        let x = layer.forward(&c).unwrap().x_star;
        let j = layer.jacobian_dense(&c, &x).unwrap();
        assert!((j.get(0, 0) - 2.0).abs() < 1e-10);
    }

    #[test]
    fn unfold_jacobian_partial_geometric_sums() {
        let layer = toy_layer(0.5);
        let c = vecf(&[1.0]);
        let x = layer.forward(&c).unwrap().x_star;
        // k = 0 → Ψ = 1; k = 3 → 1 + 0.5 + 0.25 + 0.125 = 1.875.
        let j0 = layer.unfold_jacobian(&c, &x, 0).unwrap();
        assert_eq!(j0.get(0, 0), 1.0);
        let j3 = layer.unfold_jacobian(&c, &x, 3).unwrap();
        assert!((j3.get(0, 0) - 1.875).abs() < 1e-15);
        // Large k approaches the dense Jacobian at ratio ρ(Φ) per step.
        let j_ref = layer.jacobian_dense(&c, &x).unwrap();
        let e20 = (layer.unfold_jacobian(&c, &x, 20).unwrap().get(0, 0) - j_ref.get(0, 0)).abs();
        let e21 = (layer.unfold_jacobian(&c, &x, 21).unwrap().get(0, 0) - j_ref.get(0, 0)).abs();
        assert!((e21 / e20 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn projection_free_step_converges_in_one_backward_iteration() {
        // U(x, c) = c: Φ = 0, Ψ = I, so grad = g immediately.
        struct ConstStep;
        impl DifferentiableStep for ConstStep {
            fn state_dim(&self) -> usize {
                2
            }
            fn param_dim(&self) -> usize {
                2
            }
            fn forward(&self, _x: &Vector, c: &Vector) -> Result<Vector, StepError> {
                Ok(c.clone())
            }
            fn vjp_state(&self, _x: &Vector, _c: &Vector, _v: &Vector) -> Result<Vector, StepError> {
                Ok(Vector::zeros(2))
            }
            fn vjp_param(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
                Ok(v.clone())
            }
        }
        let step = Arc::new(ConstStep);
        let solver = FixedPointSolver::new(step.clone(), Vector::zeros(2), 1e-12, 10);
        let layer = FoldedLayer::new(
            Box::new(solver),
            step,
            FoldingConfig {
                forward_tol: 1e-12,
                backward_method: BackwardMethod::Lfpi,
                ..FoldingConfig::default()
            },
        );
        let c = vecf(&[0.3, -0.7]);
        let x = layer.forward(&c).unwrap().x_star;
        let g = vecf(&[1.0, 2.0]);
        let back = layer.backward_vjp(&c, &x, &g).unwrap();
        assert!(back.grad_c.sub(&g).norm_inf() < 1e-12);
        assert!(back.iterations <= 2);
    }

    #[test]
    fn backward_refuses_non_fixed_points() {
        let layer = toy_layer(0.5);
        let c = vecf(&[1.0]);
        match layer.backward_vjp(&c, &vecf(&[0.0]), &vecf(&[1.0])) {
            Err(FoldError::NotAFixedPoint { .. }) => {}
            other => panic!("expected NotAFixedPoint, got {other:?}"),
        }
    }

    #[test]
    fn backward_diverges_loudly_when_rho_exceeds_one() {
        let step = Arc::new(ScalarToy { a: 1.5 });
        // Hand the layer a true fixed point of the expansive map:
        // x = 1.5x + c at c = 1 → x* = −2.
        let solver = FixedPointSolver::new(step.clone(), Vector::zeros(1), 1e-12, 5);
        let layer = FoldedLayer::new(
            Box::new(solver),
            step,
            FoldingConfig {
                forward_tol: 1e-12,
                backward_method: BackwardMethod::Lfpi,
                backward_max_iter: 10_000,
                ..FoldingConfig::default()
            },
        );
        let c = vecf(&[1.0]);
        let x_star = vecf(&[-2.0]);
        match layer.backward_vjp(&c, &x_star, &vecf(&[1.0])) {
            Err(FoldError::Backward(SolveError::Divergence { .. })) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rate_study_fixed_start_keeps_forward_flat() {
        let layer = toy_layer(0.7);
        let c = vecf(&[1.0]);
        let rec = layer.rate_study(&c, StartMode::FixedPoint, 40, 0).unwrap();
        for e in &rec.forward_rel_err {
            assert!(*e < 1e-10, "forward error {e}");
        }
        // Backward error decays geometrically at ρ(Φ) = 0.7.
        let last = rec.backward_rel_err[rec.backward_rel_err.len() - 1];
        let prev = rec.backward_rel_err[rec.backward_rel_err.len() - 2];
        assert!((last / prev - 0.7).abs() < 0.01);
        assert!((rec.rho_estimate - 0.7).abs() < 1e-6);
    }

    #[test]
    fn rate_study_random_start_converges_both_passes() {
        let layer = toy_layer(0.7);
        let c = vecf(&[1.0]);
        let rec = layer.rate_study(&c, StartMode::Random, 80, 7).unwrap();
        assert!(rec.forward_rel_err.last().unwrap() < &1e-9);
        assert!(rec.backward_rel_err.last().unwrap() < &1e-9);
    }

    #[test]
    fn unfold_matches_independent_matricized_lfpi() {
        // The equivalence test at the heart of the engine: unfold_jacobian
        // must equal the LFPI iterate on (I − Φ)J = Ψ started at Ψ,
        // implemented here independently over the matricized unknowns.
        let layer = toy_layer(0.6);
        let c = vecf(&[0.8]);
        let x = layer.forward(&c).unwrap().x_star;
        let jac = assemble_jacobians(layer.step(), &x, &c).unwrap();
        let mut z = jac.psi.clone();
        for k in 1..=30 {
            z = jac.phi.matmul(&z).add(&jac.psi);
            let unf = layer.unfold_jacobian(&c, &x, k).unwrap();
            assert!(unf.sub(&z).norm_max() <= 1e-12, "k = {k}");
        }
    }
}
