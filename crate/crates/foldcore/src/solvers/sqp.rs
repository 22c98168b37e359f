//! Sequential quadratic programming with a folded ADMM subproblem.
//!
//! For a problem min f(x, c) s.t. h(x) = 0, g(x) ≤ 0, the operator T solves
//! the QP
//!
//!     T(x, λ) = argmin_d  ∇f(x)ᵀd + dᵀ∇²L(x, λ)d
//!               s.t.      h(x) + ∇h(x)ᵀd = 0,
//!                         g(x) + ∇g(x)ᵀd ≤ 0,
//!
//! and one update is
//!
//!     (d, μ) = T(x_k, λ_k),   x_{k+1} = x_k + α·d,   λ_{k+1} = α(μ − λ_k).
//!
//! The dual update above is deliberately kept in this exact form; the more
//! common damped form λ + α(μ − λ) is available behind [`DualUpdate`]. At a
//! KKT point d = 0 for either choice, so the x-part of the fixed point is
//! the problem's solution.
//!
//! The subproblem is solved and differentiated through the folded ADMM-QP
//! solver: the step's VJPs backpropagate through the subproblem solution by
//! solving the ADMM step's own differential fixed-point system (nested
//! folding), then pulling the resulting data cotangents back through the
//! standard-form conversion and the problem's derivative structure.

use crate::linalg::{FnOperator, Matrix, Vector};
use crate::linsolve::krylov_solve;
use crate::solvers::admm::AdmmQpStep;
use crate::solvers::qp::{flatten_qp, qp_general_to_standard, QpGeneral, StandardForm};
use crate::solvers::{solve_fixed_point, SolverError};
use crate::step::{DifferentiableStep, StepError};

/// Which dual update the SQP iteration uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualUpdate {
    /// λ⁺ = α(μ − λ).
    Verbatim,
    /// λ⁺ = λ + α(μ − λ).
    Damped,
}

/// Problem description for SQP: objective, constraints, their first
/// derivatives, and the VJP hooks the step needs to backpropagate through
/// the subproblem data. Parameters c enter the objective only.
pub trait SqpProblem: Send + Sync {
    fn n(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn m_eq(&self) -> usize;
    fn m_in(&self) -> usize;

    fn objective(&self, x: &Vector, c: &Vector) -> f64;
    fn obj_grad(&self, x: &Vector, c: &Vector) -> Vector;
    /// vᵀ·∂(∇f)/∂x.
    fn obj_grad_vjp_x(&self, x: &Vector, c: &Vector, v: &Vector) -> Vector;
    /// vᵀ·∂(∇f)/∂c.
    fn obj_grad_vjp_c(&self, x: &Vector, c: &Vector, v: &Vector) -> Vector;

    fn eq(&self, x: &Vector) -> Vector;
    /// Rows are ∇hⱼᵀ (m_eq × n).
    fn eq_jac(&self, x: &Vector) -> Matrix;
    /// Σᵢⱼ cotᵢⱼ·∂(eq_jac)ᵢⱼ/∂x.
    fn eq_jac_vjp_x(&self, x: &Vector, cot: &Matrix) -> Vector;

    fn ineq(&self, x: &Vector) -> Vector;
    /// Rows are ∇gⱼᵀ (m_in × n).
    fn ineq_jac(&self, x: &Vector) -> Matrix;
    fn ineq_jac_vjp_x(&self, x: &Vector, cot: &Matrix) -> Vector;

    /// ∇²ₓₓL(x, λ, c) with λ the inequality multipliers.
    fn lag_hess(&self, x: &Vector, lam: &Vector, c: &Vector) -> Matrix;
    /// Cotangent pullback of the Lagrangian Hessian: returns contributions
    /// to (x, λ, c).
    fn lag_hess_vjp(
        &self,
        x: &Vector,
        lam: &Vector,
        c: &Vector,
        cot: &Matrix,
    ) -> (Vector, Vector, Vector);
}

/// One SQP update as a differentiable step. State is [x; λ] with λ the
/// inequality multipliers (equality constraints here are affine, so they do
/// not enter the Lagrangian Hessian).
pub struct SqpStep<P> {
    pub problem: P,
    pub alpha: f64,
    pub dual_update: DualUpdate,
    pub sub_rho: f64,
    pub sub_tol: f64,
    pub sub_max_iter: usize,
    pub nested_backward_tol: f64,
}

impl<P: SqpProblem> SqpStep<P> {
    pub fn new(problem: P, alpha: f64, dual_update: DualUpdate) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "sqp: alpha must be in (0, 1]");
        Self {
            problem,
            alpha,
            dual_update,
            sub_rho: 1.0,
            sub_tol: 1e-12,
            sub_max_iter: 100_000,
            nested_backward_tol: 1e-12,
        }
    }

    fn split(&self, state: &Vector) -> (Vector, Vector) {
        let n = self.problem.n();
        let m = self.problem.m_in();
        assert_eq!(state.len(), n + m, "sqp state is [x; lambda]");
        (state.slice(0, n), state.slice(n, n + m))
    }

    /// The QP subproblem in d at (x, λ, c), in general form.
    fn build_subproblem(&self, x: &Vector, lam: &Vector, c: &Vector) -> Result<QpGeneral, StepError> {
        // min ∇fᵀd + dᵀ∇²L d  ≡  min ½dᵀ(2∇²L)d + ∇fᵀd.
        let q = self.problem.lag_hess(x, lam, c).scale(2.0);
        let p = self.problem.obj_grad(x, c);
        let a = self.problem.eq_jac(x);
        let b = self.problem.eq(x).scale(-1.0);
        let g = self.problem.ineq_jac(x);
        let h = self.problem.ineq(x).scale(-1.0);
        QpGeneral::new(q, p, a, b, g, h)
            .map_err(|e| StepError::SubproblemInfeasible(format!("bad subproblem data: {e}")))
    }

    /// Solve the subproblem at (x, λ, c). Returns the standard form, the
    /// converged ADMM state, the step direction d and the multipliers μ.
    fn solve_subproblem(
        &self,
        x: &Vector,
        lam: &Vector,
        c: &Vector,
    ) -> Result<(StandardForm, Vector, Vector, Vector), StepError> {
        let sub = self.build_subproblem(x, lam, c)?;
        let sf = qp_general_to_standard(&sub);
        let step = AdmmQpStep::new(sf.std.n(), sf.std.m(), self.sub_rho);
        let theta = flatten_qp(&sf.std);
        let state0 = Vector::zeros(3 * sf.std.n());
        let report = solve_fixed_point(&step, &theta, &state0, self.sub_tol, self.sub_max_iter)
            .map_err(|e| match e {
                SolverError::Divergence { .. } => StepError::SubproblemInfeasible(format!(
                    "subproblem ADMM diverged (infeasible or unbounded?): {e}"
                )),
                other => StepError::Nested {
                    context: "sqp subproblem",
                    message: other.to_string(),
                },
            })?;
        let s_state = report.x_star;
        let nz = sf.nz();
        let d = sf.recover(&s_state.slice(0, nz));
        let n = self.problem.n();
        let m_in = self.problem.m_in();
        // μ = −ρ·u on the slack block (multiplier of z ≥ 0 at convergence).
        let mu = Vector::from_raw(
            (0..m_in)
                .map(|l| -self.sub_rho * s_state[2 * nz + 2 * n + l])
                .collect::<Vec<_>>(),
        );
        Ok((sf, s_state, d, mu))
    }

    /// Step direction and subproblem multipliers at (x, λ); used by tests
    /// and KKT diagnostics.
    pub fn subproblem_duals(
        &self,
        x: &Vector,
        lam: &Vector,
        c: &Vector,
    ) -> Result<(Vector, Vector), StepError> {
        let (_sf, _s, d, mu) = self.solve_subproblem(x, lam, c)?;
        Ok((d, mu))
    }

    fn dual_next(&self, lam: &Vector, mu: &Vector) -> Vector {
        match self.dual_update {
            DualUpdate::Verbatim => mu.sub(lam).scale(self.alpha),
            DualUpdate::Damped => lam.add(&mu.sub(lam).scale(self.alpha)),
        }
    }

    /// Shared reverse pass: cotangents on (x⁺, λ⁺) pulled back to
    /// (x, λ, c).
    fn vjp_common(
        &self,
        state: &Vector,
        c: &Vector,
        v: &Vector,
    ) -> Result<(Vector, Vector, Vector), StepError> {
        let (x, lam) = self.split(state);
        let n = self.problem.n();
        let m_in = self.problem.m_in();
        let (sf, s_state, _d, _mu) = self.solve_subproblem(&x, &lam, c)?;
        let nz = sf.nz();

        let vx = v.slice(0, n);
        let vlam = v.slice(n, n + m_in);

        // x⁺ = x + α·d, λ⁺ = α(μ − λ) (or damped).
        let cot_d = vx.scale(self.alpha);
        let cot_mu = vlam.scale(self.alpha);
        let (cot_x_direct, cot_lam_direct) = match self.dual_update {
            DualUpdate::Verbatim => (vx.clone(), vlam.scale(-self.alpha)),
            DualUpdate::Damped => (vx.clone(), vlam.scale(1.0 - self.alpha)),
        };

        // Cotangent on the converged ADMM state: d = x⁺ᵇˡᵒᶜᵏ − x⁻ᵇˡᵒᶜᵏ of
        // the x slot, μ = −ρ·u on the slack block of the u slot.
        let mut g_s = vec![0.0; 3 * nz];
        for i in 0..n {
            g_s[i] += cot_d[i];
            g_s[n + i] -= cot_d[i];
        }
        for l in 0..m_in {
            g_s[2 * nz + 2 * n + l] += -self.sub_rho * cot_mu[l];
        }
        let g_s = Vector::from_raw(g_s);

        // Nested differential fixed-point solve: v_sᵀ(I − Φ_admm) = g_sᵀ.
        let admm = AdmmQpStep::new(sf.std.n(), sf.std.m(), self.sub_rho);
        let theta = flatten_qp(&sf.std);
        let op = FnOperator::new(3 * nz, 3 * nz, |w: &Vector| {
            let phi_t_w = admm
                .vjp_state(&s_state, &theta, w)
                .map_err(|_| crate::linalg::LinalgError::NonFinite("admm vjp in sqp backward"))?;
            Ok(w.sub(&phi_t_w))
        });
        let sol = krylov_solve(&op, &g_s, &Vector::zeros(3 * nz), self.nested_backward_tol, 40 * nz + 600)
            .map_err(|e| StepError::Nested {
                context: "sqp nested backward",
                message: e.to_string(),
            })?;
        let cot_theta = admm.vjp_param(&s_state, &theta, &sol.solution)?;
        let gc = sf.pullback_theta(&cot_theta);

        // Distribute the general-form data cotangents through the problem's
        // derivative structure.
        let (hx, hlam, hc) = self
            .problem
            .lag_hess_vjp(&x, &lam, c, &gc.q.scale(2.0));
        let px = self.problem.obj_grad_vjp_x(&x, c, &gc.p);
        let pc = self.problem.obj_grad_vjp_c(&x, c, &gc.p);
        let ax = self.problem.eq_jac_vjp_x(&x, &gc.a);
        let bx = self.problem.eq_jac(&x).matvec_t(&gc.b).scale(-1.0);
        let gx = self.problem.ineq_jac_vjp_x(&x, &gc.g);
        let hx2 = self.problem.ineq_jac(&x).matvec_t(&gc.h).scale(-1.0);

        let cot_x = cot_x_direct
            .add(&hx)
            .add(&px)
            .add(&ax)
            .add(&bx)
            .add(&gx)
            .add(&hx2);
        let cot_lam = cot_lam_direct.add(&hlam);
        let cot_c = hc.add(&pc);
        Ok((cot_x, cot_lam, cot_c))
    }
}

impl<P: SqpProblem> DifferentiableStep for SqpStep<P> {
    fn state_dim(&self) -> usize {
        self.problem.n() + self.problem.m_in()
    }
    fn param_dim(&self) -> usize {
        self.problem.param_dim()
    }

    fn forward(&self, state: &Vector, c: &Vector) -> Result<Vector, StepError> {
        let (x, lam) = self.split(state);
        let (_sf, _s, d, mu) = self.solve_subproblem(&x, &lam, c)?;
        let x_next = x.axpy(self.alpha, &d);
        let lam_next = self.dual_next(&lam, &mu);
        Ok(Vector::concat(&[&x_next, &lam_next]))
    }

    fn vjp_state(&self, state: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let (cot_x, cot_lam, _cot_c) = self.vjp_common(state, c, v)?;
        Ok(Vector::concat(&[&cot_x, &cot_lam]))
    }

    fn vjp_param(&self, state: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let (_cot_x, _cot_lam, cot_c) = self.vjp_common(state, c, v)?;
        Ok(cot_c)
    }
}

// ── Shipped problems ────────────────────────────────────────────────

/// Risk-constrained portfolio selection in minimization form:
///
///     min −cᵀx   s.t.  Σx = 1,  xᵀVx ≤ γ,  x ≥ 0,
///
/// with the predicted prices c as the layer parameters. Inequality rows are
/// ordered [risk; −x₁; …; −xₙ].
pub struct PortfolioProblem {
    pub v: Matrix,
    pub gamma: f64,
}

impl PortfolioProblem {
    pub fn new(v: Matrix, gamma: f64) -> Self {
        assert!(v.is_square() && v.is_symmetric(1e-10), "V must be symmetric");
        assert!(gamma > 0.0);
        Self { v, gamma }
    }
}

impl SqpProblem for PortfolioProblem {
    fn n(&self) -> usize {
        self.v.rows()
    }
    fn param_dim(&self) -> usize {
        self.v.rows()
    }
    fn m_eq(&self) -> usize {
        1
    }
    fn m_in(&self) -> usize {
        1 + self.v.rows()
    }

    fn objective(&self, x: &Vector, c: &Vector) -> f64 {
        -c.dot(x)
    }
    fn obj_grad(&self, _x: &Vector, c: &Vector) -> Vector {
        c.scale(-1.0)
    }
    fn obj_grad_vjp_x(&self, _x: &Vector, _c: &Vector, _v: &Vector) -> Vector {
        Vector::zeros(self.n())
    }
    fn obj_grad_vjp_c(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Vector {
        v.scale(-1.0)
    }

    fn eq(&self, x: &Vector) -> Vector {
        Vector::from_raw(vec![x.iter().sum::<f64>() - 1.0])
    }
    fn eq_jac(&self, _x: &Vector) -> Matrix {
        Matrix::new(1, self.n(), vec![1.0; self.n()]).expect("finite")
    }
    fn eq_jac_vjp_x(&self, _x: &Vector, _cot: &Matrix) -> Vector {
        Vector::zeros(self.n())
    }

    fn ineq(&self, x: &Vector) -> Vector {
        let mut g = Vec::with_capacity(1 + self.n());
        g.push(x.dot(&self.v.matvec(x)) - self.gamma);
        for i in 0..self.n() {
            g.push(-x[i]);
        }
        Vector::from_raw(g)
    }
    fn ineq_jac(&self, x: &Vector) -> Matrix {
        let n = self.n();
        let mut j = Matrix::zeros(1 + n, n);
        let vx = self.v.matvec(x).scale(2.0);
        for jcol in 0..n {
            j.set(0, jcol, vx[jcol]);
        }
        for i in 0..n {
            j.set(1 + i, i, -1.0);
        }
        j
    }
    fn ineq_jac_vjp_x(&self, _x: &Vector, cot: &Matrix) -> Vector {
        // Only the risk row depends on x: ∂(2Vx)ⱼ/∂xₗ = 2Vⱼₗ.
        let n = self.n();
        let row0 = Vector::from_raw((0..n).map(|j| cot.get(0, j)).collect::<Vec<_>>());
        self.v.matvec_t(&row0).scale(2.0)
    }

    fn lag_hess(&self, _x: &Vector, lam: &Vector, _c: &Vector) -> Matrix {
        self.v.scale(2.0 * lam[0])
    }
    fn lag_hess_vjp(
        &self,
        _x: &Vector,
        _lam: &Vector,
        _c: &Vector,
        cot: &Matrix,
    ) -> (Vector, Vector, Vector) {
        // ⟨cot, 2λ₀V⟩ differentiates to 2⟨cot, V⟩ on λ₀ only.
        let mut acc = 0.0;
        for i in 0..self.n() {
            for j in 0..self.n() {
                acc += cot.get(i, j) * self.v.get(i, j);
            }
        }
        let mut lam_cot = Vector::zeros(self.m_in());
        lam_cot.set(0, 2.0 * acc);
        (Vector::zeros(self.n()), lam_cot, Vector::zeros(self.param_dim()))
    }
}

/// min ½‖x − c‖² s.t. ‖x‖² ≤ 1: projection onto the unit ball, used as a
/// hand-checkable SQP reference problem.
pub struct BallProjectionProblem {
    pub n: usize,
}

impl SqpProblem for BallProjectionProblem {
    fn n(&self) -> usize {
        self.n
    }
    fn param_dim(&self) -> usize {
        self.n
    }
    fn m_eq(&self) -> usize {
        0
    }
    fn m_in(&self) -> usize {
        1
    }

    fn objective(&self, x: &Vector, c: &Vector) -> f64 {
        let d = x.sub(c);
        0.5 * d.dot(&d)
    }
    fn obj_grad(&self, x: &Vector, c: &Vector) -> Vector {
        x.sub(c)
    }
    fn obj_grad_vjp_x(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Vector {
        v.clone()
    }
    fn obj_grad_vjp_c(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Vector {
        v.scale(-1.0)
    }

    fn eq(&self, _x: &Vector) -> Vector {
        Vector::zeros(0)
    }
    fn eq_jac(&self, _x: &Vector) -> Matrix {
        Matrix::zeros(0, self.n)
    }
    fn eq_jac_vjp_x(&self, _x: &Vector, _cot: &Matrix) -> Vector {
        Vector::zeros(self.n)
    }

    fn ineq(&self, x: &Vector) -> Vector {
        Vector::from_raw(vec![x.dot(x) - 1.0])
    }
    fn ineq_jac(&self, x: &Vector) -> Matrix {
        Matrix::new(1, self.n, x.scale(2.0).to_vec()).expect("finite")
    }
    fn ineq_jac_vjp_x(&self, _x: &Vector, cot: &Matrix) -> Vector {
        Vector::from_raw((0..self.n).map(|j| 2.0 * cot.get(0, j)).collect::<Vec<_>>())
    }

    fn lag_hess(&self, _x: &Vector, lam: &Vector, _c: &Vector) -> Matrix {
        // ∇²(½‖x−c‖²) + λ·∇²(‖x‖²−1) = (1 + 2λ)·I.
        Matrix::identity(self.n).scale(1.0 + 2.0 * lam[0])
    }
    fn lag_hess_vjp(
        &self,
        _x: &Vector,
        _lam: &Vector,
        _c: &Vector,
        cot: &Matrix,
    ) -> (Vector, Vector, Vector) {
        let trace: f64 = (0..self.n).map(|i| cot.get(i, i)).sum();
        let mut lam_cot = Vector::zeros(1);
        lam_cot.set(0, 2.0 * trace);
        (Vector::zeros(self.n), lam_cot, Vector::zeros(self.n))
    }
}

/// KKT residual of an inequality/equality constrained problem at (x, μ, y):
/// max of stationarity, primal feasibility, dual feasibility, and
/// complementarity violations.
pub fn kkt_residual<P: SqpProblem>(
    problem: &P,
    x: &Vector,
    mu: &Vector,
    y_eq: &Vector,
    c: &Vector,
) -> f64 {
    let mut stat = problem.obj_grad(x, c);
    if problem.m_eq() > 0 {
        stat = stat.add(&problem.eq_jac(x).matvec_t(y_eq));
    }
    if problem.m_in() > 0 {
        stat = stat.add(&problem.ineq_jac(x).matvec_t(mu));
    }
    let mut r = stat.norm_inf();
    for i in 0..problem.m_eq() {
        r = r.max(problem.eq(x)[i].abs());
    }
    let g = problem.ineq(x);
    for i in 0..problem.m_in() {
        r = r.max(g[i].max(0.0));
        r = r.max((-mu[i]).max(0.0));
        r = r.max((mu[i] * g[i]).abs());
    }
    r
}
