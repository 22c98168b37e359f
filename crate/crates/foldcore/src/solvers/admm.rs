//! Quadratic programming by ADMM on the standard form
//! min ½xᵀQx + pᵀx s.t. Ax = b, x ≥ 0, following the operator splitting
//! f(x) = objective on {Ax = b}, g(z) = indicator of z ≥ 0.
//!
//! One update of the state (x, z, u):
//!   1. solve [[Q+ρI, Aᵀ],[A, 0]]·[x⁺; ν] = [−p + ρ(z−u); b]
//!   2. z⁺ = (x⁺ + u)₊
//!   3. u⁺ = u + x⁺ − z⁺
//!
//! The step is differentiable in the full problem data: the linear solve is
//! differentiated analytically through transposed solves with the same KKT
//! factors, the orthant projection by its clamp mask, and the dual update
//! directly.

use crate::linalg::{lu_factor, LuFactors, Matrix, Vector};
use crate::solvers::qp::{flatten_qp, unflatten_qp, QpGeneral, QpStandard, ThetaLayout};
use crate::solvers::{
    qp_general_to_standard, solve_fixed_point, SolveReport, SolverError, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use crate::step::{DifferentiableStep, StepError};

/// One ADMM update on (x, z, u) for a fixed standard-form QP.
pub fn admm_qp_step(
    std: &QpStandard,
    x: &Vector,
    z: &Vector,
    u: &Vector,
    rho: f64,
) -> Result<(Vector, Vector, Vector), StepError> {
    let step = AdmmQpStep::new(std.n(), std.m(), rho);
    let state = Vector::concat(&[x, z, u]);
    let theta = flatten_qp(std);
    let next = step.forward(&state, &theta)?;
    let n = std.n();
    Ok((next.slice(0, n), next.slice(n, 2 * n), next.slice(2 * n, 3 * n)))
}

/// The ADMM update as a differentiable step. State is the concatenation
/// (x, z, u) of length 3n; parameters are the flattened problem data
/// [vec(Q); p; vec(A); b].
#[derive(Debug, Clone)]
pub struct AdmmQpStep {
    n: usize,
    m: usize,
    rho: f64,
}

impl AdmmQpStep {
    pub fn new(n: usize, m: usize, rho: f64) -> Self {
        assert!(rho > 0.0, "admm: rho must be positive");
        Self { n, m, rho }
    }

    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout {
            n: self.n,
            m: self.m,
        }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn kkt(&self, std: &QpStandard) -> Matrix {
        let n = self.n;
        let m = self.m;
        let mut kkt = Matrix::zeros(n + m, n + m);
        kkt.set_block(0, 0, &std.q);
        for i in 0..n {
            kkt.set(i, i, kkt.get(i, i) + self.rho);
        }
        if m > 0 {
            kkt.set_block(n, 0, &std.a);
            kkt.set_block(0, n, &std.a.transpose());
        }
        kkt
    }

    fn rhs(&self, std: &QpStandard, z: &Vector, u: &Vector) -> Vector {
        let mut r = Vec::with_capacity(self.n + self.m);
        for i in 0..self.n {
            r.push(-std.p[i] + self.rho * (z[i] - u[i]));
        }
        for k in 0..self.m {
            r.push(std.b[k]);
        }
        Vector::from_raw(r)
    }

    /// Step-1 results at the given state: (x⁺, ν) and the KKT factors.
    fn solve_step1(
        &self,
        std: &QpStandard,
        z: &Vector,
        u: &Vector,
    ) -> Result<(Vector, Vector, LuFactors), StepError> {
        let kkt = self.kkt(std);
        let factors = lu_factor(&kkt).map_err(|_| StepError::SingularKkt)?;
        let sol = factors.solve(&self.rhs(std, z, u)).map_err(|_| StepError::SingularKkt)?;
        Ok((
            sol.slice(0, self.n),
            sol.slice(self.n, self.n + self.m),
            factors,
        ))
    }

    fn split_state(&self, state: &Vector) -> (Vector, Vector, Vector) {
        let n = self.n;
        assert_eq!(state.len(), 3 * n, "admm state must have length 3n");
        (state.slice(0, n), state.slice(n, 2 * n), state.slice(2 * n, 3 * n))
    }
}

impl DifferentiableStep for AdmmQpStep {
    fn state_dim(&self) -> usize {
        3 * self.n
    }

    fn param_dim(&self) -> usize {
        self.layout().total()
    }

    fn forward(&self, state: &Vector, theta: &Vector) -> Result<Vector, StepError> {
        let std = unflatten_qp(theta, self.layout());
        let (_x, z, u) = self.split_state(state);
        let (x_next, _nu, _) = self.solve_step1(&std, &z, &u)?;
        let z_next = Vector::from_raw(
            (0..self.n)
                .map(|i| (x_next[i] + u[i]).max(0.0))
                .collect(),
        );
        let u_next = u.add(&x_next).sub(&z_next);
        Ok(Vector::concat(&[&x_next, &z_next, &u_next]))
    }

    fn vjp_state(&self, state: &Vector, theta: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let std = unflatten_qp(theta, self.layout());
        let (_x, z, u) = self.split_state(state);
        let (x_next, _nu, factors) = self.solve_step1(&std, &z, &u)?;
        let n = self.n;
        let vx = v.slice(0, n);
        let vz = v.slice(n, 2 * n);
        let vu = v.slice(2 * n, 3 * n);

        // Reverse of u⁺ = u + x⁺ − z⁺.
        let mut cot_xn = vx.add(&vu);
        let cot_zn = vz.sub(&vu);
        let mut cot_u = vu.clone();
        // Reverse of z⁺ = (x⁺ + u)₊ with the clamp mask.
        let masked = Vector::from_raw(
            (0..n)
                .map(|i| if x_next[i] + u[i] > 0.0 { cot_zn[i] } else { 0.0 })
                .collect(),
        );
        cot_xn = cot_xn.add(&masked);
        cot_u = cot_u.add(&masked);
        // Reverse of the KKT solve w.r.t. its right-hand side.
        let s = factors
            .solve_transpose(&Vector::concat(&[&cot_xn, &Vector::zeros(self.m)]))
            .map_err(|_| StepError::SingularKkt)?;
        let s_x = s.slice(0, n);
        let cot_z = s_x.scale(self.rho);
        cot_u = cot_u.add(&s_x.scale(-self.rho));

        Ok(Vector::concat(&[&Vector::zeros(n), &cot_z, &cot_u]))
    }

    fn vjp_param(&self, state: &Vector, theta: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let std = unflatten_qp(theta, self.layout());
        let (_x, z, u) = self.split_state(state);
        let (x_next, nu, factors) = self.solve_step1(&std, &z, &u)?;
        let n = self.n;
        let m = self.m;
        let layout = self.layout();
        let vx = v.slice(0, n);
        let vz = v.slice(n, 2 * n);
        let vu = v.slice(2 * n, 3 * n);

        let mut cot_xn = vx.add(&vu);
        let cot_zn = vz.sub(&vu);
        let masked = Vector::from_raw(
            (0..n)
                .map(|i| if x_next[i] + u[i] > 0.0 { cot_zn[i] } else { 0.0 })
                .collect(),
        );
        cot_xn = cot_xn.add(&masked);

        // s = M⁻ᵀ [cot_xn; 0]; w = (x⁺, ν) is the forward solve result.
        let s = factors
            .solve_transpose(&Vector::concat(&[&cot_xn, &Vector::zeros(m)]))
            .map_err(|_| StepError::SingularKkt)?;
        let w = Vector::concat(&[&x_next, &nu]);
        let s_x = s.slice(0, n);
        let s_nu = s.slice(n, n + m);

        let mut cot = vec![0.0; layout.total()];
        // d(M⁻¹r)/dM: cotangent on M is −s wᵀ; scatter into Q and A slots
        // (A appears in both off-diagonal blocks).
        for i in 0..n {
            for j in 0..n {
                cot[layout.q(i, j)] += -s[i] * w[j];
            }
        }
        for k in 0..m {
            for j in 0..n {
                cot[layout.a(k, j)] += -s[n + k] * w[j] - s[j] * w[n + k];
            }
        }
        // r = [−p + ρ(z−u); b].
        for i in 0..n {
            cot[layout.p(i)] += -s_x[i];
        }
        for k in 0..m {
            cot[layout.b(k)] += s_nu[k];
        }
        Ok(Vector::from_raw(cot))
    }
}

/// Converged solution of a general-form QP solved through the standard-form
/// ADMM iteration.
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Recovered original variables x = x⁺ − x⁻.
    pub x: Vector,
    /// Multipliers for Ax = b.
    pub eq_duals: Vector,
    /// Multipliers for Gx ≤ h (nonnegative at convergence).
    pub ineq_duals: Vector,
    /// Converged ADMM state (x, z, u) of the standard-form problem.
    pub state: Vector,
    pub report: SolveReport,
}

/// Solve a standard-form QP by ADMM from the zero state. Returns the
/// converged state (x, z, u) and the report.
pub fn solve_qp_standard(
    std: &QpStandard,
    rho: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vector, SolveReport), SolverError> {
    let step = AdmmQpStep::new(std.n(), std.m(), rho);
    let theta = flatten_qp(std);
    let report = solve_fixed_point(&step, &theta, &Vector::zeros(3 * std.n()), tol, max_iter)?;
    let state = report.x_star.clone();
    Ok((state, report))
}

/// Solve a general-form QP: convert to standard form, run ADMM, recover the
/// original variables and multipliers.
///
/// The multiplier for x ≥ 0 in standard form is w = −ρu at convergence; the
/// original inequality multipliers are its slack block, which coincides with
/// the trailing equality multipliers of the KKT system.
pub fn solve_qp_general(
    gp: &QpGeneral,
    rho: f64,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution, SolverError> {
    let sf = qp_general_to_standard(gp);
    let (state, mut report) = solve_qp_standard(&sf.std, rho, tol, max_iter)?;
    let nz = sf.nz();
    let x_std = state.slice(0, nz);
    let u_std = state.slice(2 * nz, 3 * nz);
    let x = sf.recover(&x_std);

    let n = gp.n();
    let m_in = gp.m_in();
    let ineq_duals = Vector::from_raw(
        (0..m_in)
            .map(|l| -rho * u_std[2 * n + l])
            .collect::<Vec<_>>(),
    );
    // Equality multipliers from one KKT solve at the converged state.
    let step = AdmmQpStep::new(sf.std.n(), sf.std.m(), rho);
    let z_std = state.slice(nz, 2 * nz);
    let (_xn, nu, _) = step
        .solve_step1(&sf.std, &z_std, &u_std)
        .map_err(SolverError::Step)?;
    let eq_duals = nu.slice(0, gp.m_eq());

    report.dual = Some(Vector::concat(&[&eq_duals, &ineq_duals]));
    Ok(QpSolution {
        x,
        eq_duals,
        ineq_duals,
        state,
        report,
    })
}

/// Convenience defaults matching the solver-wide tolerances.
pub fn solve_qp_general_default(gp: &QpGeneral) -> Result<QpSolution, SolverError> {
    solve_qp_general(gp, 1.0, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::step::{check_step, fd_jacobian, Wrt, DEFAULT_FD_STEP};

    fn vecf(v: &[f64]) -> Vector {
        Vector::new(v.to_vec()).unwrap()
    }

    fn symmetric_qp() -> QpGeneral {
        // min ½xᵀIx − x₁ − x₂ s.t. x₁ + x₂ = 1 → x = [0.5, 0.5].
        QpGeneral::new(
            Matrix::identity(2),
            vecf(&[-1.0, -1.0]),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vecf(&[1.0]),
            Matrix::zeros(0, 2),
            Vector::zeros(0),
        )
        .unwrap()
    }

    #[test]
    fn admm_symmetric_qp_fixed_point() {
        let sol = solve_qp_general(&symmetric_qp(), 1.0, 1e-10, 10_000).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-7, "{:?}", sol.x);
        assert!((sol.x[1] - 0.5).abs() < 1e-7);
        assert!(sol.report.fixed_point_residual < 1e-9);
    }

    #[test]
    fn admm_active_bound_qp() {
        // min ½‖x‖² − 2x₁ s.t. x₁ + x₂ = 1, x ≥ 0 → x = [1, 0] with μ₂ = 1.
        let gp = QpGeneral::new(
            Matrix::identity(2),
            vecf(&[-2.0, 0.0]),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vecf(&[1.0]),
            Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap(),
            vecf(&[0.0, 0.0]),
        )
        .unwrap();
        let sol = solve_qp_general(&gp, 1.0, 1e-10, 20_000).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-6, "{:?}", sol.x);
        assert!(sol.x[1].abs() < 1e-6);
        // Multiplier for −x₂ ≤ 0: from KKT x₂ − 0 + y_A − μ₂ = 0 with
        // stationarity at [1,0]: 1 − 2 + y = 0 → y = 1; 0 + 1 − μ₂ = 0.
        assert!((sol.ineq_duals[1] - 1.0).abs() < 1e-5, "{:?}", sol.ineq_duals);
        assert!(sol.ineq_duals[0].abs() < 1e-5);
    }

    #[test]
    fn first_iterate_from_zero_state_is_equality_constrained_solve() {
        let gp = symmetric_qp();
        let sf = qp_general_to_standard(&gp);
        let step = AdmmQpStep::new(sf.std.n(), sf.std.m(), 1.0);
        let theta = flatten_qp(&sf.std);
        let state0 = Vector::zeros(3 * sf.std.n());
        let next = step.forward(&state0, &theta).unwrap();
        // Step 1 with z = u = 0 solves the equality-constrained problem
        // with the ρ-regularized Hessian.
        let kkt = step.kkt(&sf.std);
        let rhs = step.rhs(&sf.std, &Vector::zeros(sf.std.n()), &Vector::zeros(sf.std.n()));
        let sol = crate::linalg::lu_solve(&kkt, &rhs).unwrap();
        for i in 0..sf.std.n() {
            assert!((next[i] - sol[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn admm_step_vjps_match_finite_differences() {
        // Random-ish interior point and data; compares both VJPs to the
        // finite-difference oracle.
        let gp = QpGeneral::new(
            Matrix::from_rows(&[vec![2.0, 0.4], vec![0.4, 1.5]]).unwrap(),
            vecf(&[-1.0, 0.3]),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vecf(&[1.0]),
            Matrix::from_rows(&[vec![-1.0, 0.0]]).unwrap(),
            vecf(&[0.2]),
        )
        .unwrap();
        let sf = qp_general_to_standard(&gp);
        let step = AdmmQpStep::new(sf.std.n(), sf.std.m(), 1.0);
        let theta = flatten_qp(&sf.std);
        // A state away from clamp kinks.
        let nz = sf.std.n();
        let mut s = 0.217_f64;
        let state = Vector::from_fn(3 * nz, |_| {
            s = (s * 661.77).fract();
            0.3 + 0.4 * s
        })
        .unwrap();
        let rep = check_step(&step, &state, &theta).unwrap();
        assert!(
            rep.max_dev() < 1e-4,
            "state dev {} param dev {}",
            rep.max_dev_state,
            rep.max_dev_param
        );
    }

    #[test]
    fn admm_step_state_jacobian_ignores_x_slot() {
        let gp = symmetric_qp();
        let sf = qp_general_to_standard(&gp);
        let step = AdmmQpStep::new(sf.std.n(), sf.std.m(), 1.0);
        let theta = flatten_qp(&sf.std);
        let nz = sf.std.n();
        let state = Vector::from_fn(3 * nz, |i| 0.2 + 0.01 * i as f64).unwrap();
        let j = fd_jacobian(&step, &state, &theta, Wrt::State, DEFAULT_FD_STEP).unwrap();
        for i in 0..3 * nz {
            for jcol in 0..nz {
                assert!(j.get(i, jcol).abs() < 1e-9, "x-slot column {jcol} row {i}");
            }
        }
    }
}
