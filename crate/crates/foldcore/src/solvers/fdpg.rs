//! Fast dual proximal gradient descent specialized to the denoising problem
//!
//!     x*(D) = argmin_x  ½‖x − d‖² + λ‖Dx‖₁,
//!
//! iterating on the dual variables with the soft threshold as the inner prox:
//!
//!     u_k     = Dᵀw_k + d
//!     y_{k+1} = w_k − ¼·D·u_k + ¼·T_{4λ}(D·u_k − 4·w_k)
//!     t_{k+1} = (1 + √(1 + 4t_k²)) / 2
//!     w_{k+1} = y_{k+1} + ((t_k − 1)/t_{k+1})·(y_{k+1} − y_k)
//!
//! The primal solution is recovered as u = Dᵀw + d.

use crate::linalg::{Matrix, Vector};
use crate::prox::{soft_threshold, soft_threshold_vjp};
use crate::solvers::{SolveReport, SolverError, SOLVE_DIVERGENCE_CUTOFF};
use crate::step::{DifferentiableStep, StepError};

/// Full FDPG state (w, y, t).
#[derive(Debug, Clone)]
pub struct FdpgState {
    pub w: Vector,
    pub y: Vector,
    pub t: f64,
}

impl FdpgState {
    /// Cold start w = y = 0, t = 1.
    pub fn zero(m: usize) -> Self {
        Self {
            w: Vector::zeros(m),
            y: Vector::zeros(m),
            t: 1.0,
        }
    }
}

/// One full FDPG update on (w, y, t).
pub fn fdpg_step(state: &FdpgState, d_mat: &Matrix, d_sig: &Vector, lambda: f64) -> FdpgState {
    assert!(state.t >= 1.0, "fdpg: t must be at least 1");
    assert_eq!(d_mat.cols(), d_sig.len(), "fdpg: D columns vs signal length");
    assert_eq!(d_mat.rows(), state.w.len(), "fdpg: D rows vs dual length");
    let u = d_mat.matvec_t(&state.w).add(d_sig);
    let du = d_mat.matvec(&u);
    let shrunk = soft_threshold(&du.axpy(-4.0, &state.w), 4.0 * lambda);
    let y_next = state.w.axpy(-0.25, &du).axpy(0.25, &shrunk);
    let t_next = 0.5 * (1.0 + (1.0 + 4.0 * state.t * state.t).sqrt());
    let beta = (state.t - 1.0) / t_next;
    let w_next = y_next.add(&y_next.sub(&state.y).scale(beta));
    FdpgState {
        w: w_next,
        y: y_next,
        t: t_next,
    }
}

/// Primal recovery u = Dᵀw + d.
pub fn fdpg_primal(w: &Vector, d_mat: &Matrix, d_sig: &Vector) -> Vector {
    d_mat.matvec_t(w).add(d_sig)
}

/// The FDPG update as a differentiable step for folding.
///
/// State is the concatenation (w, y) of length 2m; the parameter vector is
/// the row-major flattened D (length m·n). The momentum scalar t diverges
/// (t_k → ∞), so it is frozen at a large constant when building the
/// differentiable step: the effective momentum coefficient (t−1)/t⁺ becomes
/// a constant just below 1 and the fixed point is unchanged.
#[derive(Debug, Clone)]
pub struct FdpgFoldStep {
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
    pub signal: Vector,
    pub frozen_t: f64,
}

/// Default frozen momentum scalar; gives (t−1)/t⁺ ≈ 1 − 1.5e−8.
pub const FDPG_FROZEN_T: f64 = 1e8;

impl FdpgFoldStep {
    pub fn new(d_rows: usize, n: usize, lambda: f64, signal: Vector) -> Self {
        assert_eq!(signal.len(), n);
        assert!(lambda >= 0.0);
        Self {
            m: d_rows,
            n,
            lambda,
            signal,
            frozen_t: FDPG_FROZEN_T,
        }
    }

    pub fn beta(&self) -> f64 {
        let t = self.frozen_t;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        (t - 1.0) / t_next
    }

    fn unflatten_d(&self, c: &Vector) -> Matrix {
        assert_eq!(c.len(), self.m * self.n, "fdpg: parameter length");
        Matrix::new(self.m, self.n, c.to_vec()).expect("finite D")
    }

    /// Primal solution at a state, u = Dᵀw + d.
    pub fn primal(&self, state: &Vector, c: &Vector) -> Vector {
        let d_mat = self.unflatten_d(c);
        fdpg_primal(&state.slice(0, self.m), &d_mat, &self.signal)
    }

    /// Cotangent on the state for a cotangent on the primal readout
    /// u = Dᵀw + d: contributes D·cot_u on the w slot, nothing on y.
    pub fn primal_cot_state(&self, cot_primal: &Vector, c: &Vector) -> Vector {
        let d_mat = self.unflatten_d(c);
        Vector::concat(&[&d_mat.matvec(cot_primal), &Vector::zeros(self.m)])
    }

    /// Direct cotangent on D for the primal readout (holding the state
    /// fixed): cot_D[i][j] = w[i]·cot_u[j], flattened row-major.
    pub fn primal_cot_param(&self, state: &Vector, cot_primal: &Vector) -> Vector {
        let w = state.slice(0, self.m);
        let mut out = vec![0.0; self.m * self.n];
        for i in 0..self.m {
            for j in 0..self.n {
                out[i * self.n + j] = w[i] * cot_primal[j];
            }
        }
        Vector::from_raw(out)
    }
}

impl DifferentiableStep for FdpgFoldStep {
    fn state_dim(&self) -> usize {
        2 * self.m
    }
    fn param_dim(&self) -> usize {
        self.m * self.n
    }

    fn forward(&self, state: &Vector, c: &Vector) -> Result<Vector, StepError> {
        let d_mat = self.unflatten_d(c);
        let w = state.slice(0, self.m);
        let y = state.slice(self.m, 2 * self.m);
        let u = d_mat.matvec_t(&w).add(&self.signal);
        let du = d_mat.matvec(&u);
        let shrunk = soft_threshold(&du.axpy(-4.0, &w), 4.0 * self.lambda);
        let y_next = w.axpy(-0.25, &du).axpy(0.25, &shrunk);
        let beta = self.beta();
        let w_next = y_next.add(&y_next.sub(&y).scale(beta));
        Ok(Vector::concat(&[&w_next, &y_next]))
    }

    fn vjp_state(&self, state: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let d_mat = self.unflatten_d(c);
        let w = state.slice(0, self.m);
        let u = d_mat.matvec_t(&w).add(&self.signal);
        let du = d_mat.matvec(&u);
        let arg = du.axpy(-4.0, &w);
        let beta = self.beta();

        let vw = v.slice(0, self.m);
        let vy = v.slice(self.m, 2 * self.m);
        // w⁺ = (1+β)y⁺ − βy; y⁺ depends on w only.
        let q = vw.scale(1.0 + beta).add(&vy);
        // qᵀ·∂y⁺/∂w with ∂y⁺/∂w = I − ¼DDᵀ + ¼T'·(DDᵀ − 4I).
        let tq = soft_threshold_vjp(&arg, 4.0 * self.lambda, &q);
        let ddt = |z: &Vector| d_mat.matvec(&d_mat.matvec_t(z));
        let out_w = q
            .axpy(-0.25, &ddt(&q))
            .axpy(0.25, &ddt(&tq))
            .axpy(-1.0, &tq);
        let out_y = vw.scale(-beta);
        Ok(Vector::concat(&[&out_w, &out_y]))
    }

    fn vjp_param(&self, state: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let d_mat = self.unflatten_d(c);
        let w = state.slice(0, self.m);
        let u = d_mat.matvec_t(&w).add(&self.signal);
        let du = d_mat.matvec(&u);
        let arg = du.axpy(-4.0, &w);
        let beta = self.beta();

        let vw = v.slice(0, self.m);
        let vy = v.slice(self.m, 2 * self.m);
        let q = vw.scale(1.0 + beta).add(&vy);
        // Cotangent on a = Du from y⁺ = w − ¼a + ¼T(a − 4w).
        let tq = soft_threshold_vjp(&arg, 4.0 * self.lambda, &q);
        let cot_a = tq.sub(&q).scale(0.25);
        // a = D(Dᵀw + d): cot_D = cot_a ⊗ u + w ⊗ (Dᵀ·cot_a).
        let cot_u = d_mat.matvec_t(&cot_a);
        let mut out = vec![0.0; self.m * self.n];
        for i in 0..self.m {
            for j in 0..self.n {
                out[i * self.n + j] = cot_a[i] * u[j] + w[i] * cot_u[j];
            }
        }
        Ok(Vector::from_raw(out))
    }
}

/// Run the true FDPG iteration (momentum evolving) until the successive
/// state difference drops below tol. Returns the folded-step state (w, y)
/// with its fixed-point residual under the frozen-momentum step.
pub fn solve_fdpg(
    step: &FdpgFoldStep,
    c: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolverError> {
    let d_mat = Matrix::new(step.m, step.n, c.to_vec())
        .map_err(|e| SolverError::InvalidProblem(format!("bad D: {e}")))?;
    let mut st = FdpgState::zero(step.m);
    let mut iterations = 0;
    let mut converged = false;
    for k in 0..max_iter {
        let next = fdpg_step(&st, &d_mat, &step.signal, step.lambda);
        let diff = next
            .w
            .sub(&st.w)
            .norm_inf()
            .max(next.y.sub(&st.y).norm_inf());
        iterations = k + 1;
        let norm = next.w.norm_inf();
        if !norm.is_finite() || norm > SOLVE_DIVERGENCE_CUTOFF {
            return Err(SolverError::Divergence {
                norm,
                iteration: iterations,
            });
        }
        st = next;
        if diff < tol {
            converged = true;
            break;
        }
    }
    let state = Vector::concat(&[&st.w, &st.y]);
    let fixed_point_residual = step.forward(&state, c)?.sub(&state).norm_inf();
    let report = SolveReport {
        x_star: state,
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

/// The classical total-variation differencing operator: D[i][i] = 1,
/// D[i][i+1] = −1, shape (n−1)×n.
pub fn differencing_matrix(n: usize) -> Matrix {
    assert!(n >= 2);
    let mut d = Matrix::zeros(n - 1, n);
    for i in 0..n - 1 {
        d.set(i, i, 1.0);
        d.set(i, i + 1, -1.0);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::step::check_step;

    fn vecf(v: &[f64]) -> Vector {
        Vector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn lambda_zero_returns_signal() {
        // T_0 is the identity: the dual fixed point is w = 0 and the primal
        // recovery returns the unsmoothed signal.
        let d_sig = vecf(&[1.0, -2.0, 0.5]);
        let step = FdpgFoldStep::new(2, 3, 0.0, d_sig.clone());
        let c = Vector::from_raw(differencing_matrix(3).as_slice().to_vec());
        let rep = solve_fdpg(&step, &c, 1e-12, 5000).unwrap();
        let primal = step.primal(&rep.x_star, &c);
        assert!(primal.sub(&d_sig).norm_inf() < 1e-9);
    }

    #[test]
    fn two_point_tv_full_shrinkage() {
        // D = [1, −1], d = [0, 10], λ = 5: the TV term dominates and the
        // primal fixed point is the average [5, 5].
        let step = FdpgFoldStep::new(1, 2, 5.0, vecf(&[0.0, 10.0]));
        let c = vecf(&[1.0, -1.0]);
        let rep = solve_fdpg(&step, &c, 1e-12, 20_000).unwrap();
        let primal = step.primal(&rep.x_star, &c);
        assert!((primal[0] - 5.0).abs() < 1e-7, "{primal:?}");
        assert!((primal[1] - 5.0).abs() < 1e-7);
    }

    #[test]
    fn two_point_tv_partial_shrinkage() {
        // Same signal with λ = 2: jump shrinks by 2λ on each side → [2, 8].
        let step = FdpgFoldStep::new(1, 2, 2.0, vecf(&[0.0, 10.0]));
        let c = vecf(&[1.0, -1.0]);
        let rep = solve_fdpg(&step, &c, 1e-12, 20_000).unwrap();
        let primal = step.primal(&rep.x_star, &c);
        assert!((primal[0] - 2.0).abs() < 1e-7, "{primal:?}");
        assert!((primal[1] - 8.0).abs() < 1e-7);
    }

    #[test]
    fn frozen_step_fixed_point_matches_true_iteration() {
        let n = 6;
        let d0 = differencing_matrix(n);
        let sig = Vector::from_fn(n, |i| if i < 3 { 1.0 } else { -0.5 }).unwrap();
        let step = FdpgFoldStep::new(n - 1, n, 0.4, sig);
        let c = Vector::from_raw(d0.as_slice().to_vec());
        let rep = solve_fdpg(&step, &c, 1e-11, 50_000).unwrap();
        assert!(rep.fixed_point_residual < 1e-9, "{}", rep.fixed_point_residual);
    }

    #[test]
    fn fold_step_vjps_match_fd() {
        let n = 5;
        let sig = vecf(&[0.8, -0.3, 1.2, 0.1, -0.9]);
        let step = FdpgFoldStep::new(n - 1, n, 0.3, sig);
        // D slightly off the differencing pattern to stay away from
        // threshold kinks.
        let mut c = differencing_matrix(n).as_slice().to_vec();
        let mut s = 0.41_f64;
        for v in &mut c {
            s = (s * 613.17).fract();
            *v += 0.03 * (s - 0.5);
        }
        let c = vecf(&c);
        let rep = solve_fdpg(&step, &c, 1e-11, 50_000).unwrap();
        let chk = check_step(&step, &rep.x_star, &c).unwrap();
        assert!(chk.pass(), "max dev {}", chk.max_dev());
    }
}
