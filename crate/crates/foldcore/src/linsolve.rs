//! Iterative linear solvers over implicit operators: linear fixed-point
//! iteration (the scheme a backward pass of unrolling implicitly performs)
//! and a restarted GMRES alternative that needs only `apply`.

use crate::linalg::{LinalgError, LinearOperator, Vector};
use thiserror::Error;

/// Iterate norms beyond this are treated as divergence (ρ(B) ≥ 1 in practice).
pub const DIVERGENCE_CUTOFF: f64 = 1e12;

/// Basis vectors below this norm trigger a GMRES breakdown check.
pub const BREAKDOWN_TOL: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct LinSolveReport {
    pub solution: Vector,
    pub iterations: usize,
    /// True residual ‖A·solution − b‖∞ (with A = I − B for `lfpi`),
    /// recomputed at return.
    pub residual_norm: f64,
    pub converged: bool,
    /// For `lfpi`: successive-iterate differences ‖z_{k+1} − z_k‖∞, one per
    /// iteration. For `krylov_solve`: the recursively updated residual-norm
    /// estimates, one per inner iteration.
    pub per_iter_residuals: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("iteration diverged: |z| = {norm:.3e} at iteration {iteration}")]
    Divergence { norm: f64, iteration: usize },
    #[error("no convergence after {} iterations (residual {:.3e})", report.iterations, report.residual_norm)]
    NoConvergence { report: Box<LinSolveReport> },
    #[error("Krylov basis breakdown at iteration {iteration}")]
    Breakdown { iteration: usize },
    #[error("need at least 5 positive residuals to estimate a rate")]
    InsufficientData,
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Linear fixed-point iteration z_{k+1} = B z_k + b.
///
/// Converges to the solution of z = B z + b when ρ(B) < 1, at asymptotic rate
/// −log ρ(B). The stopping test is the successive-iterate difference
/// ‖z_{k+1} − z_k‖∞ < tol, which is what an unrolled solver can observe.
pub fn lfpi(
    b_op: &dyn LinearOperator,
    b: &Vector,
    z0: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<LinSolveReport, SolveError> {
    let n = b.len();
    if b_op.dim_in() != n || b_op.dim_out() != n || z0.len() != n {
        return Err(SolveError::Dimension("lfpi: B, b, z0 sizes must agree"));
    }
    let mut z = z0.clone();
    let mut diffs = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..max_iter {
        let z_next = b_op.apply(&z)?.add(b);
        let diff = z_next.sub(&z).norm_inf();
        diffs.push(diff);
        iterations = k + 1;
        let norm = z_next.norm_inf();
        if !norm.is_finite() || norm > DIVERGENCE_CUTOFF {
            return Err(SolveError::Divergence {
                norm,
                iteration: iterations,
            });
        }
        z = z_next;
        if diff < tol {
            converged = true;
            break;
        }
    }
    let residual_norm = z.sub(&b_op.apply(&z)?).sub(b).norm_inf();
    let report = LinSolveReport {
        solution: z,
        iterations,
        residual_norm,
        converged,
        per_iter_residuals: diffs,
    };
    if converged {
        Ok(report)
    } else {
        Err(SolveError::NoConvergence {
            report: Box::new(report),
        })
    }
}

/// Restarted GMRES for A x = b using only `apply`.
///
/// Restart length is min(30, n). Converged when ‖A x − b‖₂ ≤ tol·(1 + ‖b‖₂).
/// A happy breakdown (tiny new basis vector) with the residual at target is a
/// success; otherwise it is reported as `Breakdown`.
pub fn krylov_solve(
    a_op: &dyn LinearOperator,
    b: &Vector,
    x0: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<LinSolveReport, SolveError> {
    let n = b.len();
    if a_op.dim_in() != n || a_op.dim_out() != n || x0.len() != n {
        return Err(SolveError::Dimension("krylov: A, b, x0 sizes must agree"));
    }
    let restart = 30.min(n).max(1);
    let target = tol * (1.0 + b.norm_l2());

    let mut x = x0.clone();
    let mut total_iters = 0usize;
    let mut per_iter = Vec::new();
    let mut converged = false;

    'outer: while total_iters < max_iter {
        let r = b.sub(&a_op.apply(&x)?);
        let beta = r.norm_l2();
        if beta <= target {
            converged = true;
            break;
        }

        let m = restart.min(max_iter - total_iters);
        let mut basis: Vec<Vector> = vec![r.scale(1.0 / beta)];
        // h[j] holds column j of the Hessenberg matrix (j+2 entries).
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut cs: Vec<f64> = Vec::with_capacity(m);
        let mut sn: Vec<f64> = Vec::with_capacity(m);
        let mut g = vec![beta];
        let mut cols = 0usize;
        let mut hit_target = false;

        for j in 0..m {
            let mut w = a_op.apply(&basis[j])?;
            let mut hcol = vec![0.0; j + 2];
            for (i, vi) in basis.iter().enumerate() {
                hcol[i] = w.dot(vi);
                w = w.axpy(-hcol[i], vi);
            }
            hcol[j + 1] = w.norm_l2();
            let happy = hcol[j + 1] < BREAKDOWN_TOL;
            if !happy {
                basis.push(w.scale(1.0 / hcol[j + 1]));
            }

            // Apply accumulated Givens rotations, then a new one to clear the
            // subdiagonal entry.
            for i in 0..j {
                let t = cs[i] * hcol[i] + sn[i] * hcol[i + 1];
                hcol[i + 1] = -sn[i] * hcol[i] + cs[i] * hcol[i + 1];
                hcol[i] = t;
            }
            let denom = (hcol[j] * hcol[j] + hcol[j + 1] * hcol[j + 1]).sqrt();
            let (c, s) = if denom == 0.0 {
                (1.0, 0.0)
            } else {
                (hcol[j] / denom, hcol[j + 1] / denom)
            };
            hcol[j] = c * hcol[j] + s * hcol[j + 1];
            hcol[j + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            let g_next = -s * g[j];
            g[j] *= c;
            g.push(g_next);

            h.push(hcol);
            cols = j + 1;
            total_iters += 1;
            let res_est = g[j + 1].abs();
            per_iter.push(res_est);

            if res_est <= target || happy || total_iters >= max_iter {
                hit_target = res_est <= target;
                if happy && !hit_target {
                    // Update x with the best iterate found so far before
                    // reporting the breakdown.
                    apply_update(&mut x, &h, &g, &basis, cols);
                    return Err(SolveError::Breakdown {
                        iteration: total_iters,
                    });
                }
                break;
            }
        }

        apply_update(&mut x, &h, &g, &basis, cols);
        if hit_target {
            converged = true;
            break 'outer;
        }
    }

    let residual_norm = b.sub(&a_op.apply(&x)?).norm_inf();
    let report = LinSolveReport {
        solution: x,
        iterations: total_iters,
        residual_norm,
        converged,
        per_iter_residuals: per_iter,
    };
    if converged {
        Ok(report)
    } else {
        Err(SolveError::NoConvergence {
            report: Box::new(report),
        })
    }
}

/// Solve the triangular least-squares system accumulated by the Givens
/// rotations and add the correction V·y to x.
fn apply_update(x: &mut Vector, h: &[Vec<f64>], g: &[f64], basis: &[Vector], cols: usize) {
    if cols == 0 {
        return;
    }
    let mut y = vec![0.0; cols];
    for i in (0..cols).rev() {
        let mut acc = g[i];
        for j in (i + 1)..cols {
            acc -= h[j][i] * y[j];
        }
        y[i] = acc / h[i][i];
    }
    let mut xn = x.clone();
    for (j, yj) in y.iter().enumerate() {
        xn = xn.axpy(*yj, &basis[j]);
    }
    *x = xn;
}

/// Estimate the convergence rate −log ρ from a residual history: −log of the
/// geometric mean of the last ⌈half⌉ successive residual ratios.
///
/// Residuals at or below zero (i.e. at the numerical floor) truncate the
/// usable history.
pub fn empirical_rate(per_iter_residuals: &[f64]) -> Result<f64, SolveError> {
    let cut = per_iter_residuals
        .iter()
        .position(|&r| r <= 0.0)
        .unwrap_or(per_iter_residuals.len());
    let r = &per_iter_residuals[..cut];
    if r.len() < 5 {
        return Err(SolveError::InsufficientData);
    }
    let ratios: Vec<f64> = r.windows(2).map(|w| w[1] / w[0]).collect();
    let half = ratios.len().div_ceil(2);
    let tail = &ratios[ratios.len() - half..];
    let mean_log = tail.iter().map(|q| q.ln()).sum::<f64>() / tail.len() as f64;
    Ok(-mean_log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{as_operator, lu_solve, Matrix};

    #[test]
    fn lfpi_scalar_geometric() {
        let b_op = as_operator(Matrix::from_rows(&[vec![0.5]]).unwrap());
        let b = Vector::new(vec![1.0]).unwrap();
        let r = lfpi(&b_op, &b, &Vector::zeros(1), 1e-12, 200).unwrap();
        assert!(r.converged);
        assert!((r.solution[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn lfpi_zero_operator() {
        let b_op = as_operator(Matrix::zeros(3, 3));
        let b = Vector::new(vec![4.0, -1.0, 0.5]).unwrap();
        let r = lfpi(&b_op, &b, &Vector::zeros(3), 1e-12, 10).unwrap();
        assert!(r.iterations <= 2);
        for i in 0..3 {
            assert_eq!(r.solution[i], b[i]);
        }
    }

    #[test]
    fn lfpi_matches_direct_solve_and_rate() {
        let bm = Matrix::diag(&[0.9, 0.5]);
        let b = Vector::new(vec![1.0, 1.0]).unwrap();
        let r = lfpi(&as_operator(bm.clone()), &b, &Vector::zeros(2), 1e-12, 1000).unwrap();
        // Oracle: (I − B) x = b by LU.
        let a = Matrix::identity(2).sub(&bm);
        let x = lu_solve(&a, &b).unwrap();
        assert!((r.solution[0] - x[0]).abs() < 1e-9);
        assert!((r.solution[1] - x[1]).abs() < 1e-9);
        assert!((x[0] - 10.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        // Late successive-difference ratios approach 0.9.
        let rate = empirical_rate(&r.per_iter_residuals).unwrap();
        assert!(
            ((-rate).exp() - 0.9).abs() < 0.05 * 0.9,
            "ratio {}",
            (-rate).exp()
        );
    }

    #[test]
    fn lfpi_divergence_detected() {
        let b_op = as_operator(Matrix::diag(&[2.0]));
        let b = Vector::new(vec![1.0]).unwrap();
        match lfpi(&b_op, &b, &Vector::new(vec![1.0]).unwrap(), 1e-12, 10_000) {
            Err(SolveError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn krylov_identity_one_iteration() {
        let a = as_operator(Matrix::identity(3));
        let b = Vector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let r = krylov_solve(&a, &b, &Vector::zeros(3), 1e-12, 100).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 1);
        for i in 0..3 {
            assert!((r.solution[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn krylov_diagonal() {
        let a = as_operator(Matrix::diag(&[2.0, 4.0]));
        let b = Vector::new(vec![2.0, 8.0]).unwrap();
        let r = krylov_solve(&a, &b, &Vector::zeros(2), 1e-12, 100).unwrap();
        assert!((r.solution[0] - 1.0).abs() < 1e-10);
        assert!((r.solution[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn krylov_exact_in_two_iterations_for_two_point_spectrum() {
        // A = I − diag(0.9, 0.5); Krylov space of dimension 2 is exact.
        let a = as_operator(Matrix::diag(&[0.1, 0.5]));
        let b = Vector::new(vec![1.0, 1.0]).unwrap();
        let r = krylov_solve(&a, &b, &Vector::zeros(2), 1e-10, 100).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 2, "iterations = {}", r.iterations);
        assert!((r.solution[0] - 10.0).abs() < 1e-8);
        assert!((r.solution[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn krylov_agrees_with_lu_on_random_system() {
        // Deterministic pseudo-random well-conditioned system.
        let n = 12;
        let mut data = Vec::with_capacity(n * n);
        let mut s = 0.37_f64;
        for _ in 0..n * n {
            s = (s * 997.13).fract();
            data.push(s - 0.5);
        }
        let mut a = Matrix::new(n, n, data).unwrap();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 4.0);
        }
        let b = Vector::from_fn(n, |i| (i as f64 * 0.71).sin()).unwrap();
        let r = krylov_solve(&as_operator(a.clone()), &b, &Vector::zeros(n), 1e-12, 500).unwrap();
        let x = lu_solve(&a, &b).unwrap();
        for i in 0..n {
            assert!((r.solution[i] - x[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn krylov_no_convergence_reports() {
        let a = as_operator(Matrix::diag(&[1.0, 1e-9]));
        let b = Vector::new(vec![1.0, 1.0]).unwrap();
        match krylov_solve(&a, &b, &Vector::zeros(2), 1e-14, 1) {
            Err(SolveError::NoConvergence { report }) => {
                assert_eq!(report.iterations, 1);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn empirical_rate_exact_geometric() {
        let rate = empirical_rate(&[1.0, 0.5, 0.25, 0.125, 0.0625]).unwrap();
        assert!((rate - 0.5_f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn empirical_rate_constant_residuals() {
        let rate = empirical_rate(&[2.0; 8]).unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn empirical_rate_insufficient() {
        assert!(matches!(
            empirical_rate(&[1.0, 0.5, 0.25, 0.125]),
            Err(SolveError::InsufficientData)
        ));
    }
}
