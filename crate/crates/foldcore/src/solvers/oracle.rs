//! Brute-force reference solver for small QPs: enumerate active sets of the
//! inequality constraints, solve each equality-constrained KKT system, and
//! keep the pattern that is both primal and dual feasible.
//!
//! This path is deliberately independent of the ADMM solver and exists to
//! cross-check it; it is exponential in the number of inequalities and only
//! intended for instances with at most a dozen of them.

use crate::linalg::{lu_solve, Matrix, Vector};
use crate::solvers::qp::QpGeneral;
use crate::solvers::SolverError;

/// Feasibility slack used when classifying constraints.
pub const ORACLE_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub x: Vector,
    pub eq_duals: Vector,
    /// Inequality multipliers, zero on inactive rows.
    pub ineq_duals: Vector,
    /// Active-set bitmask that produced the solution.
    pub pattern: u32,
}

/// Solve by active-set enumeration. Patterns are scanned in lexicographic
/// order (LSB = inequality row 0) and the first KKT-consistent one wins.
pub fn solve_qp_active_set(gp: &QpGeneral) -> Result<OracleSolution, SolverError> {
    let n = gp.n();
    let m_eq = gp.m_eq();
    let m_in = gp.m_in();
    assert!(m_in <= 20, "active-set oracle is exponential in inequalities");

    for pattern in 0u32..(1u32 << m_in) {
        let active: Vec<usize> = (0..m_in).filter(|i| pattern & (1 << i) != 0).collect();
        let na = active.len();
        let dim = n + m_eq + na;
        // KKT system: [Q Aᵀ G_Sᵀ; A 0 0; G_S 0 0]·[x; y; μ_S] = [−p; b; h_S].
        let mut kkt = Matrix::zeros(dim, dim);
        kkt.set_block(0, 0, &gp.q);
        if m_eq > 0 {
            kkt.set_block(n, 0, &gp.a);
            kkt.set_block(0, n, &gp.a.transpose());
        }
        for (row, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt.set(n + m_eq + row, j, gp.g.get(i, j));
                kkt.set(j, n + m_eq + row, gp.g.get(i, j));
            }
        }
        let mut rhs = Vec::with_capacity(dim);
        for i in 0..n {
            rhs.push(-gp.p[i]);
        }
        for i in 0..m_eq {
            rhs.push(gp.b[i]);
        }
        for &i in &active {
            rhs.push(gp.h[i]);
        }
        let rhs = Vector::from_raw(rhs);

        let sol = match lu_solve(&kkt, &rhs) {
            Ok(s) => s,
            Err(_) => continue, // singular pattern, e.g. dependent actives
        };
        let x = sol.slice(0, n);
        let y = sol.slice(n, n + m_eq);
        let mu_active = sol.slice(n + m_eq, dim);

        // Dual feasibility on actives, primal feasibility on inactives.
        if mu_active.iter().any(|&m| m < -ORACLE_TOL) {
            continue;
        }
        let gx = if m_in > 0 {
            gp.g.matvec(&x)
        } else {
            Vector::zeros(0)
        };
        let feasible = (0..m_in).all(|i| {
            if active.contains(&i) {
                true
            } else {
                gx[i] <= gp.h[i] + ORACLE_TOL
            }
        });
        if !feasible {
            continue;
        }

        let mut ineq_duals = Vector::zeros(m_in);
        for (row, &i) in active.iter().enumerate() {
            ineq_duals.set(i, mu_active[row]);
        }
        return Ok(OracleSolution {
            x,
            eq_duals: y,
            ineq_duals,
            pattern,
        });
    }
    Err(SolverError::InvalidProblem(
        "active-set oracle found no KKT-consistent pattern".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecf(v: &[f64]) -> Vector {
        Vector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn oracle_unconstrained_quadratic() {
        let gp = QpGeneral::unconstrained(Matrix::identity(2), vecf(&[-1.0, 2.0])).unwrap();
        let sol = solve_qp_active_set(&gp).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
        assert!((sol.x[1] + 2.0).abs() < 1e-10);
    }

    #[test]
    fn oracle_active_bound() {
        // min ½‖x‖² − 2x₁ s.t. x₁ + x₂ = 1, x ≥ 0 → [1, 0], μ₂ = 1.
        let gp = QpGeneral::new(
            Matrix::identity(2),
            vecf(&[-2.0, 0.0]),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vecf(&[1.0]),
            Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap(),
            vecf(&[0.0, 0.0]),
        )
        .unwrap();
        let sol = solve_qp_active_set(&gp).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
        assert!(sol.x[1].abs() < 1e-10);
        assert!((sol.ineq_duals[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn oracle_matches_admm_on_symmetric_instance() {
        let gp = QpGeneral::new(
            Matrix::identity(2),
            vecf(&[-1.0, -1.0]),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vecf(&[1.0]),
            Matrix::zeros(0, 2),
            Vector::zeros(0),
        )
        .unwrap();
        let sol = solve_qp_active_set(&gp).unwrap();
        let admm = crate::solvers::admm::solve_qp_general(&gp, 1.0, 1e-10, 20_000).unwrap();
        assert!(sol.x.sub(&admm.x).norm_inf() < 1e-6);
    }
}
