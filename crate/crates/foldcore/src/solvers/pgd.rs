//! Projected gradient descent: x_{k+1} = P_C(x_k − α∇f(x_k, c)).
//!
//! The step's VJPs compose the projection VJP with the gradient-step VJP
//! (S(x) = x − α∇f, so ∂S/∂x = I − α∇²f and ∂S/∂c = −α·∂(∇f)/∂c, both
//! supplied analytically per problem).

use crate::linalg::Vector;
use crate::prox::{
    project_box, project_box_vjp, project_capped_simplex, project_capped_simplex_vjp, BoxSpec,
    CappedSimplexSpec, ProxError,
};
use crate::step::{DifferentiableStep, StepError};

/// Smooth objective f(x, c) with analytic gradient and its two VJPs.
pub trait SmoothObjective: Send + Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn value(&self, x: &Vector, c: &Vector) -> f64;
    fn grad(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError>;
    /// vᵀ·∂(∇f)/∂x (= ∇²f·v for symmetric Hessians).
    fn grad_vjp_state(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError>;
    /// vᵀ·∂(∇f)/∂c.
    fn grad_vjp_param(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError>;
}

/// Euclidean projection onto a feasible set, with its VJP at the projection
/// input point.
pub trait Projection: Send + Sync {
    fn project(&self, y: &Vector) -> Result<Vector, ProxError>;
    fn vjp(&self, y: &Vector, v: &Vector) -> Result<Vector, ProxError>;
}

pub struct BoxProjection(pub BoxSpec);

impl Projection for BoxProjection {
    fn project(&self, y: &Vector) -> Result<Vector, ProxError> {
        Ok(project_box(y, &self.0))
    }
    fn vjp(&self, y: &Vector, v: &Vector) -> Result<Vector, ProxError> {
        Ok(project_box_vjp(y, &self.0, v))
    }
}

pub struct CappedSimplexProjection(pub CappedSimplexSpec);

impl Projection for CappedSimplexProjection {
    fn project(&self, y: &Vector) -> Result<Vector, ProxError> {
        project_capped_simplex(y, &self.0)
    }
    fn vjp(&self, y: &Vector, v: &Vector) -> Result<Vector, ProxError> {
        project_capped_simplex_vjp(y, &self.0, v)
    }
}

/// Projection onto a product of sets, applied blockwise.
pub struct ProductProjection {
    parts: Vec<(usize, Box<dyn Projection>)>,
    dim: usize,
}

impl ProductProjection {
    pub fn new(parts: Vec<(usize, Box<dyn Projection>)>) -> Self {
        let dim = parts.iter().map(|(len, _)| len).sum();
        Self { parts, dim }
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Projection for ProductProjection {
    fn project(&self, y: &Vector) -> Result<Vector, ProxError> {
        assert_eq!(y.len(), self.dim);
        let mut out = Vec::with_capacity(self.dim);
        let mut off = 0;
        for (len, proj) in &self.parts {
            let block = proj.project(&y.slice(off, off + len))?;
            out.extend_from_slice(block.as_slice());
            off += len;
        }
        Ok(Vector::from_raw(out))
    }
    fn vjp(&self, y: &Vector, v: &Vector) -> Result<Vector, ProxError> {
        assert_eq!(y.len(), self.dim);
        let mut out = Vec::with_capacity(self.dim);
        let mut off = 0;
        for (len, proj) in &self.parts {
            let block = proj.vjp(&y.slice(off, off + len), &v.slice(off, off + len))?;
            out.extend_from_slice(block.as_slice());
            off += len;
        }
        Ok(Vector::from_raw(out))
    }
}

/// Adapter mapping a degenerate projection Jacobian (every coordinate
/// clamped) to the mathematically correct zero, for layers whose solutions
/// may sit on a vertex where the solution map is locally constant.
pub struct ZeroOnDegenerate<P>(pub P);

impl<P: Projection> Projection for ZeroOnDegenerate<P> {
    fn project(&self, y: &Vector) -> Result<Vector, ProxError> {
        self.0.project(y)
    }
    fn vjp(&self, y: &Vector, v: &Vector) -> Result<Vector, ProxError> {
        match self.0.vjp(y, v) {
            Err(ProxError::DegenerateFreeSet) => Ok(Vector::zeros(v.len())),
            other => other,
        }
    }
}

/// One projected-gradient update.
pub struct PgdStep<F, P> {
    pub objective: F,
    pub projector: P,
    pub alpha: f64,
}

impl<F: SmoothObjective, P: Projection> PgdStep<F, P> {
    pub fn new(objective: F, projector: P, alpha: f64) -> Self {
        assert!(alpha > 0.0, "pgd: alpha must be positive");
        Self {
            objective,
            projector,
            alpha,
        }
    }

    fn pre_projection(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError> {
        let g = self.objective.grad(x, c)?;
        if !g.is_finite() {
            return Err(StepError::NonFiniteGradient);
        }
        Ok(x.axpy(-self.alpha, &g))
    }
}

impl<F: SmoothObjective, P: Projection> DifferentiableStep for PgdStep<F, P> {
    fn state_dim(&self) -> usize {
        self.objective.state_dim()
    }
    fn param_dim(&self) -> usize {
        self.objective.param_dim()
    }

    fn forward(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError> {
        let y = self.pre_projection(x, c)?;
        Ok(self.projector.project(&y)?)
    }

    fn vjp_state(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let y = self.pre_projection(x, c)?;
        let w = self.projector.vjp(&y, v)?;
        // wᵀ·(I − α ∂(∇f)/∂x)
        let hv = self.objective.grad_vjp_state(x, c, &w)?;
        Ok(w.axpy(-self.alpha, &hv))
    }

    fn vjp_param(&self, x: &Vector, c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let y = self.pre_projection(x, c)?;
        let w = self.projector.vjp(&y, v)?;
        Ok(self.objective.grad_vjp_param(x, c, &w)?.scale(-self.alpha))
    }
}

// ── Shipped objectives ──────────────────────────────────────────────

/// ½‖x − c‖²: the projection test objective (fixed point of PGD over a box
/// is the box projection of c).
pub struct DistanceObjective {
    pub n: usize,
}

impl SmoothObjective for DistanceObjective {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn param_dim(&self) -> usize {
        self.n
    }
    fn value(&self, x: &Vector, c: &Vector) -> f64 {
        let d = x.sub(c);
        0.5 * d.dot(&d)
    }
    fn grad(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError> {
        Ok(x.sub(c))
    }
    fn grad_vjp_state(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        Ok(v.clone())
    }
    fn grad_vjp_param(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        Ok(v.scale(-1.0))
    }
}

/// Entropy-smoothed top-k score objective in minimization form:
/// f(x, c) = −cᵀx + Σᵢ xᵢ ln xᵢ, over the capped simplex {0≤x≤1, Σx = k}.
///
/// The log is floored at a tiny positive value so that iterates which touch
/// the boundary during the transient keep finite gradients; the fixed point
/// is strictly positive, so the floor never binds there.
pub struct TopkObjective {
    pub n: usize,
}

const LOG_FLOOR: f64 = 1e-12;

impl SmoothObjective for TopkObjective {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn param_dim(&self) -> usize {
        self.n
    }
    fn value(&self, x: &Vector, c: &Vector) -> f64 {
        let ent: f64 = x
            .iter()
            .map(|&v| if v > LOG_FLOOR { v * v.ln() } else { 0.0 })
            .sum();
        -c.dot(x) + ent
    }
    fn grad(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError> {
        Vector::from_fn(self.n, |i| -c[i] + 1.0 + x[i].max(LOG_FLOOR).ln())
            .map_err(|_| StepError::NonFiniteGradient)
    }
    fn grad_vjp_state(&self, x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        Ok(Vector::from_raw(
            (0..self.n)
                .map(|i| if x[i] > LOG_FLOOR { v[i] / x[i] } else { 0.0 })
                .collect(),
        ))
    }
    fn grad_vjp_param(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        Ok(v.scale(-1.0))
    }
}

/// Convex quadratic ½xᵀQx + cᵀx with the linear cost as the parameter.
pub struct QuadCostObjective {
    pub q: crate::linalg::Matrix,
}

impl SmoothObjective for QuadCostObjective {
    fn state_dim(&self) -> usize {
        self.q.rows()
    }
    fn param_dim(&self) -> usize {
        self.q.rows()
    }
    fn value(&self, x: &Vector, c: &Vector) -> f64 {
        0.5 * x.dot(&self.q.matvec(x)) + c.dot(x)
    }
    fn grad(&self, x: &Vector, c: &Vector) -> Result<Vector, StepError> {
        Ok(self.q.matvec(x).add(c))
    }
    fn grad_vjp_state(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        Ok(self.q.matvec_t(v))
    }
    fn grad_vjp_param(&self, _x: &Vector, _c: &Vector, v: &Vector) -> Result<Vector, StepError> {
        Ok(v.clone())
    }
}

/// Smoothed bilinear objective on the joint variable s = (x, y) with
/// parameters (c, d), in minimization form:
///
///   f(s, (c,d)) = −cᵀx − xᵀQy − dᵀy
///                 + ε Σ [xᵢ ln xᵢ + (1−xᵢ) ln(1−xᵢ)] + (same for y).
///
/// The binary-entropy smoothing keeps local optima strictly inside the unit
/// cube so the solution map carries useful derivatives; without it the
/// optima of the bilinear program sit on vertices where the map is locally
/// constant and every gradient vanishes.
pub struct BilinearObjective {
    pub coupling: crate::linalg::Matrix,
    pub eps: f64,
}

impl BilinearObjective {
    pub fn nx(&self) -> usize {
        self.coupling.rows()
    }
    pub fn ny(&self) -> usize {
        self.coupling.cols()
    }

    fn binary_entropy_grad(v: f64) -> f64 {
        let v = v.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
        (v / (1.0 - v)).ln()
    }
    fn binary_entropy_hess(v: f64) -> f64 {
        if v <= LOG_FLOOR || v >= 1.0 - LOG_FLOOR {
            0.0
        } else {
            1.0 / v + 1.0 / (1.0 - v)
        }
    }
}

impl SmoothObjective for BilinearObjective {
    fn state_dim(&self) -> usize {
        self.nx() + self.ny()
    }
    fn param_dim(&self) -> usize {
        self.nx() + self.ny()
    }
    fn value(&self, s: &Vector, cd: &Vector) -> f64 {
        let (nx, ny) = (self.nx(), self.ny());
        let x = s.slice(0, nx);
        let y = s.slice(nx, nx + ny);
        let c = cd.slice(0, nx);
        let d = cd.slice(nx, nx + ny);
        let ent = |v: f64| -> f64 {
            let v = v.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
            v * v.ln() + (1.0 - v) * (1.0 - v).ln()
        };
        let smooth: f64 =
            x.iter().map(|&v| ent(v)).sum::<f64>() + y.iter().map(|&v| ent(v)).sum::<f64>();
        -c.dot(&x) - x.dot(&self.coupling.matvec(&y)) - d.dot(&y) + self.eps * smooth
    }
    fn grad(&self, s: &Vector, cd: &Vector) -> Result<Vector, StepError> {
        let (nx, ny) = (self.nx(), self.ny());
        let x = s.slice(0, nx);
        let y = s.slice(nx, nx + ny);
        let c = cd.slice(0, nx);
        let d = cd.slice(nx, nx + ny);
        let qy = self.coupling.matvec(&y);
        let qtx = self.coupling.matvec_t(&x);
        let mut g = Vec::with_capacity(nx + ny);
        for i in 0..nx {
            g.push(-c[i] - qy[i] + self.eps * Self::binary_entropy_grad(x[i]));
        }
        for j in 0..ny {
            g.push(-d[j] - qtx[j] + self.eps * Self::binary_entropy_grad(y[j]));
        }
        let g = Vector::new(g).map_err(|_| StepError::NonFiniteGradient)?;
        Ok(g)
    }
    fn grad_vjp_state(&self, s: &Vector, _cd: &Vector, v: &Vector) -> Result<Vector, StepError> {
        let (nx, ny) = (self.nx(), self.ny());
        let vx = v.slice(0, nx);
        let vy = v.slice(nx, nx + ny);
        // Hessian blocks: [[ε D_x, −Q], [−Qᵀ, ε D_y]] (symmetric).
        let qvy = self.coupling.matvec(&vy);
        let qtvx = self.coupling.matvec_t(&vx);
        let mut out = Vec::with_capacity(nx + ny);
        for i in 0..nx {
            out.push(self.eps * Self::binary_entropy_hess(s[i]) * vx[i] - qvy[i]);
        }
        for j in 0..ny {
            out.push(self.eps * Self::binary_entropy_hess(s[nx + j]) * vy[j] - qtvx[j]);
        }
        Ok(Vector::from_raw(out))
    }
    fn grad_vjp_param(&self, _s: &Vector, _cd: &Vector, v: &Vector) -> Result<Vector, StepError> {
        Ok(v.scale(-1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::solve_fixed_point;
    use crate::step::{check_step, DifferentiableStep};

    fn vecf(v: &[f64]) -> Vector {
        Vector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn pgd_distance_interior_step() {
        // f = ½‖x−c‖² over [0,1]: interior step is x − α(x−c).
        let step = PgdStep::new(
            DistanceObjective { n: 2 },
            BoxProjection(BoxSpec::uniform(0.0, 1.0).unwrap()),
            0.4,
        );
        let x = vecf(&[0.3, 0.6]);
        let c = vecf(&[0.5, 0.5]);
        let out = step.forward(&x, &c).unwrap();
        for i in 0..2 {
            let expect = x[i] - 0.4 * (x[i] - c[i]);
            assert!((out[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn pgd_fixed_point_is_projection_of_c() {
        let step = PgdStep::new(
            DistanceObjective { n: 2 },
            BoxProjection(BoxSpec::uniform(0.0, 1.0).unwrap()),
            0.5,
        );
        let c = vecf(&[0.3, 0.7]);
        let rep = solve_fixed_point(&step, &c, &vecf(&[0.9, 0.1]), 1e-12, 500).unwrap();
        assert!(rep.x_star.sub(&c).norm_inf() < 1e-10);
        // Starting at the fixed point, the step stays put.
        let at_star = step.forward(&c, &c).unwrap();
        assert!(at_star.sub(&c).norm_inf() < 1e-15);
    }

    #[test]
    fn topk_symmetric_fixed_point() {
        // n=2, k=1, c=0 → x* = [0.5, 0.5] by symmetry.
        let step = PgdStep::new(
            TopkObjective { n: 2 },
            CappedSimplexProjection(CappedSimplexSpec::new(1.0, 2).unwrap()),
            0.1,
        );
        let c = Vector::zeros(2);
        let rep = solve_fixed_point(&step, &c, &vecf(&[0.5, 0.5]), 1e-12, 2000).unwrap();
        assert!((rep.x_star[0] - 0.5).abs() < 1e-9);
        assert!((rep.x_star[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn topk_step_vjps_match_fd() {
        let step = PgdStep::new(
            TopkObjective { n: 4 },
            CappedSimplexProjection(CappedSimplexSpec::new(2.0, 4).unwrap()),
            0.1,
        );
        let c = vecf(&[0.3, -0.2, 0.5, 0.0]);
        let rep = solve_fixed_point(&step, &c, &vecf(&[0.5; 4]), 1e-12, 5000).unwrap();
        let chk = check_step(&step, &rep.x_star, &c).unwrap();
        assert!(chk.pass(), "max dev {}", chk.max_dev());
    }

    #[test]
    fn bilinear_step_vjps_match_fd() {
        let coupling =
            crate::linalg::Matrix::from_rows(&[vec![0.5, -0.3], vec![0.2, 0.4]]).unwrap();
        let proj = ProductProjection::new(vec![
            (
                2,
                Box::new(CappedSimplexProjection(
                    CappedSimplexSpec::new(1.0, 2).unwrap(),
                )) as Box<dyn Projection>,
            ),
            (
                2,
                Box::new(CappedSimplexProjection(
                    CappedSimplexSpec::new(1.0, 2).unwrap(),
                )),
            ),
        ]);
        let step = PgdStep::new(
            BilinearObjective {
                coupling,
                eps: 0.2,
            },
            proj,
            0.15,
        );
        let cd = vecf(&[0.3, -0.1, 0.2, 0.4]);
        let rep = solve_fixed_point(&step, &cd, &vecf(&[0.5; 4]), 1e-11, 20_000).unwrap();
        let chk = check_step(&step, &rep.x_star, &cd).unwrap();
        assert!(chk.pass(), "max dev {}", chk.max_dev());
    }
}
