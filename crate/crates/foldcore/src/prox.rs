//! Closed-form projection and proximal operators with forward and VJP
//! implementations.
//!
//! Kink convention: coordinates sitting exactly on a bound or threshold are
//! treated as clamped (derivative zero), matching the derivative of the
//! active piece.

use crate::linalg::Vector;
use thiserror::Error;

/// Bisection stops when |Σy − k| falls below this.
pub const SIMPLEX_SUM_TOL: f64 = 1e-10;
const SIMPLEX_MAX_BISECT: usize = 200;

#[derive(Debug, Error)]
pub enum ProxError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("capped-simplex bisection did not converge (non-finite input?)")]
    NoConvergence,
    #[error("all coordinates clamped: projection Jacobian is zero on a degenerate free set")]
    DegenerateFreeSet,
}

// ── Box ─────────────────────────────────────────────────────────────

/// One bound of a box, either shared by all coordinates or per-coordinate.
/// Scalar bounds may be infinite (e.g. the nonnegative orthant).
#[derive(Debug, Clone)]
pub enum Bound {
    Scalar(f64),
    PerCoord(Vec<f64>),
}

impl Bound {
    fn at(&self, i: usize) -> f64 {
        match self {
            Bound::Scalar(v) => *v,
            Bound::PerCoord(v) => v[i],
        }
    }
    fn len_ok(&self, n: usize) -> bool {
        match self {
            Bound::Scalar(_) => true,
            Bound::PerCoord(v) => v.len() == n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoxSpec {
    lo: Bound,
    hi: Bound,
}

impl BoxSpec {
    pub fn new(lo: Bound, hi: Bound) -> Result<Self, ProxError> {
        let check = |b: &Bound| match b {
            Bound::Scalar(v) => !v.is_nan(),
            Bound::PerCoord(v) => v.iter().all(|x| !x.is_nan()),
        };
        if !check(&lo) || !check(&hi) {
            return Err(ProxError::InvalidSpec("NaN bound".into()));
        }
        let spec = Self { lo, hi };
        // lo ≤ hi elementwise, checkable only where both are per-coordinate
        // or scalar.
        match (&spec.lo, &spec.hi) {
            (Bound::Scalar(l), Bound::Scalar(h)) if l > h => {
                return Err(ProxError::InvalidSpec(format!("lo {l} > hi {h}")));
            }
            (Bound::PerCoord(l), Bound::PerCoord(h)) => {
                if l.len() != h.len() || l.iter().zip(h).any(|(a, b)| a > b) {
                    return Err(ProxError::InvalidSpec("lo > hi elementwise".into()));
                }
            }
            _ => {}
        }
        Ok(spec)
    }

    /// Shared scalar bounds for every coordinate.
    pub fn uniform(lo: f64, hi: f64) -> Result<Self, ProxError> {
        Self::new(Bound::Scalar(lo), Bound::Scalar(hi))
    }

    pub fn lo_at(&self, i: usize) -> f64 {
        self.lo.at(i)
    }
    pub fn hi_at(&self, i: usize) -> f64 {
        self.hi.at(i)
    }
    pub fn dims_ok(&self, n: usize) -> bool {
        self.lo.len_ok(n) && self.hi.len_ok(n)
    }
}

pub fn project_box(x: &Vector, spec: &BoxSpec) -> Vector {
    assert!(spec.dims_ok(x.len()), "box spec dimension mismatch");
    Vector::from_raw(
        (0..x.len())
            .map(|i| x[i].clamp(spec.lo_at(i), spec.hi_at(i)))
            .collect(),
    )
}

/// VJP of the box projection: passes v only on coordinates strictly inside
/// the box.
pub fn project_box_vjp(x: &Vector, spec: &BoxSpec, v: &Vector) -> Vector {
    assert_eq!(x.len(), v.len());
    assert!(spec.dims_ok(x.len()), "box spec dimension mismatch");
    Vector::from_raw(
        (0..x.len())
            .map(|i| {
                if x[i] > spec.lo_at(i) && x[i] < spec.hi_at(i) {
                    v[i]
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

pub fn project_nonneg(x: &Vector) -> Vector {
    Vector::from_raw(x.iter().map(|&v| v.max(0.0)).collect())
}

pub fn project_nonneg_vjp(x: &Vector, v: &Vector) -> Vector {
    assert_eq!(x.len(), v.len());
    Vector::from_raw(
        x.iter()
            .zip(v.iter())
            .map(|(&xi, &vi)| if xi > 0.0 { vi } else { 0.0 })
            .collect(),
    )
}

// ── Soft threshold ──────────────────────────────────────────────────

/// T_λ(x)ᵢ = sign(xᵢ)·max(|xᵢ| − λ, 0).
pub fn soft_threshold(x: &Vector, lambda: f64) -> Vector {
    assert!(lambda >= 0.0, "soft_threshold: lambda must be nonnegative");
    Vector::from_raw(
        x.iter()
            .map(|&v| v.signum() * (v.abs() - lambda).max(0.0))
            .collect(),
    )
}

/// Derivative mask of the soft threshold: v passes where |xᵢ| > λ.
pub fn soft_threshold_vjp(x: &Vector, lambda: f64, v: &Vector) -> Vector {
    assert_eq!(x.len(), v.len());
    Vector::from_raw(
        x.iter()
            .zip(v.iter())
            .map(|(&xi, &vi)| if xi.abs() > lambda { vi } else { 0.0 })
            .collect(),
    )
}

// ── Capped simplex ──────────────────────────────────────────────────

/// The set {y : 0 ≤ y ≤ 1, Σy = k}. The budget k may be fractional.
#[derive(Debug, Clone, Copy)]
pub struct CappedSimplexSpec {
    pub k: f64,
    pub dim: usize,
}

impl CappedSimplexSpec {
    pub fn new(k: f64, dim: usize) -> Result<Self, ProxError> {
        if !(k > 0.0 && k < dim as f64) {
            return Err(ProxError::InvalidSpec(format!(
                "capped simplex requires 0 < k < dim, got k={k}, dim={dim}"
            )));
        }
        Ok(Self { k, dim })
    }
}

/// Euclidean projection onto the capped simplex by bisection on the shift τ
/// with yᵢ = clamp(xᵢ − τ, 0, 1), until |Σy − k| < 1e-10.
pub fn project_capped_simplex(x: &Vector, spec: &CappedSimplexSpec) -> Result<Vector, ProxError> {
    assert_eq!(x.len(), spec.dim, "capped simplex dimension mismatch");
    if !x.is_finite() {
        return Err(ProxError::NoConvergence);
    }
    let shifted_sum = |tau: f64| -> f64 { x.iter().map(|&v| (v - tau).clamp(0.0, 1.0)).sum() };
    // Σy(τ) is nonincreasing; bracket so that Σy(lo) ≥ k ≥ Σy(hi).
    let xmin = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = xmin - 1.0;
    let mut hi = xmax;
    let mut tau = 0.0;
    let mut ok = false;
    for _ in 0..SIMPLEX_MAX_BISECT {
        tau = 0.5 * (lo + hi);
        let s = shifted_sum(tau);
        if (s - spec.k).abs() < SIMPLEX_SUM_TOL {
            ok = true;
            break;
        }
        if s > spec.k {
            lo = tau;
        } else {
            hi = tau;
        }
    }
    if !ok {
        return Err(ProxError::NoConvergence);
    }
    Ok(Vector::from_raw(
        x.iter().map(|&v| (v - tau).clamp(0.0, 1.0)).collect(),
    ))
}

/// VJP of the capped-simplex projection. On the free set F = {i : 0 < yᵢ < 1}
/// the Jacobian is I_F − (1/|F|)·1·1ᵀ; clamped coordinates pass nothing.
pub fn project_capped_simplex_vjp(
    x: &Vector,
    spec: &CappedSimplexSpec,
    v: &Vector,
) -> Result<Vector, ProxError> {
    assert_eq!(x.len(), v.len());
    let y = project_capped_simplex(x, spec)?;
    let free: Vec<usize> = (0..y.len())
        .filter(|&i| y[i] > 0.0 && y[i] < 1.0)
        .collect();
    if free.is_empty() {
        return Err(ProxError::DegenerateFreeSet);
    }
    let mean = free.iter().map(|&i| v[i]).sum::<f64>() / free.len() as f64;
    let mut out = vec![0.0; v.len()];
    for &i in &free {
        out[i] = v[i] - mean;
    }
    Ok(Vector::from_raw(out))
}
