//! Dense real linear algebra: vectors, matrices, LU solves, and
//! spectral-radius estimation.
//!
//! Everything is `f64`, row-major, and dense. Problem sizes in this crate are
//! small (n up to a few hundred), so sparse formats and blocked kernels would
//! be pure overhead.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("singular matrix: pivot {pivot:.3e} at column {col} below tolerance")]
    SingularMatrix { col: usize, pivot: f64 },
    #[error("spectral radius estimate did not converge; last estimate {estimate}")]
    NoConvergence { estimate: f64 },
    #[error("operator does not provide a transpose action")]
    TransposeUnavailable,
}

/// Relative pivot threshold below which LU factorization reports singularity.
pub const LU_PIVOT_TOL: f64 = 1e-12;

// ── Vector ──────────────────────────────────────────────────────────

/// Dense real vector. All entries are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Build a vector, rejecting NaN and infinities.
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite("vector construction"));
        }
        Ok(Self { data })
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn ones(n: usize) -> Self {
        Self { data: vec![1.0; n] }
    }

    /// i-th standard basis vector of length n.
    pub fn unit(n: usize, i: usize) -> Self {
        assert!(i < n, "unit vector index out of range");
        let mut data = vec![0.0; n];
        data[i] = 1.0;
        Self { data }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize) -> f64) -> Result<Self, LinalgError> {
        Self::new((0..n).map(&mut f).collect())
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "add: length mismatch");
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// self + s * other
    pub fn axpy(&self, s: f64, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "axpy: length mismatch");
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    /// Concatenate slices of vectors into one vector.
    pub fn concat(parts: &[&Vector]) -> Vector {
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Vector { data }
    }

    /// Copy of the subrange [start, end).
    pub fn slice(&self, start: usize, end: usize) -> Vector {
        assert!(start <= end && end <= self.len(), "slice out of range");
        Vector {
            data: self.data[start..end].to_vec(),
        }
    }

    pub(crate) fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

// ── Matrix ──────────────────────────────────────────────────────────

/// Dense row-major real matrix. All entries are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                context: "matrix construction",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite("matrix construction"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::DimensionMismatch {
                    context: "from_rows",
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copy `block` into self with top-left corner at (r0, c0).
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.data[(r0 + i) * self.cols + (c0 + j)] = block.data[i * block.cols + j];
            }
        }
    }

    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.len(), "matvec: dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * v.data[j];
            }
            out[i] = acc;
        }
        Vector { data: out }
    }

    /// Transposed product Aᵀ w without materializing the transpose.
    pub fn matvec_t(&self, w: &Vector) -> Vector {
        assert_eq!(self.rows, w.len(), "matvec_t: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let wi = w.data[i];
            for j in 0..self.cols {
                out[j] += row[j] * wi;
            }
        }
        Vector { data: out }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul: dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += aik * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert!(self.rows == other.rows && self.cols == other.cols);
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert!(self.rows == other.rows && self.cols == other.cols);
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn norm_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sum of absolute entries (used for relative L1 errors).
    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

// ── LinearOperator ──────────────────────────────────────────────────

/// Implicit linear map. `apply_transpose` defaults to an error for operators
/// that only exist as a forward action (e.g. VJP closures); matrix-backed
/// operators implement both directions and satisfy the adjoint identity
/// ⟨w, A v⟩ = ⟨Aᵀ w, v⟩.
pub trait LinearOperator {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn apply(&self, v: &Vector) -> Result<Vector, LinalgError>;
    fn apply_transpose(&self, _w: &Vector) -> Result<Vector, LinalgError> {
        Err(LinalgError::TransposeUnavailable)
    }
}

/// A matrix viewed as a LinearOperator.
pub struct MatrixOperator {
    m: Matrix,
}

impl MatrixOperator {
    pub fn matrix(&self) -> &Matrix {
        &self.m
    }
}

impl LinearOperator for MatrixOperator {
    fn dim_in(&self) -> usize {
        self.m.cols()
    }
    fn dim_out(&self) -> usize {
        self.m.rows()
    }
    fn apply(&self, v: &Vector) -> Result<Vector, LinalgError> {
        if v.len() != self.m.cols() {
            return Err(LinalgError::DimensionMismatch {
                context: "operator apply",
                expected: self.m.cols(),
                got: v.len(),
            });
        }
        Ok(self.m.matvec(v))
    }
    fn apply_transpose(&self, w: &Vector) -> Result<Vector, LinalgError> {
        if w.len() != self.m.rows() {
            return Err(LinalgError::DimensionMismatch {
                context: "operator apply_transpose",
                expected: self.m.rows(),
                got: w.len(),
            });
        }
        Ok(self.m.matvec_t(w))
    }
}

pub fn as_operator(m: Matrix) -> MatrixOperator {
    MatrixOperator { m }
}

/// Operator defined by a forward closure only.
pub struct FnOperator<F> {
    dim_in: usize,
    dim_out: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&Vector) -> Result<Vector, LinalgError>,
{
    pub fn new(dim_in: usize, dim_out: usize, f: F) -> Self {
        Self { dim_in, dim_out, f }
    }
}

impl<F> LinearOperator for FnOperator<F>
where
    F: Fn(&Vector) -> Result<Vector, LinalgError>,
{
    fn dim_in(&self) -> usize {
        self.dim_in
    }
    fn dim_out(&self) -> usize {
        self.dim_out
    }
    fn apply(&self, v: &Vector) -> Result<Vector, LinalgError> {
        (self.f)(v)
    }
}

// ── LU factorization ────────────────────────────────────────────────

/// LU factors with partial pivoting, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    /// piv[k] = row swapped with row k at elimination step k.
    piv: Vec<usize>,
}

/// Factor a square matrix with scaled partial pivoting. A pivot is declared
/// singular when its magnitude falls below `LU_PIVOT_TOL` relative to the
/// original scale of its row.
pub fn lu_factor(a: &Matrix) -> Result<LuFactors, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch {
            context: "lu_factor",
            expected: a.rows(),
            got: a.cols(),
        });
    }
    let n = a.rows();
    let mut lu = a.as_slice().to_vec();
    let mut piv = vec![0usize; n];

    // Row scales from the original matrix, permuted alongside the rows.
    let mut scale: Vec<f64> = (0..n)
        .map(|i| a.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0))
        .collect();

    for k in 0..n {
        // Find the largest scaled pivot in column k.
        let mut best = k;
        let mut best_val = (lu[k * n + k]).abs() / scale[k];
        for i in (k + 1)..n {
            let v = (lu[i * n + k]).abs() / scale[i];
            if v > best_val {
                best = i;
                best_val = v;
            }
        }
        piv[k] = best;
        if best != k {
            for j in 0..n {
                lu.swap(k * n + j, best * n + j);
            }
            scale.swap(k, best);
        }
        let pivot = lu[k * n + k];
        if pivot.abs() < LU_PIVOT_TOL * scale[k] {
            return Err(LinalgError::SingularMatrix {
                col: k,
                pivot: pivot.abs(),
            });
        }
        for i in (k + 1)..n {
            let factor = lu[i * n + k] / pivot;
            lu[i * n + k] = factor;
            for j in (k + 1)..n {
                lu[i * n + j] -= factor * lu[k * n + j];
            }
        }
    }
    Ok(LuFactors { n, lu, piv })
}

impl LuFactors {
    /// Solve A x = b.
    pub fn solve(&self, b: &Vector) -> Result<Vector, LinalgError> {
        let n = self.n;
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch {
                context: "lu solve",
                expected: n,
                got: b.len(),
            });
        }
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.piv[k]);
            for i in (k + 1)..n {
                x[i] -= self.lu[i * n + k] * x[k];
            }
        }
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite("lu solve"));
        }
        Ok(Vector::from_raw(x))
    }

    /// Solve Aᵀ x = b using the factors of A.
    ///
    /// With P A = L U this is Uᵀ y = b, Lᵀ z = y, then undoing the row swaps
    /// in reverse order.
    pub fn solve_transpose(&self, b: &Vector) -> Result<Vector, LinalgError> {
        let n = self.n;
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch {
                context: "lu solve_transpose",
                expected: n,
                got: b.len(),
            });
        }
        let mut x = b.to_vec();
        // Uᵀ y = b (forward substitution on U's columns).
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[k * n + i] * x[k];
            }
            x[i] /= self.lu[i * n + i];
        }
        // Lᵀ z = y (back substitution, unit diagonal).
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                x[i] -= self.lu[k * n + i] * x[k];
            }
        }
        for k in (0..n).rev() {
            x.swap(k, self.piv[k]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite("lu solve_transpose"));
        }
        Ok(Vector::from_raw(x))
    }
}

/// Direct solve of A x = b by LU with partial pivoting.
pub fn lu_solve(a: &Matrix, b: &Vector) -> Result<Vector, LinalgError> {
    lu_factor(a)?.solve(b)
}

// ── Spectral radius ─────────────────────────────────────────────────

/// Power-iteration estimate of the dominant eigenvalue magnitude.
///
/// Starts from the fixed vector (1, 1/2, 1/3, …)/‖·‖ for determinism. The
/// per-step growth ratios are combined through a short geometric window so
/// that complex conjugate pairs (whose raw ratios oscillate) still settle;
/// convergence is declared when successive estimates differ by less than
/// `tol`. On `NoConvergence` the last estimate is still reported and may be
/// used by the caller.
pub fn spectral_radius(
    op: &dyn LinearOperator,
    max_iter: usize,
    tol: f64,
) -> Result<f64, LinalgError> {
    let n = op.dim_in();
    if n != op.dim_out() || n == 0 {
        return Err(LinalgError::DimensionMismatch {
            context: "spectral_radius",
            expected: n,
            got: op.dim_out(),
        });
    }
    if n == 1 {
        let w = op.apply(&Vector::ones(1))?;
        return Ok(w[0].abs());
    }

    let mut v = Vector::from_raw((0..n).map(|i| 1.0 / (i as f64 + 1.0)).collect());
    v = v.scale(1.0 / v.norm_l2());

    const WINDOW: usize = 8;
    let mut ratios: Vec<f64> = Vec::new();
    let mut last_est = f64::NAN;
    for _ in 0..max_iter {
        let w = op.apply(&v)?;
        let norm = w.norm_l2();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if !norm.is_finite() {
            return Err(LinalgError::NonFinite("spectral_radius"));
        }
        ratios.push(norm);
        let tail = &ratios[ratios.len().saturating_sub(WINDOW)..];
        let est = (tail.iter().map(|r| r.ln()).sum::<f64>() / tail.len() as f64).exp();
        if last_est.is_finite() && (est - last_est).abs() < tol {
            return Ok(est);
        }
        last_est = est;
        v = w.scale(1.0 / norm);
    }
    Err(LinalgError::NoConvergence { estimate: last_est })
}
