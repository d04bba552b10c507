//! Dense linear algebra used by the editing pipeline.
//!
//! Everything is `f64` and backed by `nalgebra`'s dynamically sized
//! matrices. The functions here are pure; they validate their inputs at the
//! boundary (finite entries, orthonormality, symmetry) and return
//! [`Error`] values instead of panicking.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Tolerance used when checking orthonormal columns.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Condition number of `WᵀW` beyond which an oblique projector is refused.
pub const MAX_GRAM_CONDITION: f64 = 1e8;

pub fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

pub fn ensure_finite_vec(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

/// Thin singular value decomposition `a = U diag(s) Vᵀ` with `s` sorted
/// nonincreasing.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let s = Matrix::from_diagonal(&Vector::from_vec(self.singular_values.clone()));
        &self.u * s * self.v.transpose()
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    ensure_finite(a, "svd input")?;
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Ok(Svd {
            u: Matrix::zeros(rows, 0),
            singular_values: Vec::new(),
            v: Matrix::zeros(cols, 0),
        });
    }
    let dec = SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Factorization("svd did not converge".into()))?;
    let u = dec.u.expect("requested U");
    let v_t = dec.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..dec.singular_values.len()).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));
    let k = order.len();
    let mut su = Matrix::zeros(rows, k);
    let mut sv = Matrix::zeros(cols, k);
    let mut values = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_column(dst, &v_t.row(src).transpose());
        values.push(dec.singular_values[src].max(0.0));
    }
    Ok(Svd {
        u: su,
        singular_values: values,
        v: sv,
    })
}

/// Singular values with their energy bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySpectrum {
    pub singular_values: Vec<f64>,
    pub total_energy: f64,
    pub selected_rank: usize,
}

impl EnergySpectrum {
    pub fn new(singular_values: Vec<f64>, tau_energy: f64) -> Result<Self> {
        let selected_rank = energy_rank(&singular_values, tau_energy)?;
        let total_energy = singular_values.iter().map(|s| s * s).sum();
        Ok(Self {
            singular_values,
            total_energy,
            selected_rank,
        })
    }

    /// Fraction of the total energy carried by the first `m` components.
    pub fn cumulative_fraction(&self, m: usize) -> f64 {
        let head: f64 = self.singular_values.iter().take(m).map(|s| s * s).sum();
        head / self.total_energy
    }
}

/// Smallest `m` such that the first `m` squared singular values reach
/// `tau_energy` of the total energy. Ties resolve to the smaller `m`.
pub fn energy_rank(singular_values: &[f64], tau_energy: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&tau_energy) {
        return Err(Error::InvalidInput(format!(
            "tau_energy must lie in [0, 1), got {tau_energy}"
        )));
    }
    ensure_finite_vec(singular_values, "spectrum")?;
    if singular_values.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidInput("negative singular value".into()));
    }
    if singular_values.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidInput("spectrum is not nonincreasing".into()));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    let threshold = tau_energy * total;
    let mut cumulative = 0.0;
    for m in 0..=singular_values.len() {
        if cumulative >= threshold {
            return Ok(m);
        }
        if m < singular_values.len() {
            cumulative += singular_values[m] * singular_values[m];
        }
    }
    Ok(singular_values.len())
}

/// Max-abs deviation of `cᵀc` from the identity.
pub fn orthonormality_error(columns: &Matrix) -> f64 {
    let gram = columns.transpose() * columns;
    let n = gram.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Orthogonal projector `C Cᵀ` onto the span of orthonormal columns.
pub fn projector_from_basis(columns: &Matrix) -> Result<Matrix> {
    ensure_finite(columns, "basis")?;
    let err = orthonormality_error(columns);
    if err > ORTHONORMAL_TOL {
        return Err(Error::InvalidBasis(format!(
            "columns deviate from orthonormal by {err:.3e}"
        )));
    }
    if columns.ncols() == 0 {
        return Ok(Matrix::zeros(columns.nrows(), columns.nrows()));
    }
    Ok(columns * columns.transpose())
}

/// Projector `W (WᵀW)⁻¹ Wᵀ` onto the span of (not necessarily orthogonal)
/// independent columns.
pub fn oblique_projector(w: &Matrix) -> Result<Matrix> {
    ensure_finite(w, "direction matrix")?;
    if w.ncols() == 0 {
        return Err(Error::InvalidInput("no columns".into()));
    }
    let gram = w.transpose() * w;
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || max / min > MAX_GRAM_CONDITION {
        return Err(Error::IllConditioned(format!(
            "gram matrix condition number {:.3e} exceeds {MAX_GRAM_CONDITION:e}",
            if min > 0.0 { max / min } else { f64::INFINITY }
        )));
    }
    let coeff = solve_spd(&gram, &w.transpose())?;
    Ok(w * coeff)
}

/// Solve `a x = b` for symmetric positive definite `a` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure_finite(a, "system matrix")?;
    ensure_finite(b, "right-hand side")?;
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "system {}x{} with rhs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > 1e-8 * scale {
        return Err(Error::Factorization("matrix is not symmetric".into()));
    }
    let chol = Cholesky::new(a.clone())
        .ok_or_else(|| Error::Factorization("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Minimum-norm solution of `a x = b` for symmetric positive semidefinite
/// `a`, dropping eigenvalues below `rcond · λ_max`.
pub fn solve_psd_pinv(a: &Matrix, b: &Matrix, rcond: f64) -> Result<Matrix> {
    ensure_finite(b, "right-hand side")?;
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "system {}x{} with rhs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let (values, vectors) = symmetric_eigen(a)?;
    let cut = rcond * values.first().copied().unwrap_or(0.0).max(0.0);
    let mut coeff = vectors.transpose() * b;
    for (i, &v) in values.iter().enumerate() {
        let scale = if v > cut && v > 0.0 { 1.0 / v } else { 0.0 };
        coeff.row_mut(i).scale_mut(scale);
    }
    Ok(vectors * coeff)
}

/// Solve a general square system `a x = b` by LU with partial pivoting.
pub fn solve_general(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure_finite(a, "system matrix")?;
    ensure_finite(b, "right-hand side")?;
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "system {}x{} with rhs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Factorization("singular system".into()))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted
/// nonincreasing and eigenvectors as matching columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    ensure_finite(a, "symmetric matrix")?;
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(a.nrows(), order.len());
    let mut values = Vec::with_capacity(order.len());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
        values.push(eig.eigenvalues[src]);
    }
    Ok((values, vectors))
}

pub fn relative_frobenius(a: &Matrix, reference: &Matrix) -> f64 {
    let denom = reference.norm();
    let diff = (a - reference).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
