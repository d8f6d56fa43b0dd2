//! Dense vector and matrix kernels.
//!
//! Every `Vector` and `Matrix` holds finite entries only. Arithmetic that would
//! overflow to a non-finite value returns [`LinalgError::NonFinite`] instead of a
//! poisoned value, which the solvers translate into a divergence verdict.
//!
//! The pairing `<x, y>` used by the monotonicity and resolvent contracts is the
//! Euclidean inner product, and an unqualified norm is the Euclidean norm.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("vector must have at least one coordinate")]
    Empty,
    #[error("non-finite entry produced or supplied")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("ragged matrix rows: row {row} has {found} entries, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("linear solve residual {residual:e} exceeds bound {bound:e}")]
    ResidualCheck { residual: f64, bound: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Norm selector for [`Vector::norm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Euclidean,
    One,
    Infinity,
}

/// A point of the ambient space.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(LinalgError::Empty);
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self(coords))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(coords.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self, kind: NormKind) -> f64 {
        match kind {
            NormKind::Euclidean => self.norm2(),
            NormKind::One => self.0.iter().map(|c| c.abs()).sum(),
            NormKind::Infinity => self.0.iter().fold(0.0_f64, |m, c| m.max(c.abs())),
        }
    }

    /// Euclidean norm, scaled to avoid premature overflow.
    pub fn norm2(&self) -> f64 {
        let scale = self.norm(NormKind::Infinity);
        if scale == 0.0 {
            return 0.0;
        }
        let sum: f64 = self.0.iter().map(|c| (c / scale) * (c / scale)).sum();
        scale * sum.sqrt()
    }

    pub fn norm2_sq(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<Vector> {
        self.map(|c| factor * c)
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a + alpha * b)
    }

    /// Euclidean distance `‖self − other‖`.
    pub fn distance(&self, other: &Vector) -> Result<f64> {
        self.check_dim(other)?;
        let diff: Vec<f64> = self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect();
        match Vector::new(diff) {
            Ok(d) => Ok(d.norm2()),
            Err(LinalgError::NonFinite) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Vector> {
        Vector::new(self.0.iter().map(|&c| f(c)).collect())
    }

    pub fn zip_with(&self, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
        self.check_dim(other)?;
        Vector::new(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }

    /// Concatenation `[self; other]`.
    pub fn concat(&self, other: &Vector) -> Vector {
        let mut coords = self.0.clone();
        coords.extend_from_slice(&other.0);
        Vector(coords)
    }

    /// Splits into `[..at]` and `[at..]`; both halves must be nonempty.
    pub fn split_at(&self, at: usize) -> Result<(Vector, Vector)> {
        if at == 0 || at >= self.dim() {
            return Err(LinalgError::DimensionMismatch { expected: at, found: self.dim() });
        }
        let (a, b) = self.0.split_at(at);
        Ok((Vector(a.to_vec()), Vector(b.to_vec())))
    }

    pub fn check_dim(&self, other: &Vector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(LinalgError::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = LinalgError;
    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Vector::new(coords)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Free-function form of [`Vector::norm`]; rejects nothing since `Vector` is never empty.
pub fn norm(v: &Vector, kind: NormKind) -> f64 {
    v.norm(kind)
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Empty);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch { expected: rows * cols, found: data.len() });
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n_cols {
                return Err(LinalgError::Ragged { row: i, expected: n_cols, found: row.len() });
            }
            data.extend(row);
        }
        Self::new(n_rows, n_cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(entries: &[f64]) -> Result<Self> {
        let n = entries.len();
        let mut data = vec![0.0; n * n];
        for (i, &d) in entries.iter().enumerate() {
            data[i * n + i] = d;
        }
        Self::new(n, n, data)
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
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.cols {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, found: v.dim() });
        }
        let out = (0..self.rows)
            .map(|i| self.row(i).iter().zip(v.as_slice()).map(|(a, b)| a * b).sum())
            .collect();
        Vector::new(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|c| c * factor).collect())
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows * self.cols,
                found: other.rows * other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    /// `I + gamma * self`.
    pub fn shifted_identity(&self, gamma: f64) -> Result<Matrix> {
        self.require_square()?;
        let mut m = self.scale(gamma)?;
        for i in 0..self.rows {
            m.data[i * self.cols + i] += 1.0;
        }
        Ok(m)
    }

    /// Block `[self, other]` with equal row counts.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(LinalgError::DimensionMismatch { expected: self.rows, found: other.rows });
        }
        let rows = (0..self.rows)
            .map(|i| {
                let mut r = self.row(i).to_vec();
                r.extend_from_slice(other.row(i));
                r
            })
            .collect();
        Matrix::from_rows(rows)
    }

    /// Block `[self; other]` with equal column counts.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, found: other.cols });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix::new(self.rows + other.rows, self.cols, data)
    }

    pub fn symmetric_part(&self) -> Result<Matrix> {
        self.require_square()?;
        self.add(&self.transpose())?.scale(0.5)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&c| c == 0.0)
    }

    fn require_square(&self) -> Result<()> {
        if !self.is_square() {
            return Err(LinalgError::NotSquare { rows: self.rows, cols: self.cols });
        }
        Ok(())
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = LinalgError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.to_rows()).finish()
    }
}

/// Strong-monotonicity modulus and Lipschitz constant of `x ↦ A x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBounds {
    /// Smallest eigenvalue of `(A + Aᵀ)/2`. Nonpositive means not strongly monotone.
    pub mu: f64,
    /// Largest singular value of `A`.
    pub lipschitz: f64,
}

pub fn spectral_bounds(a: &Matrix) -> Result<SpectralBounds> {
    a.require_square()?;
    let sym = a.symmetric_part()?.to_nalgebra();
    let mu = sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SpectralBounds { mu, lipschitz: largest_singular_value(a) })
}

/// Operator 2-norm of any (possibly rectangular) matrix.
pub fn largest_singular_value(a: &Matrix) -> f64 {
    a.to_nalgebra().singular_values().iter().copied().fold(0.0, f64::max)
}

/// Solves `A x = b` by partially pivoted LU, then verifies `‖Ax − b‖ ≤ 1e-10·‖b‖`.
pub fn solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    a.require_square()?;
    if b.dim() != a.rows {
        return Err(LinalgError::DimensionMismatch { expected: a.rows, found: b.dim() });
    }
    let rhs = nalgebra::DVector::from_column_slice(b.as_slice());
    let x = a.to_nalgebra().lu().solve(&rhs).ok_or(LinalgError::Singular)?;
    let x = Vector::new(x.iter().copied().collect()).map_err(|_| LinalgError::Singular)?;
    let residual = a.mul_vec(&x)?.distance(b)?;
    // a zero right-hand side still needs a zero residual, up to roundoff in ‖A‖‖x‖
    let bound = 1e-10 * b.norm2().max(f64::MIN_POSITIVE);
    if residual > bound && residual > 1e-14 * largest_singular_value(a) * x.norm2() {
        return Err(LinalgError::ResidualCheck { residual, bound });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(c: &[f64]) -> Vector {
        Vector::from_slice(c).unwrap()
    }

    /// Roots of a monic polynomial with real, simple-or-repeated roots, found by
    /// scanning for sign changes of `p` and bisecting. Independent of nalgebra.
    fn real_roots(coeffs: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        let p = |x: f64| coeffs.iter().fold(0.0, |acc, c| acc * x + c);
        let n = 200_000;
        let mut roots = Vec::new();
        let mut prev_x = lo;
        let mut prev = p(lo);
        for k in 1..=n {
            let x = lo + (hi - lo) * k as f64 / n as f64;
            let cur = p(x);
            if prev == 0.0 {
                roots.push(prev_x);
            } else if prev.signum() != cur.signum() && cur != 0.0 {
                let (mut a, mut b) = (prev_x, x);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if p(a).signum() == p(m).signum() {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                roots.push(0.5 * (a + b));
            }
            prev_x = x;
            prev = cur;
        }
        roots
    }

    /// Characteristic polynomial coefficients (monic, descending) of a symmetric 2x2 or 3x3.
    fn char_poly(m: &Matrix) -> Vec<f64> {
        let g = |i, j| m.get(i, j);
        match m.rows() {
            2 => vec![1.0, -(g(0, 0) + g(1, 1)), g(0, 0) * g(1, 1) - g(0, 1) * g(1, 0)],
            3 => {
                let tr = g(0, 0) + g(1, 1) + g(2, 2);
                let minors = g(0, 0) * g(1, 1) - g(0, 1) * g(1, 0) + g(0, 0) * g(2, 2)
                    - g(0, 2) * g(2, 0)
                    + g(1, 1) * g(2, 2)
                    - g(1, 2) * g(2, 1);
                let det = g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1))
                    - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
                    + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0));
                vec![1.0, -tr, minors, -det]
            }
            _ => unreachable!(),
        }
    }

    fn oracle_bounds(a: &Matrix) -> (f64, f64) {
        let sym = a.symmetric_part().unwrap();
        let eig = real_roots(&char_poly(&sym), -50.0, 50.0);
        let ata = {
            let at = a.transpose();
            let n = a.rows();
            let mut rows = vec![vec![0.0; n]; n];
            for (i, row) in rows.iter_mut().enumerate() {
                for (j, e) in row.iter_mut().enumerate() {
                    *e = (0..n).map(|k| at.get(i, k) * a.get(k, j)).sum();
                }
            }
            Matrix::from_rows(rows).unwrap()
        };
        let sv = real_roots(&char_poly(&ata), -1.0, 2500.0);
        let mu = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let l = sv.iter().copied().fold(0.0, f64::max).sqrt();
        (mu, l)
    }

    #[test]
    fn norms() {
        assert_eq!(v(&[0.0, 0.0, 0.0]).norm(NormKind::Euclidean), 0.0);
        assert_eq!(v(&[1.0, 0.0]).norm(NormKind::Euclidean), 1.0);
        assert_eq!(v(&[3.0, 4.0]).norm(NormKind::Euclidean), 5.0);
        assert_eq!(v(&[3.0, -4.0]).norm(NormKind::One), 7.0);
        assert_eq!(v(&[3.0, -4.0]).norm(NormKind::Infinity), 4.0);
    }

    #[test]
    fn empty_and_nonfinite_rejected() {
        assert_eq!(Vector::new(vec![]), Err(LinalgError::Empty));
        assert_eq!(Vector::new(vec![1.0, f64::NAN]), Err(LinalgError::NonFinite));
        assert_eq!(v(&[f64::MAX]).scale(2.0), Err(LinalgError::NonFinite));
        assert!(matches!(
            Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0]]),
            Err(LinalgError::Ragged { row: 1, .. })
        ));
    }

    #[test]
    fn spectral_bounds_examples() {
        let b = spectral_bounds(&Matrix::diag(&[2.0, 1.0]).unwrap()).unwrap();
        assert_relative_eq!(b.mu, 1.0, max_relative = 1e-12);
        assert_relative_eq!(b.lipschitz, 2.0, max_relative = 1e-12);

        let b = spectral_bounds(&Matrix::identity(2).unwrap()).unwrap();
        assert_relative_eq!(b.mu, 1.0, max_relative = 1e-12);
        assert_relative_eq!(b.lipschitz, 1.0, max_relative = 1e-12);

        // oracle: bisection on the characteristic polynomials, frozen here
        let a = Matrix::from_rows(vec![vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let (mu_o, l_o) = oracle_bounds(&a);
        assert_relative_eq!(mu_o, 0.792_893_218_813_452_5, max_relative = 1e-9);
        assert_relative_eq!(l_o, 2.288_245_611_270_737, max_relative = 1e-9);
        let b = spectral_bounds(&a).unwrap();
        assert_relative_eq!(b.mu, 0.792_893_218_813_452_5, max_relative = 1e-9);
        assert_relative_eq!(b.lipschitz, 2.288_245_611_270_737, max_relative = 1e-9);
    }

    #[test]
    fn spectral_bounds_rejects_rectangular() {
        let a = Matrix::zeros(2, 3).unwrap();
        assert_eq!(spectral_bounds(&a), Err(LinalgError::NotSquare { rows: 2, cols: 3 }));
    }

    #[test]
    fn solve_checks_singularity() {
        let a = Matrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(solve(&a, &v(&[1.0, 1.0])).is_err());
        let a = Matrix::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(solve(&a, &v(&[3.0, 4.0])).unwrap(), v(&[4.0, 3.0]));
    }

    fn small_vec(dim: usize) -> impl Strategy<Value = Vector> {
        proptest::collection::vec(-1e3..1e3f64, dim).prop_map(|c| Vector::new(c).unwrap())
    }

    fn sym_matrix(n: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-5.0..5.0f64, n * n).prop_map(move |d| {
            let m = Matrix::new(n, n, d).unwrap();
            m.symmetric_part().unwrap()
        })
    }

    proptest! {
        #[test]
        fn norm_homogeneity(x in small_vec(4), a in -1e3..1e3f64) {
            let lhs = x.scale(a).unwrap().norm2();
            let rhs = a.abs() * x.norm2();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
        }

        #[test]
        fn triangle_inequality(x in small_vec(5), y in small_vec(5)) {
            prop_assert!(x.add(&y).unwrap().norm2() <= x.norm2() + y.norm2() + 1e-12);
        }

        #[test]
        fn symmetric_bounds_match_char_poly_2x2(m in sym_matrix(2)) {
            let (mu_o, _) = oracle_bounds(&m);
            let b = spectral_bounds(&m).unwrap();
            let eig = real_roots(&char_poly(&m), -50.0, 50.0);
            prop_assume!(eig.len() == 2);
            let max_abs = eig.iter().fold(0.0_f64, |a, e| a.max(e.abs()));
            prop_assert!((b.mu - mu_o).abs() <= 1e-9 * (1.0 + mu_o.abs()));
            prop_assert!((b.lipschitz - max_abs).abs() <= 1e-9 * (1.0 + max_abs));
        }

        #[test]
        fn symmetric_bounds_match_char_poly_3x3(m in sym_matrix(3)) {
            let b = spectral_bounds(&m).unwrap();
            let eig = real_roots(&char_poly(&m), -50.0, 50.0);
            prop_assume!(eig.len() == 3);
            let mu_o = eig.iter().copied().fold(f64::INFINITY, f64::min);
            let max_abs = eig.iter().fold(0.0_f64, |a, e| a.max(e.abs()));
            prop_assert!((b.mu - mu_o).abs() <= 1e-9 * (1.0 + mu_o.abs()));
            prop_assert!((b.lipschitz - max_abs).abs() <= 1e-9 * (1.0 + max_abs));
        }
    }
}
