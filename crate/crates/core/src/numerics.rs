//! Dense complex Hermitian linear algebra shared by the solvers.
//!
//! Matrices here are small (M up to a few dozen), so everything is dense and
//! backed by `nalgebra`. Tolerances are relative to the matrix magnitude
//! because the quantities involved span from noise powers around 1e-13 W up to
//! transmit budgets around 1 W.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type ComplexVector = DVector<Complex64>;

/// Relative tolerance for the Hermitian symmetry check.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// A square complex matrix with `A == A^H`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(DMatrix<Complex64>);

impl HermitianMatrix {
    /// Validates symmetry and diagonal realness, then stores the exact
    /// Hermitian part so downstream code never sees round-off asymmetry.
    pub fn new(m: DMatrix<Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape(format!(
                "matrix is {}x{}, expected square",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = 1.0 + max_abs(&m);
        let n = m.nrows();
        for i in 0..n {
            for j in i..n {
                let a = m[(i, j)];
                let b = m[(j, i)];
                if !a.re.is_finite() || !a.im.is_finite() {
                    return Err(Error::NonFinite("matrix entry".into()));
                }
                let asym = (a - b.conj()).norm();
                if asym > HERMITIAN_TOL * scale {
                    return Err(Error::NotHermitian {
                        row: i,
                        col: j,
                        asymmetry: asym,
                    });
                }
            }
        }
        Ok(Self::hermitian_part(m))
    }

    /// `(A + A^H) / 2` without validation.
    pub fn hermitian_part(m: DMatrix<Complex64>) -> Self {
        let h = (&m + m.adjoint()).scale(0.5);
        Self(h)
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self(DMatrix::from_diagonal_element(n, n, Complex64::new(s, 0.0)))
    }

    pub fn from_real_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = Complex64::new(v, 0.0);
        }
        Self(m)
    }

    /// `c * v v^H`
    pub fn outer(v: &ComplexVector, c: f64) -> Self {
        Self::hermitian_part((v * v.adjoint()).scale(c))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<Complex64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.0)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// `v^H A v`, returned as a complex number so callers can inspect the
    /// (round-off) imaginary part.
    pub fn quad_form(&self, v: &ComplexVector) -> Complex64 {
        v.dotc(&(&self.0 * v))
    }

    /// Real part of `v^H A v`.
    pub fn quad_form_re(&self, v: &ComplexVector) -> f64 {
        self.quad_form(v).re
    }

    /// `A += c * v v^H`, keeping exact symmetry.
    pub fn add_outer(&mut self, v: &ComplexVector, c: f64) {
        let n = self.dim();
        for j in 0..n {
            for i in 0..n {
                self.0[(i, j)] += v[i] * v[j].conj() * c;
            }
        }
        for i in 0..n {
            self.0[(i, i)].im = 0.0;
        }
    }

    /// `A += s * I`
    pub fn add_identity(&mut self, s: f64) {
        for i in 0..self.dim() {
            self.0[(i, i)].re += s;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.scale(s))
    }

    pub fn add(&self, other: &Self) -> Self {
        Self(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(&self.0 - &other.0)
    }

    /// Frobenius inner product `Re tr(A B)` for Hermitian A, B.
    pub fn inner(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a.conj() * b).re)
            .sum()
    }

    /// `U A U^H` for a basis `U` with `A` of matching inner dimension.
    pub fn congruence(&self, basis: &DMatrix<Complex64>) -> Self {
        Self::hermitian_part(basis * &self.0 * basis.adjoint())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Eigendecomposition with eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in the order of `values`.
    pub vectors: DMatrix<Complex64>,
}

impl HermitianEigen {
    pub fn vector(&self, i: usize) -> ComplexVector {
        self.vectors.column(i).into_owned()
    }

    /// `V diag(f(λ)) V^H`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> HermitianMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &lam) in self.values.iter().enumerate() {
            let s = f(lam);
            for i in 0..n {
                scaled[(i, j)] *= s;
            }
        }
        HermitianMatrix::hermitian_part(&scaled * self.vectors.adjoint())
    }
}

pub fn hermitian_eig(a: &HermitianMatrix) -> HermitianEigen {
    let n = a.dim();
    if n == 0 {
        return HermitianEigen {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        };
    }
    let eig = SymmetricEigen::new(a.as_matrix().clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    HermitianEigen { values, vectors }
}

/// Smallest eigenvalue and a unit eigenvector for it. Any vector of a
/// repeated smallest eigenvalue is acceptable to callers.
pub fn min_eigpair(a: &HermitianMatrix) -> (f64, ComplexVector) {
    let eig = hermitian_eig(a);
    let v = eig.vector(0);
    let v = normalize(&v);
    (eig.values[0], v)
}

/// Frobenius-nearest positive semidefinite matrix.
pub fn project_psd(a: &HermitianMatrix) -> HermitianMatrix {
    let eig = hermitian_eig(a);
    if eig.values.first().copied().unwrap_or(0.0) >= 0.0 {
        return a.clone();
    }
    eig.reconstruct_with(|l| l.max(0.0))
}

/// `lambda_min(A) >= -tol * (1 + maxabs(A))`
pub fn is_psd(a: &HermitianMatrix, tol: f64) -> bool {
    let eig = hermitian_eig(a);
    eig.values.first().is_none_or(|&l| l >= -tol * (1.0 + a.max_abs()))
}

/// Solves `A x = rhs` for Hermitian positive definite `A`.
pub fn solve_hpd(a: &HermitianMatrix, rhs: &ComplexVector) -> Result<ComplexVector> {
    let n = a.dim();
    if rhs.len() != n {
        return Err(Error::Shape(format!(
            "rhs has length {}, matrix is {n}x{n}",
            rhs.len()
        )));
    }
    let scale = a.max_abs();
    if scale == 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let chol = nalgebra::linalg::Cholesky::new(a.as_matrix().clone())
        .ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l_dirty();
    let min_pivot = (0..n).map(|i| l[(i, i)].re).fold(f64::INFINITY, f64::min);
    if min_pivot * min_pivot <= 1e-14 * scale {
        return Err(Error::NotPositiveDefinite);
    }
    let mut x = chol.solve(rhs);
    // One step of iterative refinement.
    let r = rhs - a.as_matrix() * &x;
    x += chol.solve(&r);
    let res = (rhs - a.as_matrix() * &x).norm();
    let denom = rhs.norm().max(scale * x.norm());
    if denom > 0.0 && res > 1e-10 * denom {
        return Err(Error::IllConditioned(res / denom));
    }
    Ok(x)
}

pub fn normalize(v: &ComplexVector) -> ComplexVector {
    let n = v.norm();
    if n == 0.0 {
        v.clone()
    } else {
        v.unscale(n)
    }
}

pub fn ensure_finite(v: &ComplexVector, what: &str) -> Result<()> {
    if v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
