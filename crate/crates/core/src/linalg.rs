//! Small dense linear-algebra helpers used across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Largest absolute asymmetry `max |m_ij - m_ji|`.
pub fn asymmetry<T: Real>(m: &DMatrix<T>) -> T {
    let mut worst = T::zero();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let d = (m[(i, j)] - m[(j, i)]).abs();
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<T> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

pub fn min_eig<T: Real>(m: &DMatrix<T>) -> T {
    sym_eigenvalues(m).first().copied().unwrap_or_else(T::zero)
}

pub fn max_eig<T: Real>(m: &DMatrix<T>) -> T {
    sym_eigenvalues(m).last().copied().unwrap_or_else(T::zero)
}

/// Smallest eigenvalue together with a unit eigenvector.
pub fn min_eigpair<T: Real>(m: &DMatrix<T>) -> (T, DVector<T>) {
    let eig = symmetrize(m).symmetric_eigen();
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn sym_sqrt<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(T::zero()).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `x^T P^{-1} x` through a Cholesky solve, no explicit inverse.
pub fn inv_quad_form<T: Real>(p: &DMatrix<T>, x: &DVector<T>) -> Result<T> {
    if p.nrows() != x.len() || !p.is_square() {
        return Err(Error::contract("inv_quad_form: dimension mismatch"));
    }
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::contract("matrix is not symmetric positive definite"))?;
    let y = chol.l().solve_lower_triangular(x).ok_or_else(|| Error::numerical("triangular solve failed"))?;
    Ok(y.dot(&y))
}

pub fn spd_inverse<T: Real>(p: &DMatrix<T>) -> Result<DMatrix<T>> {
    p.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::contract("matrix is not symmetric positive definite"))
}

pub fn spectral_radius<T: Real>(a: &DMatrix<T>) -> T {
    if a.nrows() == 0 {
        return T::zero();
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| (z.re * z.re + z.im * z.im).sqrt())
        .fold(T::zero(), |acc, v| if v > acc { v } else { acc })
}

pub fn all_finite<T: Real>(v: &DVector<T>) -> bool {
    v.iter().all(|x| x.is_finite_val())
}

pub fn mat_all_finite<T: Real>(m: &DMatrix<T>) -> bool {
    m.iter().all(|x| x.is_finite_val())
}

/// Radical-inverse (van der Corput) value of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    r
}

const PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Point `index` of the Halton sequence in `[0,1)^dim`.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "halton: dimension {dim} too large");
    (0..dim).map(|d| radical_inverse(index + 1, PRIMES[d])).collect()
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn cast_mat<T: Real>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::lit)
}

pub fn cast_vec<T: Real>(v: &DVector<f64>) -> DVector<T> {
    v.map(T::lit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inv_quad_form_matches_explicit_inverse() {
        let p = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let explicit = (x.transpose() * p.clone().try_inverse().unwrap() * &x)[(0, 0)];
        let via_chol: f64 = inv_quad_form(&p, &x).unwrap();
        assert!((explicit - via_chol).abs() < 1e-12);
    }

    #[test]
    fn halton_first_points() {
        assert_eq!(halton(0, 2), vec![0.5, 1.0 / 3.0]);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn sym_sqrt_squares_back() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let s = sym_sqrt(&p);
        assert!((&s * &s - &p).abs().max() < 1e-12);
    }
}
