//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Extreme eigenvalues of a symmetric matrix, `(min, max)`.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = symmetrize(m).symmetric_eigenvalues();
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eig_range(m).0
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square() && nalgebra::linalg::Cholesky::new(symmetrize(m)).is_some()
}

pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn diag(entries: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn radius_of_rotation_block() {
        let a = dmatrix![0.0, -0.5; 0.5, 0.0];
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-12);
        assert!((spectral_norm(&a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn definiteness() {
        assert!(is_positive_definite(&diag(&[1.0, 2.0])));
        assert!(!is_positive_definite(&diag(&[1.0, -2.0])));
        assert_eq!(sym_eig_range(&diag(&[3.0, -1.0, 2.0])), (-1.0, 3.0));
    }
}
