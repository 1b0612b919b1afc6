//! Small dense helpers shared by the estimator, projection and metrics code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sorted_sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Eigendecomposition that rejects matrices which are not symmetric positive definite.
pub fn spd_eigen(m: &DMatrix<f64>, what: &'static str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what} must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    if !is_symmetric(m, 1e-12) {
        return Err(Error::NotSpd(what));
    }
    let (values, vectors) = sorted_sym_eigen(m);
    if values.is_empty() || values[0] <= 0.0 {
        return Err(Error::NotSpd(what));
    }
    Ok((values, vectors))
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    (0..n).all(|i| ((i + 1)..n).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn psd_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Induced infinity norm (maximum absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `‖a·b − I‖∞`.
pub fn inverse_residual(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut prod = a * b;
    for i in 0..prod.nrows() {
        prod[(i, i)] -= 1.0;
    }
    inf_norm(&prod)
}

/// Inverse of an SPD matrix through its Cholesky factor, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let chol = m.clone().cholesky().ok_or(Error::NotSpd(what))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}
