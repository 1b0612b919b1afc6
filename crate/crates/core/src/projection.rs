//! Projection onto the Euclidean ball `‖ω‖ ≤ D` in the metric of an SPD matrix:
//!
//! ```text
//! Π_M(x) = argmin_{‖ω‖ ≤ D} (x − ω)ᵀ M (x − ω)
//! ```
//!
//! For an exterior `x` the minimizer is `ω(λ) = (M + λI)⁻¹ M x` with the
//! multiplier `λ > 0` chosen so that `‖ω(λ)‖ = D`. In the eigenbasis of `M`
//! that is a one-dimensional secular equation, solved by Newton's method on
//! `1/D − 1/‖ω(λ)‖` inside a shrinking bracket.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::spd_eigen;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// Inputs within this relative margin of the ball are returned unchanged.
pub const BOUNDARY_GRACE: f64 = 1e-12;

const MAX_SECULAR_ITERATIONS: usize = 500;

#[derive(Debug, Clone)]
pub struct WeightedProjection {
    pub point: DVector<f64>,
    /// Lagrange multiplier of the norm constraint (0 on the interior branch).
    pub multiplier: f64,
    /// Whether the constraint was active.
    pub active: bool,
}

pub fn project_weighted_ball(m: &DMatrix<f64>, x: &DVector<f64>, radius: f64, tol: f64) -> Result<WeightedProjection> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if !(tol > 0.0 && tol <= 1e-4) {
        return Err(Error::InvalidArgument(format!("tolerance must lie in (0, 1e-4], got {tol}")));
    }
    if m.nrows() != x.len() || m.ncols() != x.len() {
        return Err(Error::Dimension(format!(
            "weight is {}x{} but point has length {}",
            m.nrows(),
            m.ncols(),
            x.len()
        )));
    }
    ensure_finite(x.as_slice(), "projection input")?;
    let (eigvals, eigvecs) = spd_eigen(m, "projection weight")?;
    if x.norm() <= radius * (1.0 + BOUNDARY_GRACE) {
        return Ok(WeightedProjection { point: x.clone(), multiplier: 0.0, active: false });
    }
    let coords = eigvecs.tr_mul(x);
    let lambda = secular_root(eigvals.as_slice(), coords.as_slice(), radius, tol)?;
    let scaled = DVector::from_fn(coords.len(), |i, _| eigvals[i] * coords[i] / (eigvals[i] + lambda));
    Ok(WeightedProjection { point: &eigvecs * scaled, multiplier: lambda, active: true })
}

fn omega_norm_sq(eigvals: &[f64], coords: &[f64], lambda: f64) -> (f64, f64) {
    // (‖ω(λ)‖², d‖ω(λ)‖²/dλ)
    let mut value = 0.0;
    let mut slope = 0.0;
    for (&e, &c) in eigvals.iter().zip(coords) {
        let denom = e + lambda;
        let w = e * c / denom;
        value += w * w;
        slope -= 2.0 * w * w / denom;
    }
    (value, slope)
}

/// Root `λ* ≥ 0` of `‖ω(λ)‖ = D` where `‖ω(λ)‖² = Σ (λ_i c_i / (λ_i + λ))²`.
///
/// Requires the strictly exterior case `‖c‖ > D`. The root is bracketed by
/// `λ_min(‖c‖/D − 1) ≤ λ* ≤ λ_max(‖c‖/D − 1)`.
pub fn secular_root(eigvals: &[f64], coords: &[f64], radius: f64, tol: f64) -> Result<f64> {
    if eigvals.len() != coords.len() {
        return Err(Error::Dimension("eigenvalue and coordinate counts differ".into()));
    }
    if eigvals.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::NotSpd("secular equation eigenvalues"));
    }
    let c_norm = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
    if c_norm <= radius {
        return Err(Error::InteriorPoint { norm: c_norm, radius });
    }
    if c_norm - radius <= tol * radius {
        return Ok(0.0);
    }
    let e_min = eigvals.iter().cloned().fold(f64::INFINITY, f64::min);
    let e_max = eigvals.iter().cloned().fold(0.0, f64::max);
    let excess = c_norm / radius - 1.0;
    let mut lo = e_min * excess;
    let mut hi = e_max * excess;
    let mut lambda = lo;

    for _ in 0..MAX_SECULAR_ITERATIONS {
        let (sq, dsq) = omega_norm_sq(eigvals, coords, lambda);
        let norm = sq.sqrt();
        if (norm - radius).abs() <= tol * radius {
            return Ok(lambda);
        }
        if norm > radius {
            lo = lo.max(lambda);
        } else {
            hi = hi.min(lambda);
        }
        // Newton on ψ(λ) = 1/D − 1/‖ω‖, with ψ′ = ½‖ω‖⁻³ d‖ω‖²/dλ.
        let psi = 1.0 / radius - 1.0 / norm;
        let dpsi = 0.5 * dsq / (sq * norm);
        let newton = lambda - psi / dpsi;
        lambda = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * hi.max(1.0) {
            return Ok(hi);
        }
    }
    // The bracket always holds a root; return its feasible end.
    Ok(hi)
}
