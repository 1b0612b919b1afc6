//! Recursive projected Newton-type estimator.
//!
//! One step of the recursion, with `φ = ∇_θᵀh(θ̂_t, y_t, u_t)` (`p × n`):
//!
//! ```text
//! Γ_t     = (I + η_t² φᵀ P_t φ)⁻¹
//! P_{t+1} = P_t − η_t² P_t φ Γ_t φᵀ P_t
//! η_t     = 1 / (α_t⁻¹ + 2β ‖φᵀ P_{t+1} φ‖),   α_t = α(‖y_t‖ + ‖u_t‖ + D)
//! θ̂_{t+1} = Π_{P_{t+1}⁻¹}{ θ̂_t + η_t P_{t+1} φ (y_{t+1} − h(θ̂_t, y_t, u_t)) }
//! ```
//!
//! `η_t` and `P_{t+1}` depend on each other. Since `φᵀP_{t+1}(η)φ = G(I + η²G)⁻¹`
//! with `G = φᵀP_tφ`, the gain norm is `m(η) = g/(1 + η²g)` for `g = ‖G‖`, and
//! `η ↦ 1/(α⁻¹ + 2βm(η))` is increasing. Iterating it from `η = 0` climbs
//! monotonically to the fixed point, and every iterate already satisfies
//! `η ≤ α` and `βη‖φᵀP_{t+1}φ‖ ≤ 1/2`.
//!
//! `P_t⁻¹` is carried alongside `P_t` through `P_{t+1}⁻¹ = P_t⁻¹ + η_t²φφᵀ`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{inverse_residual, psd_spectral_norm, spd_inverse, symmetrize};
use crate::models::{Jacobian, ParamVector, SystemModel};
use crate::projection::{project_weighted_ball, DEFAULT_TOLERANCE};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Solve the implicit step-size equation by monotone fixed-point iteration.
    #[default]
    ImplicitFixedPoint,
    /// Use `P_t` in place of `P_{t+1}` in the step-size formula.
    ExplicitConservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Fixed-point stopping rule, relative to `α_t`.
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub projection_tol: f64,
    /// `‖P·P⁻¹ − I‖∞` above this triggers a refactorization.
    pub consistency_threshold: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fp_tol: 1e-10,
            fp_max_iter: 50,
            projection_tol: DEFAULT_TOLERANCE,
            consistency_threshold: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepSize {
    pub eta: f64,
    pub p_next: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub fp_iters: usize,
    /// `‖φᵀ P_{t+1} φ‖₂` evaluated with the returned `P_{t+1}`.
    pub gain_norm: f64,
}

/// Step size `η_t` together with the consistent `P_{t+1}` and `Γ_t`.
pub fn solve_step_size(
    phi: &Jacobian,
    p: &DMatrix<f64>,
    alpha: f64,
    beta: f64,
    mode: StepMode,
    fp_tol: f64,
    fp_max_iter: usize,
) -> Result<StepSize> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("α_t must be positive, got {alpha}")));
    }
    if !(beta >= 1.0) {
        return Err(Error::InvalidArgument(format!("β must be >= 1, got {beta}")));
    }
    if p.nrows() != phi.nrows() || !p.is_square() {
        return Err(Error::Dimension(format!(
            "P is {}x{} but φ has {} rows",
            p.nrows(),
            p.ncols(),
            phi.nrows()
        )));
    }
    ensure_finite(phi.as_slice(), "Jacobian")?;
    ensure_finite(p.as_slice(), "P")?;

    let p_phi = p * phi;
    let mut g_mat = phi.tr_mul(&p_phi);
    symmetrize(&mut g_mat);
    let g = psd_spectral_norm(&g_mat);
    let n = phi.ncols();

    let step = |eta: f64| 1.0 / (1.0 / alpha + 2.0 * beta * g / (1.0 + eta * eta * g));
    let mut eta = step(0.0);
    let mut fp_iters = 0;
    if mode == StepMode::ImplicitFixedPoint && g > 0.0 {
        while fp_iters < fp_max_iter {
            let next = step(eta);
            fp_iters += 1;
            let done = (next - eta).abs() <= fp_tol * alpha;
            eta = next;
            if done {
                break;
            }
        }
    }

    if g == 0.0 {
        return Ok(StepSize {
            eta,
            p_next: p.clone(),
            gamma: DMatrix::identity(n, n),
            fp_iters,
            gain_norm: 0.0,
        });
    }

    let eta2 = eta * eta;
    let inner = DMatrix::identity(n, n) + &g_mat * eta2;
    let gamma = spd_inverse(&inner, "I + η²φᵀPφ")?;
    let mut p_next = p - (&p_phi * &gamma * p_phi.transpose()) * eta2;
    symmetrize(&mut p_next);
    let mut gain = phi.tr_mul(&(&p_next * phi));
    symmetrize(&mut gain);
    Ok(StepSize {
        eta,
        gain_norm: psd_spectral_norm(&gain),
        p_next,
        gamma,
        fp_iters,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub eta: f64,
    pub alpha_t: f64,
    pub gain_norm: f64,
    pub fp_iters: usize,
    pub projection_active: bool,
    pub innovation: Vec<f64>,
    /// `‖φ_t‖²` (Frobenius).
    pub grad_sq_norm: f64,
    pub refactorized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyCheck {
    pub residual: f64,
    pub repaired: bool,
}

#[derive(Debug, Clone)]
pub struct EstimatorState {
    theta_hat: ParamVector,
    p: DMatrix<f64>,
    p_inv: DMatrix<f64>,
    t: usize,
    radius: f64,
    beta: f64,
    step_mode: StepMode,
    tolerances: Tolerances,
    refactorizations: usize,
}

impl EstimatorState {
    /// `P₀ = P₀⁻¹ = I`; an initial estimate outside the ball is pulled radially onto it.
    pub fn new(
        model: &SystemModel,
        theta0: &ParamVector,
        radius: f64,
        step_mode: StepMode,
        tolerances: Tolerances,
    ) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!("radius D must be positive, got {radius}")));
        }
        let p = model.dims().p;
        if theta0.len() != p {
            return Err(Error::Dimension(format!("θ̂₀ has length {}, model has p = {p}", theta0.len())));
        }
        ensure_finite(theta0.as_slice(), "initial estimate")?;
        let norm = theta0.norm();
        let theta_hat = if norm > radius { theta0 * (radius / norm) } else { theta0.clone() };
        Ok(Self {
            theta_hat,
            p: DMatrix::identity(p, p),
            p_inv: DMatrix::identity(p, p),
            t: 0,
            radius,
            beta: model.beta(),
            step_mode,
            tolerances,
            refactorizations: 0,
        })
    }

    pub fn theta_hat(&self) -> &ParamVector {
        &self.theta_hat
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn p_inv(&self) -> &DMatrix<f64> {
        &self.p_inv
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn step_mode(&self) -> StepMode {
        self.step_mode
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tolerances
    }

    pub fn refactorizations(&self) -> usize {
        self.refactorizations
    }

    /// Overrides β (e.g. to a value larger than the model's nominal constant).
    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        if !(beta >= 1.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!("β must be >= 1, got {beta}")));
        }
        self.beta = beta;
        Ok(())
    }

    /// Replaces `P⁻¹` without touching `P`. Intended for fault-injection tests.
    #[doc(hidden)]
    pub fn overwrite_p_inv(&mut self, p_inv: DMatrix<f64>) {
        self.p_inv = p_inv;
    }

    /// One-step-ahead prediction `ŷ_{t+1} = h(θ̂_t, y_t, u_t)`.
    pub fn predict(&self, model: &SystemModel, y: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        model.eval_h(&self.theta_hat, y, u, self.t)
    }

    pub fn update(
        &mut self,
        model: &SystemModel,
        y: &DVector<f64>,
        u: &DVector<f64>,
        y_next: &DVector<f64>,
    ) -> Result<StepDiagnostics> {
        let dims = model.dims();
        if dims.p != self.theta_hat.len() {
            return Err(Error::Dimension(format!(
                "estimator has p = {}, model has p = {}",
                self.theta_hat.len(),
                dims.p
            )));
        }
        if y_next.len() != dims.n {
            return Err(Error::Dimension(format!("observation has length {}, expected {}", y_next.len(), dims.n)));
        }
        ensure_finite(y_next.as_slice(), "observation")?;

        let phi = model.eval_jacobian(&self.theta_hat, y, u, self.t)?;
        let prediction = model.eval_h(&self.theta_hat, y, u, self.t)?;
        let innovation = y_next - prediction;
        let alpha_t = model.alpha_bound(y.norm() + u.norm() + self.radius)?;
        let tol = self.tolerances;
        let step = solve_step_size(&phi, &self.p, alpha_t, self.beta, self.step_mode, tol.fp_tol, tol.fp_max_iter)?;

        let eta = step.eta;
        let mut p_inv_next = &self.p_inv + (&phi * phi.transpose()) * (eta * eta);
        symmetrize(&mut p_inv_next);
        let mut p_next = step.p_next;
        let mut refactorized = false;
        if p_next.clone().cholesky().is_none() {
            warn!("P lost positive definiteness at t = {}; refactorizing from P⁻¹", self.t);
            p_next = spd_inverse(&p_inv_next, "P⁻¹ during refactorization")?;
            refactorized = true;
        }

        let candidate = &self.theta_hat + (&p_next * (&phi * &innovation)) * eta;
        let projected = project_weighted_ball(&p_inv_next, &candidate, self.radius, tol.projection_tol)?;

        self.theta_hat = projected.point;
        self.p = p_next;
        self.p_inv = p_inv_next;
        self.t += 1;
        if refactorized {
            self.refactorizations += 1;
        } else {
            refactorized = self.inverse_consistency_check()?.repaired;
        }

        Ok(StepDiagnostics {
            eta,
            alpha_t,
            gain_norm: step.gain_norm,
            fp_iters: step.fp_iters,
            projection_active: projected.active,
            innovation: innovation.as_slice().to_vec(),
            grad_sq_norm: phi.norm_squared(),
            refactorized,
        })
    }

    /// Returns `‖P·P⁻¹ − I‖∞`; above the configured threshold `P⁻¹` is
    /// recomputed from a Cholesky factorization of `P`.
    pub fn inverse_consistency_check(&mut self) -> Result<ConsistencyCheck> {
        let residual = inverse_residual(&self.p, &self.p_inv);
        if residual <= self.tolerances.consistency_threshold {
            return Ok(ConsistencyCheck { residual, repaired: false });
        }
        warn!("‖P·P⁻¹ − I‖∞ = {residual:.3e} at t = {}; recomputing P⁻¹", self.t);
        self.p_inv = spd_inverse(&self.p, "P during consistency repair")?;
        self.refactorizations += 1;
        Ok(ConsistencyCheck { residual, repaired: true })
    }

    pub fn snapshot(&self) -> EstimatorSnapshot {
        EstimatorSnapshot {
            t: self.t,
            theta_hat: self.theta_hat.as_slice().to_vec(),
            p: row_major(&self.p),
            p_inv: row_major(&self.p_inv),
            radius: self.radius,
            beta: self.beta,
            mode: self.step_mode,
        }
    }

    pub fn restore(snapshot: &EstimatorSnapshot, tolerances: Tolerances) -> Result<Self> {
        let p = snapshot.theta_hat.len();
        if p == 0 || snapshot.p.len() != p * p || snapshot.p_inv.len() != p * p {
            return Err(Error::Dimension("snapshot matrices do not match θ̂".into()));
        }
        if !(snapshot.radius > 0.0) || !(snapshot.beta >= 1.0) {
            return Err(Error::InvalidArgument("snapshot has invalid D or β".into()));
        }
        ensure_finite(&snapshot.theta_hat, "snapshot θ̂")?;
        ensure_finite(&snapshot.p, "snapshot P")?;
        ensure_finite(&snapshot.p_inv, "snapshot P⁻¹")?;
        Ok(Self {
            theta_hat: DVector::from_column_slice(&snapshot.theta_hat),
            p: DMatrix::from_row_slice(p, p, &snapshot.p),
            p_inv: DMatrix::from_row_slice(p, p, &snapshot.p_inv),
            t: snapshot.t,
            radius: snapshot.radius,
            beta: snapshot.beta,
            step_mode: snapshot.mode,
            tolerances,
            refactorizations: 0,
        })
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Flat checkpoint record of an [`EstimatorState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSnapshot {
    pub t: usize,
    pub theta_hat: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    #[serde(rename = "P_inv")]
    pub p_inv: Vec<f64>,
    #[serde(rename = "D")]
    pub radius: f64,
    pub beta: f64,
    pub mode: StepMode,
}
