//! Nonlinear system families `x_{t+1} = h(θ, x_t, u_t) + w_{t+1}`.
//!
//! All three built-in families share the same parameter layout: θ stacks the
//! rows of `A` followed by the rows of `B`, so `p = n·(n + m)`, and the
//! pre-activation of output `i` is `z_i = A_i·x + B_i·u`. The families differ
//! only in the scalar link applied to `z_i`:
//!
//! * linear: identity,
//! * rnn_sigmoid: logistic sigmoid,
//! * binary_probit: `Φ(z_i − c_{t,i})` with a bounded threshold schedule `c_t`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{ensure_finite, Error, Result};

pub type ParamVector = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl Dimensions {
    /// Dimensions of a built-in family with `p = n·(n + m)`.
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument(format!(
                "state and input dimensions must be positive (n = {n}, m = {m})"
            )));
        }
        Ok(Self { n, m, p: n * (n + m) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    RnnSigmoid,
    BinaryProbit,
}

/// Which closed form of α(r) the bounded-link families use.
///
/// `Derivative` is `2·s′(2r²)` (the secant-slope lower bound), `Value` is the
/// alternative `2·s(2r²)`. `Value` is *increasing* in r and does not satisfy
/// the non-increasing contract of [`SystemModel::alpha_bound`]; it exists so
/// experiments can compare the two readings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaForm {
    #[default]
    Derivative,
    Value,
}

/// Deterministic bounded threshold schedule `t ↦ c_t ∈ ℝⁿ` for the probit family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Constant(Vec<f64>),
    /// `c_t = schedule[t mod len]`.
    Cyclic(Vec<Vec<f64>>),
}

impl ThresholdPolicy {
    pub fn zero(n: usize) -> Self {
        ThresholdPolicy::Constant(vec![0.0; n])
    }

    fn validate(&self, n: usize) -> Result<f64> {
        let rows: Vec<&Vec<f64>> = match self {
            ThresholdPolicy::Constant(c) => vec![c],
            ThresholdPolicy::Cyclic(s) => {
                if s.is_empty() {
                    return Err(Error::InvalidArgument("empty threshold schedule".into()));
                }
                s.iter().collect()
            }
        };
        let mut sup = 0.0_f64;
        for c in rows {
            if c.len() != n {
                return Err(Error::Dimension(format!(
                    "threshold has length {} but n = {n}",
                    c.len()
                )));
            }
            for &v in c {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(
                        "threshold policy must be bounded (finite entries)".into(),
                    ));
                }
                sup = sup.max(v.abs());
            }
        }
        Ok(sup)
    }

    pub fn at(&self, t: usize, i: usize) -> f64 {
        match self {
            ThresholdPolicy::Constant(c) => c[i],
            ThresholdPolicy::Cyclic(s) => s[t % s.len()][i],
        }
    }
}

/// The parameter Jacobian `φ = ∇_θᵀ h`, stored as a `p × n` matrix whose
/// column `j` is the gradient of `h_j`.
pub type Jacobian = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    dims: Dimensions,
    kind: ModelKind,
    beta: f64,
    alpha_form: AlphaForm,
    threshold: Option<ThresholdPolicy>,
    threshold_sup: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `σ′(z) = σ(z)(1 − σ(z))`, evaluated without cancellation for large |z|.
pub fn sigmoid_derivative(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Row-major stacking `θ = [A₁ᵀ, …, A_nᵀ, B₁ᵀ, …, B_nᵀ]ᵀ`.
pub fn pack_params(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<ParamVector> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!("A is {}x{}, expected square", n, a.ncols())));
    }
    if b.nrows() != n {
        return Err(Error::Dimension(format!("B has {} rows, A has {n}", b.nrows())));
    }
    let m = b.ncols();
    let mut theta = DVector::zeros(n * (n + m));
    for i in 0..n {
        for j in 0..n {
            theta[i * n + j] = a[(i, j)];
        }
        for j in 0..m {
            theta[n * n + i * m + j] = b[(i, j)];
        }
    }
    Ok(theta)
}

pub fn unpack_params(theta: &ParamVector, dims: Dimensions) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let Dimensions { n, m, p } = dims;
    if theta.len() != p || p != n * (n + m) {
        return Err(Error::Dimension(format!(
            "parameter vector has length {}, expected {}",
            theta.len(),
            n * (n + m)
        )));
    }
    let a = DMatrix::from_fn(n, n, |i, j| theta[i * n + j]);
    let b = DMatrix::from_fn(n, m, |i, j| theta[n * n + i * m + j]);
    Ok((a, b))
}

pub fn make_linear(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<SystemModel> {
    if !a.is_square() || b.nrows() != a.nrows() {
        return Err(Error::Dimension(format!(
            "A is {}x{} and B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    SystemModel::new(Dimensions::new(a.nrows(), b.ncols())?, ModelKind::Linear)
}

pub fn make_rnn_sigmoid(dims: Dimensions) -> Result<SystemModel> {
    SystemModel::new(dims, ModelKind::RnnSigmoid)
}

pub fn make_binary_probit(dims: Dimensions, threshold: ThresholdPolicy) -> Result<SystemModel> {
    let mut model = SystemModel::new(dims, ModelKind::BinaryProbit)?;
    model.threshold_sup = threshold.validate(dims.n)?;
    model.threshold = Some(threshold);
    Ok(model)
}

impl SystemModel {
    /// Builds a model of the given kind; probit models start with `c_t ≡ 0`.
    pub fn new(dims: Dimensions, kind: ModelKind) -> Result<Self> {
        let checked = Dimensions::new(dims.n, dims.m)?;
        if checked.p != dims.p {
            return Err(Error::Dimension(format!(
                "p = {} but built-in families need p = n(n+m) = {}",
                dims.p, checked.p
            )));
        }
        let threshold = match kind {
            ModelKind::BinaryProbit => Some(ThresholdPolicy::zero(dims.n)),
            _ => None,
        };
        Ok(Self {
            dims,
            kind,
            beta: 1.0,
            alpha_form: AlphaForm::default(),
            threshold,
            threshold_sup: 0.0,
        })
    }

    pub fn with_alpha_form(mut self, form: AlphaForm) -> Self {
        self.alpha_form = form;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta >= 1.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta must be >= 1, got {beta}")));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn dims(&self) -> Dimensions {
        self.dims
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha_form(&self) -> AlphaForm {
        self.alpha_form
    }

    pub fn threshold(&self) -> Option<&ThresholdPolicy> {
        self.threshold.as_ref()
    }

    /// `sup_t ‖c_t‖_∞` (zero for families without a threshold).
    pub fn threshold_sup(&self) -> f64 {
        self.threshold_sup
    }

    /// Smoothness constant M(r) of the gradient in (x, u).
    pub fn lipschitz_constant(&self, _r: f64) -> f64 {
        1.0
    }

    /// Threshold `c_{t,i}`, zero for the unthresholded families.
    pub fn threshold_at(&self, t: usize, i: usize) -> f64 {
        self.threshold.as_ref().map_or(0.0, |c| c.at(t, i))
    }

    fn check_inputs(&self, theta: &ParamVector, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let Dimensions { n, m, p } = self.dims;
        if theta.len() != p || x.len() != n || u.len() != m {
            return Err(Error::Dimension(format!(
                "got θ ∈ ℝ^{}, x ∈ ℝ^{}, u ∈ ℝ^{}; model expects ℝ^{p}, ℝ^{n}, ℝ^{m}",
                theta.len(),
                x.len(),
                u.len()
            )));
        }
        ensure_finite(theta.as_slice(), "parameter vector")?;
        ensure_finite(x.as_slice(), "state")?;
        ensure_finite(u.as_slice(), "input")?;
        Ok(())
    }

    /// Pre-activations `z_i = A_i·x + B_i·u`.
    pub fn pre_activation(&self, theta: &ParamVector, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let Dimensions { n, m, .. } = self.dims;
        DVector::from_fn(n, |i, _| {
            let mut z = 0.0;
            for j in 0..n {
                z += theta[i * n + j] * x[j];
            }
            for j in 0..m {
                z += theta[n * n + i * m + j] * u[j];
            }
            z
        })
    }

    fn link(&self, z: f64, t: usize, i: usize) -> f64 {
        match self.kind {
            ModelKind::Linear => z,
            ModelKind::RnnSigmoid => sigmoid(z),
            ModelKind::BinaryProbit => normal_cdf(z - self.threshold_at(t, i)),
        }
    }

    fn link_derivative(&self, z: f64, t: usize, i: usize) -> f64 {
        match self.kind {
            ModelKind::Linear => 1.0,
            ModelKind::RnnSigmoid => sigmoid_derivative(z),
            ModelKind::BinaryProbit => normal_pdf(z - self.threshold_at(t, i)),
        }
    }

    pub fn eval_h(&self, theta: &ParamVector, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        self.check_inputs(theta, x, u)?;
        let z = self.pre_activation(theta, x, u);
        Ok(DVector::from_fn(z.len(), |i, _| self.link(z[i], t, i)))
    }

    pub fn eval_jacobian(&self, theta: &ParamVector, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> Result<Jacobian> {
        self.check_inputs(theta, x, u)?;
        let Dimensions { n, m, p } = self.dims;
        let z = self.pre_activation(theta, x, u);
        let mut jac = DMatrix::zeros(p, n);
        for i in 0..n {
            let s = self.link_derivative(z[i], t, i);
            for j in 0..n {
                jac[(i * n + j, i)] = s * x[j];
            }
            for j in 0..m {
                jac[(n * n + i * m + j, i)] = s * u[j];
            }
        }
        Ok(jac)
    }

    /// α(r): strictly positive lower bound on the secant slope of the link
    /// over arguments reachable within radius r.
    pub fn alpha_bound(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::InvalidArgument(format!("radius must be nonnegative, got {r}")));
        }
        let arg = 2.0 * r * r;
        let alpha = match (self.kind, self.alpha_form) {
            (ModelKind::Linear, _) => 1.0,
            (ModelKind::RnnSigmoid, AlphaForm::Derivative) => 2.0 * sigmoid_derivative(arg),
            (ModelKind::RnnSigmoid, AlphaForm::Value) => 2.0 * sigmoid(arg),
            (ModelKind::BinaryProbit, AlphaForm::Derivative) => 2.0 * normal_pdf(arg + self.threshold_sup),
            (ModelKind::BinaryProbit, AlphaForm::Value) => 2.0 * normal_cdf(arg - self.threshold_sup),
        };
        // Far tails underflow to zero; keep the bound strictly positive.
        Ok(alpha.max(f64::MIN_POSITIVE))
    }

    /// Max-abs deviation of the analytic Jacobian from central differences.
    pub fn check_jacobian_fd(
        &self,
        theta: &ParamVector,
        x: &DVector<f64>,
        u: &DVector<f64>,
        t: usize,
        step: f64,
    ) -> Result<f64> {
        if !(step > 0.0) {
            return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
        }
        let analytic = self.eval_jacobian(theta, x, u, t)?;
        let mut worst = 0.0_f64;
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        for k in 0..theta.len() {
            plus[k] = theta[k] + step;
            minus[k] = theta[k] - step;
            let hp = self.eval_h(&plus, x, u, t)?;
            let hm = self.eval_h(&minus, x, u, t)?;
            for j in 0..self.dims.n {
                let fd = (hp[j] - hm[j]) / (2.0 * step);
                worst = worst.max((analytic[(k, j)] - fd).abs());
            }
            plus[k] = theta[k];
            minus[k] = theta[k];
        }
        Ok(worst)
    }

    /// Loss `L(θ) = ‖h(θ*) − h(θ)‖²` and its gradient `−2 φ ψ`.
    pub fn loss_and_gradient(
        &self,
        theta_star: &ParamVector,
        theta: &ParamVector,
        x: &DVector<f64>,
        u: &DVector<f64>,
        t: usize,
    ) -> Result<(f64, DVector<f64>)> {
        let psi = self.eval_h(theta_star, x, u, t)? - self.eval_h(theta, x, u, t)?;
        let phi = self.eval_jacobian(theta, x, u, t)?;
        Ok((psi.norm_squared(), -2.0 * (phi * psi)))
    }

    /// Samples the secant and self-bounding inequalities on the region
    /// `‖θ − θ*‖ ≤ r`, `‖y‖ ≤ r`, `‖u‖ ≤ r`.
    pub fn check_assumption4(
        &self,
        theta_star: &ParamVector,
        sample_count: usize,
        r: f64,
        rng_seed: u64,
    ) -> Result<CurvatureReport> {
        if !(r > 0.0) {
            return Err(Error::InvalidArgument(format!("radius must be positive, got {r}")));
        }
        let Dimensions { n, m, p } = self.dims;
        if theta_star.len() != p {
            return Err(Error::Dimension(format!("θ* has length {}, expected {p}", theta_star.len())));
        }
        let alpha = self.alpha_bound(r)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut report = CurvatureReport {
            samples: sample_count,
            radius: r,
            alpha,
            beta: self.beta,
            secant_violations: 0,
            self_bound_violations: 0,
            worst_secant_margin: f64::INFINITY,
            worst_self_bound_margin: f64::INFINITY,
            required_beta: 0.0,
            first_secant_violation: None,
            first_self_bound_violation: None,
        };
        for k in 0..sample_count {
            let t = k;
            let theta = theta_star + sample_ball(&mut rng, p, r);
            let y = sample_ball(&mut rng, n, r);
            let u = sample_ball(&mut rng, m, r);
            let (loss, grad) = self.loss_and_gradient(theta_star, &theta, &y, &u, t)?;
            let diff = &theta - theta_star;
            let inner = diff.dot(&grad);
            let phi = self.eval_jacobian(&theta, &y, &u, t)?;
            let quad = (phi.transpose() * &diff).norm_squared();

            let slack = 1e-12 * (inner.abs() + alpha * quad + loss);
            let secant_margin = inner - alpha * quad;
            let self_margin = self.beta * inner - loss;
            report.worst_secant_margin = report.worst_secant_margin.min(secant_margin);
            report.worst_self_bound_margin = report.worst_self_bound_margin.min(self_margin);
            if inner > 0.0 {
                report.required_beta = report.required_beta.max(loss / inner);
            } else if loss > 0.0 {
                report.required_beta = f64::INFINITY;
            }
            if secant_margin < -slack {
                report.secant_violations += 1;
                report.first_secant_violation.get_or_insert_with(|| ViolatingSample {
                    theta: theta.as_slice().to_vec(),
                    y: y.as_slice().to_vec(),
                    u: u.as_slice().to_vec(),
                    lhs: inner,
                    rhs: alpha * quad,
                });
            }
            if self_margin < -slack {
                report.self_bound_violations += 1;
                report.first_self_bound_violation.get_or_insert_with(|| ViolatingSample {
                    theta: theta.as_slice().to_vec(),
                    y: y.as_slice().to_vec(),
                    u: u.as_slice().to_vec(),
                    lhs: loss,
                    rhs: self.beta * inner,
                });
            }
        }
        Ok(report)
    }

    /// Largest sampled ratio `‖∇h(θ,ξ₁) − ∇h(θ,ξ₂)‖₂ / (M(r)·‖ξ₁ − ξ₂‖)` over
    /// `‖θ − θ*‖ ≤ r` and `‖ξ_i‖ ≤ xi_radius`.
    pub fn check_gradient_lipschitz(
        &self,
        theta_star: &ParamVector,
        sample_count: usize,
        r: f64,
        xi_radius: f64,
        rng_seed: u64,
    ) -> Result<f64> {
        let Dimensions { n, m, p } = self.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let bound = self.lipschitz_constant(r);
        let mut worst = 0.0_f64;
        for t in 0..sample_count {
            let theta = theta_star + sample_ball(&mut rng, p, r);
            let xi1 = sample_ball(&mut rng, n + m, xi_radius);
            let xi2 = sample_ball(&mut rng, n + m, xi_radius);
            let split = |xi: &DVector<f64>| (xi.rows(0, n).into_owned(), xi.rows(n, m).into_owned());
            let (a1, b1) = split(&xi1);
            let (a2, b2) = split(&xi2);
            let d = self.eval_jacobian(&theta, &a1, &b1, t)? - self.eval_jacobian(&theta, &a2, &b2, t)?;
            let gap = (&xi1 - &xi2).norm();
            if gap > 1e-12 {
                worst = worst.max(d.svd(false, false).singular_values.max() / (bound * gap));
            }
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolatingSample {
    pub theta: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

/// Outcome of [`SystemModel::check_assumption4`]. "Secant" is
/// `⟨θ−θ*, ∇L⟩ ≥ α(r)‖φᵀ(θ−θ*)‖²`; "self bound" is `L ≤ β⟨θ−θ*, ∇L⟩`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub samples: usize,
    pub radius: f64,
    pub alpha: f64,
    pub beta: f64,
    pub secant_violations: usize,
    pub self_bound_violations: usize,
    pub worst_secant_margin: f64,
    pub worst_self_bound_margin: f64,
    /// Smallest β that would satisfy the self bound on every sample.
    pub required_beta: f64,
    pub first_secant_violation: Option<ViolatingSample>,
    pub first_self_bound_violation: Option<ViolatingSample>,
}

impl CurvatureReport {
    pub fn passed(&self) -> bool {
        self.secant_violations == 0 && self.self_bound_violations == 0
    }
}

/// Uniform sample from the closed Euclidean ball of radius `r` in ℝᵈ.
pub fn sample_ball<R: Rng + ?Sized>(rng: &mut R, d: usize, r: f64) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 {
            let radius = r * rng.random::<f64>().powf(1.0 / d as f64);
            return g * (radius / norm);
        }
    }
}
