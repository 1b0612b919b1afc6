//! Closed-loop trajectories of `x_{t+1} = h(θ*, x_t, u_t) + w_{t+1}` under the
//! feedback law `u_t = ∓K x_t + ε_t`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorState, StepDiagnostics};
use crate::metrics::{format_f64, parse_fields, regret_increment, MetricsSeries};
use crate::models::{sample_ball, ModelKind, ParamVector, SystemModel};

/// States with a norm above this are treated as divergence.
const OVERFLOW_NORM: f64 = 1e100;

/// `max_{t ≥ 1} t^{-1/4} √(ln t)`, attained at the integer `t = 7` (the real maximizer is `e²`).
pub const DECAYING_EXCITATION_SUP: f64 = 0.857_604_165_108_238_2;

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// from `S₀ = Q` and returns the LQR gain `K = (R + BᵀSB)⁻¹BᵀSA`.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension("DARE operands have inconsistent shapes".into()));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut s = q.clone();
    for _ in 0..max_iter {
        let sa = &s * a;
        let gain_inv = (r + &bt * &s * b)
            .cholesky()
            .ok_or(Error::NotSpd("R + BᵀSB"))?;
        let btsa = &bt * &sa;
        let mut next = &at * &sa - &at * &s * b * gain_inv.solve(&btsa) + q;
        next = (&next + next.transpose()) * 0.5;
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        // Max-abs norms: a Frobenius norm of a diverging S overflows to ∞ first.
        let delta = (&next - &s).amax();
        let scale = next.amax();
        s = next;
        if delta.is_finite() && scale.is_finite() && delta <= tol * scale {
            let chol = (r + &bt * &s * b).cholesky().ok_or(Error::NotSpd("R + BᵀSB"))?;
            return Ok(chol.solve(&(&bt * &s * a)));
        }
    }
    Err(Error::RiccatiDivergence { iterations: max_iter })
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSign {
    /// `u = −Kx + ε` (stabilizing LQR convention).
    #[default]
    Negative,
    /// `u = +Kx + ε`.
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcitationKind {
    Zero,
    IidSphere,
    DecayingSphere,
}

impl ExcitationKind {
    pub fn name(self) -> &'static str {
        match self {
            ExcitationKind::Zero => "zero",
            ExcitationKind::IidSphere => "iid_sphere",
            ExcitationKind::DecayingSphere => "decaying_sphere",
        }
    }

    /// `sup_t ‖ε_t‖`.
    pub fn bound(self) -> f64 {
        match self {
            ExcitationKind::Zero => 0.0,
            ExcitationKind::IidSphere => 1.0,
            ExcitationKind::DecayingSphere => DECAYING_EXCITATION_SUP,
        }
    }
}

/// `t^{-1/4} √(ln t)` for `t ≥ 1`.
pub fn decaying_scale(t: u64) -> f64 {
    let t = t.max(1) as f64;
    t.powf(-0.25) * t.ln().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub gain: DMatrix<f64>,
    pub sign: FeedbackSign,
    pub excitation: ExcitationKind,
}

impl Controller {
    pub fn new(gain: DMatrix<f64>, sign: FeedbackSign, excitation: ExcitationKind) -> Self {
        Self { gain, sign, excitation }
    }

    /// `π(x) = ∓Kx`.
    pub fn feedback(&self, x: &DVector<f64>) -> DVector<f64> {
        let kx = &self.gain * x;
        match self.sign {
            FeedbackSign::Negative => -kx,
            FeedbackSign::Positive => kx,
        }
    }

    /// Lipschitz constant of the feedback map, `‖K‖₂`.
    pub fn lipschitz(&self) -> f64 {
        if self.gain.is_empty() {
            0.0
        } else {
            self.gain.clone().svd(false, false).singular_values.max()
        }
    }

    /// `A ∓ BK`.
    pub fn closed_loop_matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self.sign {
            FeedbackSign::Negative => a - b * &self.gain,
            FeedbackSign::Positive => a + b * &self.gain,
        }
    }
}

/// Unit vector with a uniformly distributed direction.
pub fn sample_unit_sphere<R: Rng + ?Sized>(rng: &mut R, m: usize) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 1e-300 {
            return g / norm;
        }
    }
}

/// Excitation sequence `ε_t`, indexed from `t = 1`.
#[derive(Debug, Clone)]
pub struct ExcitationSignal {
    kind: ExcitationKind,
    dim: usize,
    rng: ChaCha8Rng,
}

impl ExcitationSignal {
    pub fn new(kind: ExcitationKind, dim: usize, rng: ChaCha8Rng) -> Self {
        Self { kind, dim, rng }
    }

    pub fn at(&mut self, t: u64) -> DVector<f64> {
        match self.kind {
            ExcitationKind::Zero => DVector::zeros(self.dim),
            ExcitationKind::IidSphere => sample_unit_sphere(&mut self.rng, self.dim),
            ExcitationKind::DecayingSphere => sample_unit_sphere(&mut self.rng, self.dim) * decaying_scale(t),
        }
    }
}

pub fn make_excitation(kind: ExcitationKind, dim: usize, rng: ChaCha8Rng) -> ExcitationSignal {
    ExcitationSignal::new(kind, dim, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianIid,
    BoundedUniform,
    /// Indicator residual of the probit family, driven by a latent `N(0, I)`.
    BernoulliResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation (Gaussian) or half-width (uniform); unused for the probit residual.
    pub scale: f64,
    /// Conditional moment exponent (> 2); recorded, not used by the generator.
    #[serde(default = "default_moment_exponent")]
    pub moment_exponent: f64,
}

fn default_moment_exponent() -> f64 {
    4.0
}

impl NoiseSpec {
    pub fn gaussian(scale: f64) -> Self {
        Self { kind: NoiseKind::GaussianIid, scale, moment_exponent: default_moment_exponent() }
    }

    pub fn bounded_uniform(half_width: f64) -> Self {
        Self { kind: NoiseKind::BoundedUniform, scale: half_width, moment_exponent: default_moment_exponent() }
    }

    pub fn bernoulli_residual() -> Self {
        Self { kind: NoiseKind::BernoulliResidual, scale: 1.0, moment_exponent: default_moment_exponent() }
    }

    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!("noise scale must be finite and >= 0, got {}", self.scale)));
        }
        if !(self.moment_exponent > 2.0) {
            return Err(Error::InvalidArgument("noise moment exponent must exceed 2".into()));
        }
        if self.kind == NoiseKind::BernoulliResidual && model.kind() != ModelKind::BinaryProbit {
            return Err(Error::InvalidArgument(
                "bernoulli_residual noise is only defined for the binary_probit family".into(),
            ));
        }
        Ok(())
    }
}

/// Independent random streams derived from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ProcessNoise = 1,
    Excitation = 2,
    LatentProbit = 3,
    Sampling = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// One-step transition `h(θ*, x, u) + w`.
pub fn step_system(
    model: &SystemModel,
    theta_star: &ParamVector,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w_next: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    let h = model.eval_h(theta_star, x, u, t)?;
    if w_next.len() != h.len() {
        return Err(Error::Dimension(format!("noise has length {}, state {}", w_next.len(), h.len())));
    }
    Ok(h + w_next)
}

/// Probit transition driven by the latent noise `v`: `x_{t+1} = I(Ax + Bu + v > c_t)`.
/// Returns the indicator state and the residual `w = x_{t+1} − Φ(Ax + Bu − c_t)`.
pub fn step_probit_latent(
    model: &SystemModel,
    theta_star: &ParamVector,
    x: &DVector<f64>,
    u: &DVector<f64>,
    latent: &DVector<f64>,
    t: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if model.kind() != ModelKind::BinaryProbit {
        return Err(Error::InvalidArgument("latent transition needs the binary_probit family".into()));
    }
    let mean = model.eval_h(theta_star, x, u, t)?;
    let z = model.pre_activation(theta_star, x, u);
    let w = DVector::from_fn(z.len(), |i, _| {
        let fired = z[i] + latent[i] > model.threshold_at(t, i);
        f64::from(u8::from(fired)) - mean[i]
    });
    Ok((&mean + &w, w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub y_next: DVector<f64>,
    pub w_next: DVector<f64>,
}

/// Streaming closed-loop generator. [`rollout`] collects it; the
/// identification loop consumes it sample by sample, so both see the same
/// random draws for the same seed.
pub struct ClosedLoop<'a> {
    model: &'a SystemModel,
    theta_star: &'a ParamVector,
    controller: &'a Controller,
    noise: NoiseSpec,
    x: DVector<f64>,
    t: usize,
    horizon: usize,
    noise_rng: ChaCha8Rng,
    excitation: ExcitationSignal,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        model: &'a SystemModel,
        theta_star: &'a ParamVector,
        controller: &'a Controller,
        noise: NoiseSpec,
        x0: &DVector<f64>,
        horizon: usize,
        seed: u64,
    ) -> Result<Self> {
        let dims = model.dims();
        if theta_star.len() != dims.p || x0.len() != dims.n {
            return Err(Error::Dimension("θ* or x₀ does not match the model".into()));
        }
        if controller.gain.shape() != (dims.m, dims.n) {
            return Err(Error::Dimension(format!(
                "gain K is {}x{}, expected {}x{}",
                controller.gain.nrows(),
                controller.gain.ncols(),
                dims.m,
                dims.n
            )));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        noise.validate(model)?;
        let noise_stream = match noise.kind {
            NoiseKind::BernoulliResidual => Stream::LatentProbit,
            _ => Stream::ProcessNoise,
        };
        Ok(Self {
            model,
            theta_star,
            controller,
            noise,
            x: x0.clone(),
            t: 0,
            horizon,
            noise_rng: stream_rng(seed, noise_stream),
            excitation: ExcitationSignal::new(controller.excitation, dims.m, stream_rng(seed, Stream::Excitation)),
        })
    }

    fn draw(&mut self, n: usize) -> DVector<f64> {
        let rng = &mut self.noise_rng;
        match self.noise.kind {
            NoiseKind::GaussianIid => DVector::from_fn(n, |_, _| self.noise.scale * rng.sample::<f64, _>(StandardNormal)),
            NoiseKind::BoundedUniform => {
                let a = self.noise.scale;
                DVector::from_fn(n, |_, _| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 })
            }
            NoiseKind::BernoulliResidual => DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)),
        }
    }

    fn advance(&mut self) -> Result<TrajectorySample> {
        let t = self.t;
        let n = self.model.dims().n;
        let eps = self.excitation.at(t as u64 + 1);
        let u = self.controller.feedback(&self.x) + eps;
        let draw = self.draw(n);
        let (y_next, w_next) = match self.noise.kind {
            NoiseKind::BernoulliResidual => step_probit_latent(self.model, self.theta_star, &self.x, &u, &draw, t)?,
            _ => (step_system(self.model, self.theta_star, &self.x, &u, &draw, t)?, draw),
        };
        if y_next.iter().any(|v| !v.is_finite()) || y_next.norm() > OVERFLOW_NORM || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { step: t });
        }
        let sample = TrajectorySample { t, x: std::mem::replace(&mut self.x, y_next.clone()), u, y_next, w_next };
        self.t += 1;
        Ok(sample)
    }
}

impl Iterator for ClosedLoop<'_> {
    type Item = Result<TrajectorySample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.t >= self.horizon {
            return None;
        }
        let out = self.advance();
        if out.is_err() {
            self.t = self.horizon;
        }
        Some(out)
    }
}

pub fn rollout(
    model: &SystemModel,
    theta_star: &ParamVector,
    controller: &Controller,
    noise: NoiseSpec,
    x0: &DVector<f64>,
    horizon: usize,
    seed: u64,
) -> Result<Vec<TrajectorySample>> {
    ClosedLoop::new(model, theta_star, controller, noise, x0, horizon, seed)?.collect()
}

/// What an observer of [`closed_loop_identify`] sees after every update.
pub struct StepEvent<'a> {
    pub sample: &'a TrajectorySample,
    pub diagnostics: &'a StepDiagnostics,
    pub before: &'a EstimatorState,
    pub after: &'a EstimatorState,
    pub regret_increment: f64,
}

/// Runs the closed loop and the estimator together for `horizon` steps.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_identify(
    model: &SystemModel,
    theta_star: &ParamVector,
    estimator: EstimatorState,
    controller: &Controller,
    noise: NoiseSpec,
    x0: &DVector<f64>,
    horizon: usize,
    seed: u64,
    mut observer: Option<&mut dyn FnMut(&StepEvent)>,
) -> Result<(EstimatorState, MetricsSeries)> {
    let mut state = estimator;
    let mut metrics = MetricsSeries::with_horizon(horizon);
    for sample in ClosedLoop::new(model, theta_star, controller, noise, x0, horizon, seed)? {
        let sample = sample?;
        let increment = regret_increment(model, theta_star, state.theta_hat(), &sample.x, &sample.u, state.t())?;
        let before = observer.as_ref().map(|_| state.clone());
        let diag = state
            .update(model, &sample.x, &sample.u, &sample.y_next)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Overflow { step: sample.t },
                other => other,
            })?;
        metrics.record(increment, diag.grad_sq_norm, theta_star, &state)?;
        if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
            obs(&StepEvent { sample: &sample, diagnostics: &diag, before, after: &state, regret_increment: increment });
        }
    }
    Ok((state, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormChoice {
    L1,
    L2,
    LInf,
}

impl NormChoice {
    pub fn norm(self, v: &DVector<f64>) -> f64 {
        match self {
            NormChoice::L1 => v.iter().map(|x| x.abs()).sum(),
            NormChoice::L2 => v.norm(),
            NormChoice::LInf => v.amax(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhoProbe {
    pub rho_hat: f64,
    /// `ρ̂ ≥ 1`.
    pub flagged: bool,
    pub worst_x: Vec<f64>,
    pub worst_u: Vec<f64>,
}

/// Empirical contraction ratio `max ‖h(θ*, x, u)‖ / ‖x‖` over sampled states
/// `0 < ‖x‖ ≤ radius` and inputs `u = π(x) + ε`, `‖ε‖ ≤ sup‖ε_t‖`.
pub fn rho_probe(
    model: &SystemModel,
    theta_star: &ParamVector,
    controller: &Controller,
    sample_count: usize,
    radius: f64,
    norm_choice: NormChoice,
    rng_seed: u64,
) -> Result<RhoProbe> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("probe radius must be positive, got {radius}")));
    }
    let dims = model.dims();
    let mut rng = stream_rng(rng_seed, Stream::Sampling);
    let eps_bound = controller.excitation.bound();
    let mut best = RhoProbe { rho_hat: 0.0, flagged: false, worst_x: vec![], worst_u: vec![] };
    for t in 0..sample_count {
        let dir = DVector::from_fn(dims.n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dn = norm_choice.norm(&dir);
        if dn == 0.0 {
            continue;
        }
        // (0, 1]: never exactly zero.
        let scale = radius * (1.0 - rng.random::<f64>());
        let x = dir * (scale / dn);
        let eps = if eps_bound > 0.0 { sample_ball(&mut rng, dims.m, eps_bound) } else { DVector::zeros(dims.m) };
        let u = controller.feedback(&x) + eps;
        let ratio = norm_choice.norm(&model.eval_h(theta_star, &x, &u, t)?) / norm_choice.norm(&x);
        if ratio > best.rho_hat || best.worst_x.is_empty() {
            best.rho_hat = ratio;
            best.worst_x = x.as_slice().to_vec();
            best.worst_u = u.as_slice().to_vec();
        }
    }
    best.flagged = best.rho_hat >= 1.0;
    Ok(best)
}

pub fn trajectory_header(n: usize, m: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x_{i}")));
    cols.extend((1..=m).map(|i| format!("u_{i}")));
    cols.extend((1..=n).map(|i| format!("y_{i}")));
    cols.extend((1..=n).map(|i| format!("w_{i}")));
    cols.join(",")
}

pub fn write_trajectory_csv<W: Write>(mut out: W, samples: &[TrajectorySample], n: usize, m: usize) -> Result<()> {
    writeln!(out, "{}", trajectory_header(n, m))?;
    for s in samples {
        write!(out, "{}", s.t)?;
        for v in s.x.iter().chain(s.u.iter()).chain(s.y_next.iter()).chain(s.w_next.iter()) {
            write!(out, ",{}", format_f64(*v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_trajectory_csv<R: BufRead>(input: R, n: usize, m: usize) -> Result<Vec<TrajectorySample>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.ok_or(Error::Parse { line: 1, msg: "empty trajectory file".into() })?;
    let expected = trajectory_header(n, m);
    if header.trim() != expected {
        return Err(Error::Parse { line: 1, msg: format!("header `{}` does not match `{expected}`", header.trim()) });
    }
    let width = 1 + 3 * n + m;
    let mut samples = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields(&line, k + 2)?;
        if f.len() != width {
            return Err(Error::Parse { line: k + 2, msg: format!("expected {width} fields, got {}", f.len()) });
        }
        let slice = |from: usize, len: usize| DVector::from_column_slice(&f[from..from + len]);
        samples.push(TrajectorySample {
            t: f[0] as usize,
            x: slice(1, n),
            u: slice(1 + n, m),
            y_next: slice(1 + n + m, n),
            w_next: slice(1 + 2 * n + m, n),
        });
    }
    if samples.is_empty() {
        return Err(Error::Parse { line: 2, msg: "trajectory has no data rows".into() });
    }
    Ok(samples)
}
