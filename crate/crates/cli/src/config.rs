//! Experiment configuration: a versioned JSON document that fully determines
//! a run. Parsing is strict (unknown fields are rejected) and every semantic
//! check reports the offending field path.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use nlsid_core::estimator::{EstimatorState, StepMode, Tolerances};
use nlsid_core::models::{
    make_binary_probit, make_rnn_sigmoid, pack_params, AlphaForm, Dimensions, ModelKind, ParamVector,
    SystemModel, ThresholdPolicy,
};
use nlsid_core::simulation::{dare_solve, Controller, ExcitationKind, FeedbackSign, NoiseKind, NoiseSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

const DARE_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 100_000;

/// Dynamics family with its true parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n: usize,
    pub m: usize,
    /// True `A` as a list of rows. Optional only for offline identification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    /// True `B` as a list of rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdPolicy>,
    #[serde(default)]
    pub alpha_form: AlphaForm,
    #[serde(default = "one")]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    /// θ̂₀; defaults to the zero vector of length `p`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    /// Radius `D` of the parameter ball.
    pub radius: f64,
    /// Overrides the model's β for the step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default)]
    pub step_mode: StepMode,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GainSpec {
    /// LQR gain from the DARE with weights `Q` (n×n) and `R` (m×m).
    Dare { q: Vec<Vec<f64>>, r: Vec<Vec<f64>> },
    /// Explicit `K` (m×n).
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub gain: GainSpec,
    #[serde(default)]
    pub sign: FeedbackSign,
}

impl ControllerSpec {
    /// DARE with identity weights and the stabilizing `u = −Kx` convention.
    pub fn lqr_identity(n: usize, m: usize) -> Self {
        Self { gain: GainSpec::Dare { q: identity_rows(n), r: identity_rows(m) }, sign: FeedbackSign::Negative }
    }
}

fn identity_rows(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub model: ModelSpec,
    pub estimator: EstimatorSpec,
    pub controller: ControllerSpec,
    /// One run per excitation case and seed.
    pub cases: Vec<ExcitationKind>,
    pub noise: NoiseSpec,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    /// Initial state; defaults to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub emit_svg: bool,
    /// Also write each run's trajectory CSV.
    #[serde(default)]
    pub export_trajectory: bool,
    /// Free-form notes carried into the manifest (e.g. documented conventions).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

/// Everything a run needs, built once from a validated config.
#[derive(Debug, Clone)]
pub struct ResolvedModel {
    pub model: SystemModel,
    pub theta_star: ParamVector,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn matrix(field: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != nrows {
        return Err(invalid(field, format!("expected {nrows} rows, got {}", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(invalid(&format!("{field}[{i}]"), format!("expected {ncols} entries, got {}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(invalid(&format!("{field}[{i}]"), "entries must be finite"));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector(field: &str, values: &[f64], len: usize) -> Result<DVector<f64>, CliError> {
    if values.len() != len {
        return Err(invalid(field, format!("expected length {len}, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid(field, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(values))
}

impl ModelSpec {
    /// The model family alone; `A` and `B` are validated if present.
    pub fn build(&self) -> Result<SystemModel, CliError> {
        let dims = Dimensions::new(self.n, self.m).map_err(|e| invalid("model.n/m", e))?;
        self.true_matrices()?;
        if self.threshold.is_some() && self.kind != ModelKind::BinaryProbit {
            return Err(invalid("model.threshold", "only the binary_probit family takes a threshold"));
        }
        let base = match self.kind {
            ModelKind::Linear => SystemModel::new(dims, ModelKind::Linear),
            ModelKind::RnnSigmoid => make_rnn_sigmoid(dims),
            ModelKind::BinaryProbit => {
                make_binary_probit(dims, self.threshold.clone().unwrap_or_else(|| ThresholdPolicy::zero(self.n)))
            }
        }
        .map_err(|e| invalid("model.threshold", e))?;
        base.with_alpha_form(self.alpha_form).with_beta(self.beta).map_err(|e| invalid("model.beta", e))
    }

    fn true_matrices(&self) -> Result<Option<(DMatrix<f64>, DMatrix<f64>)>, CliError> {
        match (&self.a, &self.b) {
            (Some(a), Some(b)) => {
                Ok(Some((matrix("model.a", a, self.n, self.n)?, matrix("model.b", b, self.n, self.m)?)))
            }
            (None, None) => Ok(None),
            (None, Some(_)) => Err(invalid("model.a", "required when model.b is given")),
            (Some(_), None) => Err(invalid("model.b", "required when model.a is given")),
        }
    }

    /// The model together with its true parameters, which must be present.
    pub fn resolve(&self) -> Result<ResolvedModel, CliError> {
        let model = self.build()?;
        let (a, b) = self.true_matrices()?.ok_or_else(|| invalid("model.a", "true parameters A and B are required"))?;
        let theta_star = pack_params(&a, &b).map_err(|e| invalid("model", e))?;
        Ok(ResolvedModel { model, theta_star, a, b })
    }

    /// Packed true parameters, if given.
    pub fn theta_star(&self) -> Result<Option<ParamVector>, CliError> {
        Ok(match self.true_matrices()? {
            Some((a, b)) => Some(pack_params(&a, &b).map_err(|e| invalid("model", e))?),
            None => None,
        })
    }
}

impl EstimatorSpec {
    pub fn validate(&self, p: usize) -> Result<(), CliError> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(invalid("estimator.radius", format!("must be positive and finite, got {}", self.radius)));
        }
        if let Some(theta0) = &self.theta0 {
            vector("estimator.theta0", theta0, p)?;
        }
        if let Some(beta) = self.beta {
            if !(beta >= 1.0) || !beta.is_finite() {
                return Err(invalid("estimator.beta", format!("must be finite and >= 1, got {beta}")));
            }
        }
        let t = &self.tolerances;
        if !(t.fp_tol > 0.0) || t.fp_max_iter == 0 {
            return Err(invalid("estimator.tolerances", "fp_tol must be positive and fp_max_iter at least 1"));
        }
        if !(t.projection_tol > 0.0 && t.projection_tol <= 1e-4) {
            return Err(invalid("estimator.tolerances.projection_tol", "must lie in (0, 1e-4]"));
        }
        if !(t.consistency_threshold > 0.0) {
            return Err(invalid("estimator.tolerances.consistency_threshold", "must be positive"));
        }
        Ok(())
    }

    pub fn build(&self, model: &SystemModel) -> Result<EstimatorState, CliError> {
        let p = model.dims().p;
        self.validate(p)?;
        let theta0 = match &self.theta0 {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(p),
        };
        let mut state = EstimatorState::new(model, &theta0, self.radius, self.step_mode, self.tolerances)
            .map_err(|e| invalid("estimator", e))?;
        if let Some(beta) = self.beta {
            state.set_beta(beta).map_err(|e| invalid("estimator.beta", e))?;
        }
        Ok(state)
    }
}

impl ControllerSpec {
    /// The feedback gain `K` (m×n).
    pub fn gain(&self, resolved: &ResolvedModel) -> Result<DMatrix<f64>, CliError> {
        let Dimensions { n, m, .. } = resolved.model.dims();
        match &self.gain {
            GainSpec::Explicit(k) => matrix("controller.gain.explicit", k, m, n),
            GainSpec::Dare { q, r } => {
                let q = matrix("controller.gain.dare.q", q, n, n)?;
                let r = matrix("controller.gain.dare.r", r, m, m)?;
                dare_solve(&resolved.a, &resolved.b, &q, &r, DARE_TOL, DARE_MAX_ITER)
                    .map_err(|e| invalid("controller.gain.dare", e))
            }
        }
    }

    pub fn build(&self, resolved: &ResolvedModel, excitation: ExcitationKind) -> Result<Controller, CliError> {
        Ok(Controller::new(self.gain(resolved)?, self.sign, excitation))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<ResolvedModel, CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let resolved = self.model.resolve()?;
        let dims = resolved.model.dims();
        self.estimator.validate(dims.p)?;
        self.controller.gain(&resolved)?;
        if self.cases.is_empty() {
            return Err(invalid("cases", "at least one excitation case is required"));
        }
        for (i, c) in self.cases.iter().enumerate() {
            if self.cases[..i].contains(c) {
                return Err(invalid("cases", format!("duplicate case `{}`", c.name())));
            }
        }
        self.noise.validate(&resolved.model).map_err(|e| invalid("noise", e))?;
        if self.noise.kind == NoiseKind::BernoulliResidual && self.x0.as_ref().is_some_and(|x| x.iter().any(|v| *v != 0.0 && *v != 1.0)) {
            return Err(invalid("x0", "a binary-valued system needs x0 entries in {0, 1}"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("seeds", "seeds must be distinct"));
        }
        if let Some(x0) = &self.x0 {
            vector("x0", x0, dims.n)?;
        }
        Ok(resolved)
    }

    pub fn x0(&self) -> DVector<f64> {
        match &self.x0 {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(self.model.n),
        }
    }

    /// Reads a config, or the `config` member of a run manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_text(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let inner = match value {
            serde_json::Value::Object(ref map) if map.contains_key("config") && !map.contains_key("schema_version") => {
                map["config"].clone()
            }
            other => other,
        };
        let config: Self =
            serde_json::from_value(inner).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

/// `model.json` for `check` and `identify`: either a bare model spec or a
/// document with `model` (and optionally `controller`) members, such as a
/// full experiment config.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub model: ModelSpec,
    pub controller: Option<ControllerSpec>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_text(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parse = |v: serde_json::Value| -> Result<Self, CliError> {
            if v.get("model").is_some() {
                let model = serde_json::from_value(v["model"].clone())
                    .map_err(|e| CliError::Config(format!("{}: model: {e}", path.display())))?;
                let controller = match v.get("controller") {
                    Some(c) => Some(
                        serde_json::from_value(c.clone())
                            .map_err(|e| CliError::Config(format!("{}: controller: {e}", path.display())))?,
                    ),
                    None => None,
                };
                Ok(Self { model, controller })
            } else {
                let model =
                    serde_json::from_value(v).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                Ok(Self { model, controller: None })
            }
        };
        let file = match value.get("config") {
            Some(inner) if value.get("schema_version").is_none() => parse(inner.clone())?,
            _ => parse(value)?,
        };
        file.model.build()?;
        Ok(file)
    }
}

pub fn load_estimator_spec(path: &Path) -> Result<EstimatorSpec, CliError> {
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let inner = value.get("estimator").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}
