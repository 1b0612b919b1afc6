//! Offline replay of the online estimator over a recorded trajectory.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use nlsid_core::estimator::EstimatorSnapshot;
use nlsid_core::metrics::{excitation_diagnostics, format_f64};
use nlsid_core::models::unpack_params;
use nlsid_core::simulation::{read_trajectory_csv, TrajectorySample};
use serde::Serialize;

use crate::config::{EstimatorSpec, ModelSpec};
use crate::experiment::write_file;
use crate::CliError;

pub const PREDICTION_ERROR_HEADER: &str = "t,pred_err,pred_err_avg";

#[derive(Debug, Clone, Serialize)]
pub struct IdentifyReport {
    pub samples: usize,
    pub theta_hat: Vec<f64>,
    pub a_hat: Vec<Vec<f64>>,
    pub b_hat: Vec<Vec<f64>>,
    /// Mean of `‖y_{t+1} − ŷ_{t+1}‖²`. Unlike regret it includes the noise energy.
    pub mean_prediction_error: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub logdet: f64,
    pub refactorizations: usize,
    /// `‖θ̂ − θ‖` against the model file's `A`, `B` when those are given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_error: Option<f64>,
    pub snapshot: EstimatorSnapshot,
}

#[derive(Debug, Clone)]
pub struct IdentifyOutcome {
    pub report: IdentifyReport,
    /// `(t, ‖y_{t+1} − ŷ_{t+1}‖²)` per replayed sample.
    pub prediction_errors: Vec<(usize, f64)>,
    pub files: Vec<PathBuf>,
}

pub fn read_trajectory(path: &Path, n: usize, m: usize) -> Result<Vec<TrajectorySample>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let samples = read_trajectory_csv(BufReader::new(file), n, m)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for (k, s) in samples.iter().enumerate() {
        if s.t != k {
            return Err(CliError::Config(format!(
                "{}: data row {} has t = {}, expected consecutive steps from 0",
                path.display(),
                k + 1,
                s.t
            )));
        }
    }
    Ok(samples)
}

pub fn identify(samples: &[TrajectorySample], model: &ModelSpec, estimator: &EstimatorSpec) -> Result<IdentifyOutcome, CliError> {
    let system = model.build()?;
    let mut state = estimator.build(&system)?;
    let mut errors = Vec::with_capacity(samples.len());
    for s in samples {
        let diag = state
            .update(&system, &s.x, &s.u, &s.y_next)
            .map_err(|e| CliError::Runtime(format!("step {}: {e}", s.t)))?;
        errors.push((s.t, diag.innovation.iter().map(|v| v * v).sum::<f64>()));
    }
    let dims = system.dims();
    let (a_hat, b_hat) = unpack_params(state.theta_hat(), dims).map_err(|e| CliError::Runtime(e.to_string()))?;
    let exc = excitation_diagnostics(state.p_inv()).map_err(|e| CliError::Runtime(e.to_string()))?;
    let reference_error = model.theta_star()?.map(|t| (state.theta_hat() - t).norm());
    let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    let report = IdentifyReport {
        samples: samples.len(),
        theta_hat: state.theta_hat().as_slice().to_vec(),
        a_hat: rows(&a_hat),
        b_hat: rows(&b_hat),
        mean_prediction_error: errors.iter().map(|e| e.1).sum::<f64>() / errors.len().max(1) as f64,
        lambda_min: exc.lambda_min,
        lambda_max: exc.lambda_max,
        logdet: exc.logdet,
        refactorizations: state.refactorizations(),
        reference_error,
        snapshot: state.snapshot(),
    };
    Ok(IdentifyOutcome { report, prediction_errors: errors, files: Vec::new() })
}

/// Reads the three inputs, replays, and writes `estimate.json` and
/// `prediction_error.csv` into `out_dir`.
pub fn run_identify(traj: &Path, model: &Path, est: &Path, out_dir: &Path) -> Result<IdentifyOutcome, CliError> {
    let model = crate::config::ModelFile::load(model)?.model;
    let est = crate::config::load_estimator_spec(est)?;
    let samples = read_trajectory(traj, model.n, model.m)?;
    let mut outcome = identify(&samples, &model, &est)?;

    let json = out_dir.join("estimate.json");
    write_file(&json, |w| {
        serde_json::to_writer_pretty(&mut *w, &outcome.report)?;
        writeln!(w)?;
        Ok(())
    })?;
    let csv = out_dir.join("prediction_error.csv");
    write_file(&csv, |w| {
        writeln!(w, "{PREDICTION_ERROR_HEADER}")?;
        let mut total = 0.0;
        for (k, &(t, e)) in outcome.prediction_errors.iter().enumerate() {
            total += e;
            writeln!(w, "{t},{},{}", format_f64(e), format_f64(total / (k + 1) as f64))?;
        }
        Ok(())
    })?;
    outcome.files = vec![json, csv];
    Ok(outcome)
}
