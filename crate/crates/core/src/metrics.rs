//! Online evaluation quantities: cumulative regret, parameter error, the
//! Lyapunov value `θ̃ᵀP⁻¹θ̃`, and excitation diagnostics of `P⁻¹`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorState;
use crate::linalg::spd_eigen;
use crate::models::{ParamVector, SystemModel};

pub const METRICS_HEADER: &str = "t,regret_cum,avg_regret,param_err,lyapunov,lambda_min,lambda_max,logdet,grad_energy";

/// Horizons up to this length keep every step.
pub const FULL_CADENCE_LIMIT: usize = 100_000;

const THINNING_RATIO: f64 = 1.05;

/// `‖h(θ*, y, u) − h(θ̂, y, u)‖²`.
pub fn regret_increment(
    model: &SystemModel,
    theta_star: &ParamVector,
    theta_hat: &ParamVector,
    y: &DVector<f64>,
    u: &DVector<f64>,
    t: usize,
) -> Result<f64> {
    Ok((model.eval_h(theta_star, y, u, t)? - model.eval_h(theta_hat, y, u, t)?).norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub logdet: f64,
}

pub fn excitation_diagnostics(p_inv: &DMatrix<f64>) -> Result<Excitation> {
    let (values, _) = spd_eigen(p_inv, "P⁻¹")?;
    Ok(Excitation {
        lambda_min: values[0],
        lambda_max: values[values.len() - 1],
        logdet: values.iter().map(|v| v.ln()).sum(),
    })
}

/// `V = (θ* − θ̂)ᵀ P⁻¹ (θ* − θ̂)`.
pub fn lyapunov_value(theta_star: &ParamVector, theta_hat: &ParamVector, p_inv: &DMatrix<f64>) -> Result<f64> {
    if theta_star.len() != theta_hat.len() || p_inv.nrows() != theta_hat.len() || !p_inv.is_square() {
        return Err(Error::Dimension("Lyapunov value operands disagree in size".into()));
    }
    let err = theta_star - theta_hat;
    Ok(err.dot(&(p_inv * &err)).max(0.0))
}

/// Least-squares slope of `ln value` against `ln t` over `t ∈ [lo, hi]`.
pub fn trend_fit(series: &[(f64, f64)], window: (f64, f64)) -> Result<f64> {
    let mut pts = Vec::new();
    for &(t, v) in series.iter().filter(|(t, _)| *t >= window.0 && *t <= window.1) {
        if !(v > 0.0) || !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("trend_fit needs positive values, got {v} at t = {t}")));
        }
        pts.push((t.ln(), v.ln()));
    }
    if pts.len() < 10 {
        return Err(Error::InvalidArgument(format!("trend_fit needs at least 10 points, got {}", pts.len())));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub regret_cum: f64,
    pub avg_regret: f64,
    pub param_err: f64,
    pub lyapunov: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub logdet: f64,
    pub grad_energy: f64,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 8] = [
        "regret_cum",
        "avg_regret",
        "param_err",
        "lyapunov",
        "lambda_min",
        "lambda_max",
        "logdet",
        "grad_energy",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.regret_cum,
            self.avg_regret,
            self.param_err,
            self.lyapunov,
            self.lambda_min,
            self.lambda_max,
            self.logdet,
            self.grad_energy,
        ]
    }

    pub fn from_values(t: usize, v: [f64; 8]) -> Self {
        Self {
            t,
            regret_cum: v[0],
            avg_regret: v[1],
            param_err: v[2],
            lyapunov: v[3],
            lambda_min: v[4],
            lambda_max: v[5],
            logdet: v[6],
            grad_energy: v[7],
        }
    }
}

/// Per-step metrics of one run. Row `t` describes the state after `t`
/// updates: `R_t` sums the regret increments of steps `0..t`, and the error,
/// Lyapunov and eigenvalue columns use `θ̂_t` and `P_t⁻¹`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub rows: Vec<MetricsRow>,
    #[serde(skip)]
    regret_cum: f64,
    #[serde(skip)]
    grad_energy: f64,
    #[serde(skip)]
    horizon: usize,
    #[serde(skip)]
    next_checkpoint: usize,
}

impl MetricsSeries {
    pub fn with_horizon(horizon: usize) -> Self {
        Self {
            rows: Vec::with_capacity(horizon.min(FULL_CADENCE_LIMIT)),
            horizon,
            next_checkpoint: 1,
            ..Self::default()
        }
    }

    fn is_checkpoint(&mut self, t: usize) -> bool {
        if self.horizon <= FULL_CADENCE_LIMIT || t == self.horizon {
            return true;
        }
        if t < self.next_checkpoint {
            return false;
        }
        let grown = (self.next_checkpoint as f64 * THINNING_RATIO).ceil() as usize;
        self.next_checkpoint = grown.max(t + 1);
        true
    }

    /// Accumulates one step and, on checkpoint steps, stores a row built from `state`.
    pub fn record(
        &mut self,
        regret_increment: f64,
        grad_sq_norm: f64,
        theta_star: &ParamVector,
        state: &EstimatorState,
    ) -> Result<()> {
        self.regret_cum += regret_increment;
        self.grad_energy += grad_sq_norm;
        let t = state.t();
        if !self.is_checkpoint(t) {
            return Ok(());
        }
        let exc = excitation_diagnostics(state.p_inv())?;
        self.rows.push(MetricsRow {
            t,
            regret_cum: self.regret_cum,
            avg_regret: self.regret_cum / t as f64,
            param_err: (theta_star - state.theta_hat()).norm_squared(),
            lyapunov: lyapunov_value(theta_star, state.theta_hat(), state.p_inv())?,
            lambda_min: exc.lambda_min,
            lambda_max: exc.lambda_max,
            logdet: exc.logdet,
            grad_energy: self.grad_energy,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn at(&self, t: usize) -> Option<&MetricsRow> {
        self.rows
            .binary_search_by_key(&t, |r| r.t)
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// `(t, f(row))` pairs, ready for [`trend_fit`].
    pub fn column(&self, f: impl Fn(&MetricsRow) -> f64) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.t as f64, f(r))).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for row in &self.rows {
            write!(out, "{}", row.t)?;
            for v in row.values() {
                write!(out, ",{}", format_f64(v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != METRICS_HEADER {
            return Err(Error::Parse { line: 1, msg: format!("unexpected metrics header `{header}`") });
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields = parse_fields(&line, k + 2)?;
            if fields.len() != 9 {
                return Err(Error::Parse { line: k + 2, msg: format!("expected 9 fields, got {}", fields.len()) });
            }
            let mut v = [0.0; 8];
            v.copy_from_slice(&fields[1..]);
            rows.push(MetricsRow::from_values(fields[0] as usize, v));
        }
        Ok(Self { rows, ..Self::default() })
    }
}

/// Seventeen significant digits in scientific notation; locale independent
/// and exact on round trip.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn parse_fields(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse { line: line_no, msg: format!("`{f}`: {e}") })
        })
        .collect()
}

/// Per-step median, minimum and maximum of every metric across runs sharing
/// the same checkpoint grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSeries {
    pub t: Vec<usize>,
    /// `stats[column][step] = (median, min, max)`.
    pub stats: Vec<Vec<(f64, f64, f64)>>,
}

impl AggregateSeries {
    pub fn fold(runs: &[MetricsSeries]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::InvalidArgument("no runs to aggregate".into()))?;
        if runs.iter().any(|r| r.rows.len() != first.rows.len()) {
            return Err(Error::Dimension("runs have different checkpoint counts".into()));
        }
        let t: Vec<usize> = first.rows.iter().map(|r| r.t).collect();
        let mut stats = vec![Vec::with_capacity(t.len()); MetricsRow::COLUMNS.len()];
        let mut buf = Vec::with_capacity(runs.len());
        for (step, &ts) in t.iter().enumerate() {
            for (col, out) in stats.iter_mut().enumerate() {
                buf.clear();
                for run in runs {
                    let row = &run.rows[step];
                    if row.t != ts {
                        return Err(Error::Dimension("runs have different checkpoint grids".into()));
                    }
                    buf.push(row.values()[col]);
                }
                buf.sort_by(f64::total_cmp);
                out.push((median_sorted(&buf), buf[0], buf[buf.len() - 1]));
            }
        }
        Ok(Self { t, stats })
    }

    pub fn header() -> String {
        let mut h = String::from("t");
        for c in MetricsRow::COLUMNS {
            h.push_str(&format!(",{c}_median,{c}_min,{c}_max"));
        }
        h
    }

    pub fn column_index(name: &str) -> Option<usize> {
        MetricsRow::COLUMNS.iter().position(|c| *c == name)
    }

    pub fn median(&self, column: &str) -> Option<Vec<(f64, f64)>> {
        let c = Self::column_index(column)?;
        Some(self.t.iter().zip(&self.stats[c]).map(|(&t, s)| (t as f64, s.0)).collect())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::header())?;
        for (step, t) in self.t.iter().enumerate() {
            write!(out, "{t}")?;
            for col in &self.stats {
                let (med, lo, hi) = col[step];
                write!(out, ",{},{},{}", format_f64(med), format_f64(lo), format_f64(hi))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != Self::header() {
            return Err(Error::Parse { line: 1, msg: "unexpected aggregate header".into() });
        }
        let ncol = MetricsRow::COLUMNS.len();
        let mut t = Vec::new();
        let mut stats = vec![Vec::new(); ncol];
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f = parse_fields(&line, k + 2)?;
            if f.len() != 1 + 3 * ncol {
                return Err(Error::Parse { line: k + 2, msg: "wrong field count".into() });
            }
            t.push(f[0] as usize);
            for (c, col) in stats.iter_mut().enumerate() {
                col.push((f[1 + 3 * c], f[2 + 3 * c], f[3 + 3 * c]));
            }
        }
        Ok(Self { t, stats })
    }
}

pub fn median_sorted(sorted: &[f64]) -> f64 {
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_linear, make_rnn_sigmoid, Dimensions};

    #[test]
    fn regret_increment_examples() {
        let model = make_linear(&DMatrix::from_element(1, 1, 1.0), &DMatrix::zeros(1, 1)).unwrap();
        let star = DVector::from_column_slice(&[1.0, 0.0]);
        let hat = DVector::from_column_slice(&[0.5, 0.0]);
        let y = DVector::from_element(1, 2.0);
        let u = DVector::from_element(1, 0.0);
        assert_eq!(regret_increment(&model, &star, &hat, &y, &u, 0).unwrap(), 1.0);
        assert_eq!(regret_increment(&model, &star, &star, &y, &u, 0).unwrap(), 0.0);

        let rnn = make_rnn_sigmoid(Dimensions::new(2, 1).unwrap()).unwrap();
        let big = DVector::from_element(6, 40.0);
        let inc = regret_increment(&rnn, &big, &(-&big), &DVector::from_element(2, 3.0), &DVector::from_element(1, 1.0), 0)
            .unwrap();
        assert!(inc <= 2.0);
    }

    #[test]
    fn excitation_examples() {
        let e = excitation_diagnostics(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!((e.lambda_min, e.lambda_max, e.logdet), (1.0, 1.0, 0.0));
        let e = excitation_diagnostics(&DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 8.0]))).unwrap();
        assert_eq!((e.lambda_min, e.lambda_max), (2.0, 8.0));
        assert!((e.logdet - 16f64.ln()).abs() < 1e-15);
        assert!(excitation_diagnostics(&DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, -1.0]))).is_err());
    }

    #[test]
    fn lyapunov_examples() {
        let star = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let hat = DVector::from_column_slice(&[0.0, 1.0, 0.5]);
        assert_eq!(lyapunov_value(&star, &star, &DMatrix::identity(3, 3)).unwrap(), 0.0);
        assert_eq!(lyapunov_value(&star, &hat, &DMatrix::identity(3, 3)).unwrap(), 10.0);
        let w = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let lmin = excitation_diagnostics(&w).unwrap().lambda_min;
        assert!(lyapunov_value(&star, &hat, &w).unwrap() >= lmin * 10.0 - 1e-12);
    }

    #[test]
    fn trend_fit_examples() {
        let inv: Vec<(f64, f64)> = (1..=200).map(|k| (k as f64 * 10.0, 3.0 / (k as f64 * 10.0))).collect();
        assert!((trend_fit(&inv, (100.0, 2000.0)).unwrap() + 1.0).abs() < 1e-9);
        let flat: Vec<(f64, f64)> = (1..=50).map(|k| (k as f64, 2.0)).collect();
        assert!(trend_fit(&flat, (1.0, 50.0)).unwrap().abs() < 1e-12);
        let short: Vec<(f64, f64)> = (1..=5).map(|k| (k as f64, 2.0)).collect();
        assert!(trend_fit(&short, (1.0, 5.0)).is_err());
        let zero: Vec<(f64, f64)> = (1..=20).map(|k| (k as f64, 0.0)).collect();
        assert!(trend_fit(&zero, (1.0, 20.0)).is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let series = MetricsSeries {
            rows: vec![
                MetricsRow::from_values(1, [0.1, 0.1, 1.0 / 3.0, 2.0, 1.0, 1.5, 0.25, 7.0]),
                MetricsRow::from_values(2, [0.2, 0.1, 1e-300, 2.5, 1.0, 1.5, -0.25, 8.0]),
            ],
            ..MetricsSeries::default()
        };
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        let back = MetricsSeries::read_csv(&buf[..]).unwrap();
        assert_eq!(back.rows, series.rows);
    }

    #[test]
    fn thinned_cadence_is_sparse_and_keeps_last_step() {
        let mut s = MetricsSeries::with_horizon(1_000_000);
        let picked: Vec<usize> = (1..=1_000_000).filter(|&t| s.is_checkpoint(t)).collect();
        assert!(picked.len() < 400, "{}", picked.len());
        assert_eq!(picked[0], 1);
        assert_eq!(*picked.last().unwrap(), 1_000_000);
        let mut full = MetricsSeries::with_horizon(100);
        assert!((1..=100).all(|t| full.is_checkpoint(t)));
    }

    #[test]
    fn aggregate_median_min_max() {
        let run = |x: f64| MetricsSeries {
            rows: vec![MetricsRow::from_values(1, [x; 8])],
            ..MetricsSeries::default()
        };
        let agg = AggregateSeries::fold(&[run(3.0), run(1.0), run(2.0), run(10.0)]).unwrap();
        assert_eq!(agg.stats[0][0], (2.5, 1.0, 10.0));
        let mut buf = Vec::new();
        agg.write_csv(&mut buf).unwrap();
        assert_eq!(AggregateSeries::read_csv(&buf[..]).unwrap(), agg);
    }
}
