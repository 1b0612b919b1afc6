//! Helpers for evaluating acceptance criteria over experiment output:
//! seed-wise medians of derived series, windowed ratios, and a batch
//! least-squares oracle for linear plants.

use nalgebra::{DMatrix, DVector};
use nlsid_core::metrics::{median, MetricsRow, MetricsSeries};
use nlsid_core::simulation::TrajectorySample;

/// Per-step median over runs of `f(row)`; all runs must share one time grid.
pub fn median_series(runs: &[&MetricsSeries], f: impl Fn(&MetricsRow) -> f64) -> Vec<(f64, f64)> {
    let Some(first) = runs.first() else { return Vec::new() };
    let mut buf = Vec::with_capacity(runs.len());
    (0..first.rows.len())
        .map(|k| {
            buf.clear();
            buf.extend(runs.iter().map(|r| f(&r.rows[k])));
            (first.rows[k].t as f64, median(&buf))
        })
        .collect()
}

/// Value of the series at time `t` (exact match).
pub fn value_at(series: &[(f64, f64)], t: f64) -> Option<f64> {
    series.iter().find(|p| p.0 == t).map(|p| p.1)
}

/// `max_{t ∈ [lo, hi]} s(t) / s(anchor)`.
pub fn max_ratio(series: &[(f64, f64)], lo: f64, hi: f64, anchor: f64) -> Option<f64> {
    let base = value_at(series, anchor)?;
    series.iter().filter(|p| p.0 >= lo && p.0 <= hi).map(|p| p.1 / base).reduce(f64::max)
}

/// Ordinary least squares for `y_{t+1} = A x_t + B u_t + w` over a stored
/// trajectory, solved per output row with a QR factorization of the stacked
/// regressors. Returns θ in the row-stacked `[A rows, B rows]` layout.
pub fn batch_least_squares(samples: &[TrajectorySample], n: usize, m: usize) -> Option<DVector<f64>> {
    let k = samples.len();
    if k < n + m {
        return None;
    }
    let z = DMatrix::from_fn(k, n + m, |r, c| if c < n { samples[r].x[c] } else { samples[r].u[c - n] });
    let qr = z.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut theta = DVector::zeros(n * (n + m));
    for i in 0..n {
        let y = DVector::from_fn(k, |row, _| samples[row].y_next[i]);
        let row = r.solve_upper_triangular(&(q.transpose() * y))?;
        for j in 0..n {
            theta[i * n + j] = row[j];
        }
        for j in 0..m {
            theta[n * n + i * m + j] = row[n + j];
        }
    }
    Some(theta)
}
