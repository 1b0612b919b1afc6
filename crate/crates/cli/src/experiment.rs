//! Closed-loop identification experiments: one rollout per (case, seed),
//! fanned out over a thread pool, then folded into per-case aggregates.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use nlsid_core::metrics::{AggregateSeries, MetricsRow, MetricsSeries};
use nlsid_core::simulation::{closed_loop_identify, write_trajectory_csv, ExcitationKind, StepEvent, TrajectorySample};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ResolvedModel};
use crate::{svg, CliError};

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub output_dir: Option<PathBuf>,
    /// Thread count; `None` uses every available core.
    pub workers: Option<usize>,
    pub emit_svg: Option<bool>,
    pub seed_offset: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub case: ExcitationKind,
    pub seed: u64,
    pub metrics: MetricsSeries,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub case: ExcitationKind,
    pub aggregate: AggregateSeries,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// The config as actually run (overrides applied).
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub cases: Vec<CaseResult>,
    pub files: Vec<PathBuf>,
}

impl ExperimentOutcome {
    pub fn runs_for(&self, case: ExcitationKind) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.case == case)
    }

    pub fn aggregate(&self, case: ExcitationKind) -> Option<&AggregateSeries> {
        self.cases.iter().find(|c| c.case == case).map(|c| &c.aggregate)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    /// Re-runnable: `nlsid experiment manifest.json` reproduces the data files.
    config: &'a ExperimentConfig,
    feedback_gain: Vec<Vec<f64>>,
    theta_star: Vec<f64>,
    conventions: Vec<String>,
    runs: Vec<ManifestRun>,
    files: Vec<String>,
}

#[derive(Serialize)]
struct ManifestRun {
    case: &'static str,
    seed: u64,
    directory: String,
    final_row: Option<MetricsRow>,
}

pub fn case_dir(root: &Path, case: ExcitationKind) -> PathBuf {
    root.join(case.name())
}

pub fn run_dir(root: &Path, case: ExcitationKind, seed: u64) -> PathBuf {
    case_dir(root, case).join(format!("seed_{seed}"))
}

/// Applies overrides, checks the config, runs every (case, seed) pair and
/// writes all output files.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentOutcome, CliError> {
    let mut config = config.clone();
    if let Some(dir) = &options.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(svg) = options.emit_svg {
        config.emit_svg = svg;
    }
    if options.seed_offset != 0 {
        config.seeds = config
            .seeds
            .iter()
            .map(|s| {
                s.checked_add(options.seed_offset)
                    .ok_or_else(|| CliError::Config(format!("seeds: {s} + offset overflows")))
            })
            .collect::<Result<_, _>>()?;
    }
    if options.workers == Some(0) {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let resolved = config.validate()?;
    let root = config.output_dir.clone();

    let jobs: Vec<(ExcitationKind, u64)> =
        config.cases.iter().flat_map(|&c| config.seeds.iter().map(move |&s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    info!("running {} rollouts of {} steps", jobs.len(), config.horizon);
    let results: Vec<Result<RunResult, CliError>> =
        pool.install(|| jobs.par_iter().map(|&(case, seed)| run_one(&config, &resolved, case, seed)).collect());
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut files = Vec::new();
    for run in &runs {
        let dir = run_dir(&root, run.case, run.seed);
        files.push(dir.join("metrics.csv"));
        if config.export_trajectory {
            files.push(dir.join("trajectory.csv"));
        }
    }
    let mut cases = Vec::new();
    for &case in &config.cases {
        let series: Vec<MetricsSeries> = runs.iter().filter(|r| r.case == case).map(|r| r.metrics.clone()).collect();
        let aggregate = AggregateSeries::fold(&series).map_err(|e| CliError::Runtime(format!("{}: {e}", case.name())))?;
        let dir = case_dir(&root, case);
        let path = dir.join("aggregate.csv");
        write_file(&path, |w| aggregate.write_csv(w).map_err(CliError::from))?;
        files.push(path);
        if config.emit_svg {
            for (name, contents) in svg::case_charts(&aggregate, case.name()) {
                let path = dir.join(name);
                write_file(&path, |w| w.write_all(contents.as_bytes()).map_err(CliError::from))?;
                files.push(path);
            }
        }
        cases.push(CaseResult { case, aggregate });
    }

    let manifest_path = root.join("manifest.json");
    files.push(manifest_path.clone());
    let gain = config.controller.gain(&resolved)?;
    let manifest = Manifest {
        tool: "nlsid",
        version: env!("CARGO_PKG_VERSION"),
        config: &config,
        feedback_gain: (0..gain.nrows()).map(|i| gain.row(i).iter().copied().collect()).collect(),
        theta_star: resolved.theta_star.as_slice().to_vec(),
        conventions: vec![
            format!("feedback law: u_t = {}K x_t + eps_t", if config.controller.sign == Default::default() { "-" } else { "+" }),
            "P_0 = I; estimates start at estimator.theta0 (zero if omitted)".into(),
            "x_0 = model-dimension zero vector unless x0 is given".into(),
            "noise is drawn independently per state coordinate".into(),
            "each seed drives independent streams for process noise, excitation and latent noise".into(),
            "excitation time index starts at t = 1".into(),
        ],
        runs: runs
            .iter()
            .map(|r| ManifestRun {
                case: r.case.name(),
                seed: r.seed,
                directory: relative(&root, &run_dir(&root, r.case, r.seed)),
                final_row: r.metrics.last().copied(),
            })
            .collect(),
        files: files.iter().map(|f| relative(&root, f)).collect(),
    };
    write_file(&manifest_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(ExperimentOutcome { config, runs, cases, files })
}

fn run_one(config: &ExperimentConfig, resolved: &ResolvedModel, case: ExcitationKind, seed: u64) -> Result<RunResult, CliError> {
    let label = format!("case {} seed {seed}", case.name());
    let estimator = config.estimator.build(&resolved.model)?;
    let controller = config.controller.build(resolved, case)?;
    let mut trajectory: Vec<TrajectorySample> = Vec::new();
    let mut keep = |ev: &StepEvent| trajectory.push(ev.sample.clone());
    let observer: Option<&mut dyn FnMut(&StepEvent)> = if config.export_trajectory { Some(&mut keep) } else { None };
    let (_, metrics) = closed_loop_identify(
        &resolved.model,
        &resolved.theta_star,
        estimator,
        &controller,
        config.noise,
        &config.x0(),
        config.horizon,
        seed,
        observer,
    )
    .map_err(|e| CliError::Runtime(format!("{label}: {e}")))?;

    let dir = run_dir(&config.output_dir, case, seed);
    write_file(&dir.join("metrics.csv"), |w| metrics.write_csv(w).map_err(CliError::from))?;
    if config.export_trajectory {
        let dims = resolved.model.dims();
        write_file(&dir.join("trajectory.csv"), |w| {
            write_trajectory_csv(w, &trajectory, dims.n, dims.m).map_err(CliError::from)
        })?;
    }
    info!("{label}: done");
    Ok(RunResult { case, seed, metrics })
}

pub(crate) fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    let file = File::create(path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush().map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}
