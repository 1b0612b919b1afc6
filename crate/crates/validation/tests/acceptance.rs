//! Acceptance criteria, one PASS/FAIL line each. Runs at desk scale
//! (p = 6, n = 2, T = 10⁵, 10 seeds) and exits nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{jacobi_eigen, projection_oracle, random_spd, rng, benchmark, weighted_sq};
use nalgebra::{DMatrix, DVector};
use nlsid_cli::config::{EstimatorSpec, ExperimentConfig, GainSpec, ModelSpec};
use nlsid_cli::experiment::{run_dir, run_experiment, ExperimentOutcome, RunOptions};
use nlsid_cli::identify::{identify, read_trajectory};
use nlsid_core::metrics::{trend_fit, MetricsSeries};
use nlsid_core::models::{make_binary_probit, make_linear, make_rnn_sigmoid, pack_params, sample_ball, Dimensions, ThresholdPolicy};
use nlsid_core::projection::project_weighted_ball;
use nlsid_core::simulation::{closed_loop_identify, ExcitationKind, NoiseSpec, StepEvent};
use nlsid_validation::{batch_least_squares, max_ratio, median_series, value_at};
use rand::Rng;

const CASES: [ExcitationKind; 3] = [ExcitationKind::Zero, ExcitationKind::IidSphere, ExcitationKind::DecayingSphere];
const HORIZON: usize = 100_000;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn preset() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/presets/rnn_feedback_d3.json");
    ExperimentConfig::load(&path).expect("bundled preset must load")
}

fn run(config: &ExperimentConfig, dir: &Path, workers: Option<usize>) -> ExperimentOutcome {
    let options = RunOptions { output_dir: Some(dir.to_path_buf()), workers, emit_svg: None, seed_offset: 0 };
    run_experiment(config, &options).expect("experiment must run")
}

fn runs_of(outcome: &ExperimentOutcome, case: ExcitationKind) -> Vec<&MetricsSeries> {
    outcome.runs_for(case).map(|r| &r.metrics).collect()
}

/// Criterion 1: per-step identities of the recursion on a full-length run of each case.
fn algorithm_identities() -> Verdict {
    let config = preset();
    let resolved = config.validate().unwrap();
    let radius = config.estimator.radius;
    let mut notes = Vec::new();
    let mut ok = true;
    for case in CASES {
        let controller = config.controller.build(&resolved, case).unwrap();
        let state = config.estimator.build(&resolved.model).unwrap();
        let (mut step_ratio, mut gain_prod, mut recursion, mut norm_ratio) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
        let mut worst_drop = 0.0_f64;
        let mut prev_lambda = jacobi_eigen(state.p_inv()).0[0];
        let mut check = |ev: &StepEvent| {
            let d = ev.diagnostics;
            step_ratio = step_ratio.max(d.eta / d.alpha_t);
            gain_prod = gain_prod.max(ev.before.beta() * d.eta * d.gain_norm);
            let phi = resolved.model.eval_jacobian(ev.before.theta_hat(), &ev.sample.x, &ev.sample.u, ev.sample.t).unwrap();
            let expected = ev.before.p_inv() + &phi * phi.transpose() * (d.eta * d.eta);
            recursion = recursion.max((ev.after.p_inv() - expected).norm() / ev.after.p_inv().norm());
            norm_ratio = norm_ratio.max(ev.after.theta_hat().norm() / radius);
            let (vals, _) = jacobi_eigen(ev.after.p_inv());
            // Relative to λ_max: eigenvalues are only defined to ~ε‖P⁻¹‖.
            worst_drop = worst_drop.max((prev_lambda - vals[0]) / vals[vals.len() - 1]);
            prev_lambda = vals[0];
        };
        let (state, _) = closed_loop_identify(
            &resolved.model, &resolved.theta_star, state, &controller, config.noise, &config.x0(), HORIZON, 0, Some(&mut check),
        )
        .unwrap();
        let case_ok = step_ratio <= 1.0 && gain_prod <= 0.5 + 1e-9 && recursion <= 1e-8 && norm_ratio <= 1.0 + 1e-10 && worst_drop <= 1e-12;
        ok &= case_ok;
        notes.push(format!(
            "{}: max eta/alpha={step_ratio:.4}, max beta*eta*gain={gain_prod:.4}, max inverse-recursion rel err={recursion:.1e}, \
             max |theta|/D={norm_ratio:.4}, max lambda_min drop/lambda_max={worst_drop:.1e}, repairs={}",
            case.name(),
            state.refactorizations()
        ));
    }
    verdict(ok, notes.join("; "))
}

/// Criterion 2: projection against an independent bisection oracle.
fn projection_equivalence() -> Verdict {
    let mut r = rng(77);
    let (mut worst_obj, mut worst_feas) = (0.0_f64, 0.0_f64);
    for _ in 0..10_000 {
        let d = r.random_range(1..=12);
        let cond = 10f64.powf(r.random_range(0.0..=6.0));
        let m = random_spd(&mut r, d, cond);
        let radius = r.random_range(0.1..5.0);
        let x = common::gaussian_vec(&mut r, d) * r.random_range(0.1..20.0);
        let out = project_weighted_ball(&m, &x, radius, 1e-10).unwrap();
        let oracle = projection_oracle(&m, &x, radius);
        let f = weighted_sq(&m, &(&x - &out.point));
        let g = weighted_sq(&m, &(&x - &oracle));
        if g > 0.0 {
            worst_obj = worst_obj.max((f - g).abs() / g);
        } else {
            worst_obj = worst_obj.max(f);
        }
        worst_feas = worst_feas.max(out.point.norm() / radius - 1.0);
    }
    verdict(
        worst_obj <= 1e-6 && worst_feas <= 1e-10,
        format!("10^4 instances (p <= 12, cond <= 1e6): max objective rel gap={worst_obj:.2e}, max norm excess={worst_feas:.2e}"),
    )
}

/// Criterion 3: analytic Jacobians of all three families against central differences.
fn jacobian_checks() -> Verdict {
    let dims = Dimensions::new(2, 1).unwrap();
    let (a, b) = benchmark();
    let models = [
        make_linear(&a, &b).unwrap(),
        make_rnn_sigmoid(dims).unwrap(),
        make_binary_probit(dims, ThresholdPolicy::Cyclic(vec![vec![0.0, 0.0], vec![0.5, -0.5]])).unwrap(),
    ];
    let mut r = rng(3);
    let mut notes = Vec::new();
    let mut ok = true;
    for model in &models {
        let mut worst = 0.0_f64;
        for t in 0..100 {
            let theta = sample_ball(&mut r, 6, 3.0);
            let x = sample_ball(&mut r, 2, 3.0);
            let u = sample_ball(&mut r, 1, 3.0);
            worst = worst.max(model.check_jacobian_fd(&theta, &x, &u, t, 1e-5).unwrap());
        }
        ok &= worst <= 1e-5;
        notes.push(format!("{:?} max dev={worst:.2e}", model.kind()));
    }
    verdict(ok, notes.join(", "))
}

/// Criterion 4: sampled secant and self-bounding inequalities, r = 2.
fn assumption_sampling() -> Verdict {
    let (a, b) = benchmark();
    let theta_star = pack_params(&a, &b).unwrap();
    let dims = Dimensions::new(2, 1).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for model in [make_rnn_sigmoid(dims).unwrap(), make_binary_probit(dims, ThresholdPolicy::zero(2)).unwrap()] {
        let rep = model.check_assumption4(&theta_star, 10_000, 2.0, 0).unwrap();
        ok &= rep.passed();
        notes.push(format!(
            "{:?}: secant violations={}, self-bounding violations={} (beta=1; smallest sufficient beta={:.3})",
            model.kind(),
            rep.secant_violations,
            rep.self_bound_violations,
            rep.required_beta
        ));
    }
    verdict(ok, notes.join("; "))
}

/// Criterion 5: average regret decays in every case.
fn regret_convergence(outcome: &ExperimentOutcome) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for case in CASES {
        let s = median_series(&runs_of(outcome, case), |r| r.avg_regret);
        let ratio = value_at(&s, 1e5).unwrap() / value_at(&s, 1e2).unwrap();
        let slope = trend_fit(&s, (1e3, 1e5)).unwrap();
        ok &= ratio <= 0.1 && slope <= -0.5;
        notes.push(format!("{}: ratio(1e5/1e2)={ratio:.4}, slope={slope:.3}", case.name()));
    }
    verdict(ok, notes.join("; "))
}

/// Criterion 6: with bounded noise, R_t / log t stays bounded.
fn logarithmic_regret(outcome: &ExperimentOutcome) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for case in CASES {
        let s = median_series(&runs_of(outcome, case), |r| r.regret_cum / (r.t as f64).ln());
        let ratio = max_ratio(&s, 1e3, 1e5, 1e3).unwrap();
        ok &= ratio <= 5.0;
        notes.push(format!("{}: max ratio={ratio:.3}", case.name()));
    }
    verdict(ok, notes.join("; "))
}

/// Criterion 7: parameter error depends on excitation as predicted.
fn excitation_dichotomy(outcome: &ExperimentOutcome) -> Verdict {
    let err = |case| median_series(&runs_of(outcome, case), |r| r.param_err);
    let (zero, iid, dec) = (err(ExcitationKind::Zero), err(ExcitationKind::IidSphere), err(ExcitationKind::DecayingSphere));
    let final_of = |s: &[(f64, f64)]| value_at(s, 1e5).unwrap();
    let iid_slope = trend_fit(&iid, (1e3, 1e5)).unwrap();
    let lam = median_series(&runs_of(outcome, ExcitationKind::DecayingSphere), |r| r.lambda_min);
    let lam_growth = value_at(&lam, 1e5).unwrap() / value_at(&lam, 1e4).unwrap();
    let checks = [
        ((-1.3..=-0.6).contains(&iid_slope), format!("iid slope={iid_slope:.3} in [-1.3,-0.6]")),
        (final_of(&iid) <= 0.02, format!("iid final={:.4e} <= 0.02", final_of(&iid))),
        (lam_growth >= 2.0, format!("decaying lambda_min(1e5)/lambda_min(1e4)={lam_growth:.3} >= 2")),
        (
            final_of(&dec) <= 5.0 * final_of(&iid),
            format!("decaying final/iid final={:.3} <= 5", final_of(&dec) / final_of(&iid)),
        ),
        (
            final_of(&zero) >= 10.0 * final_of(&iid),
            format!("zero final/iid final={:.1} >= 10", final_of(&zero) / final_of(&iid)),
        ),
    ];
    let ok = checks.iter().all(|c| c.0);
    let detail: Vec<String> = checks.iter().map(|(p, s)| format!("{}{s}", if *p { "" } else { "NOT " })).collect();
    verdict(ok, detail.join("; "))
}

/// Criterion 8: recursive and batch estimates of an open-loop linear plant.
fn linear_cross_validation(dir: &Path) -> Verdict {
    let mut config = preset();
    let (a, b) = benchmark();
    let a = a * 0.5;
    let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect::<Vec<Vec<f64>>>();
    config.model = ModelSpec { kind: nlsid_core::models::ModelKind::Linear, a: Some(rows(&a)), b: Some(rows(&b)), threshold: None, ..config.model };
    config.controller.gain = GainSpec::Explicit(vec![vec![0.0, 0.0]]);
    config.cases = vec![ExcitationKind::IidSphere];
    config.noise = NoiseSpec::gaussian(0.1);
    config.export_trajectory = true;
    config.emit_svg = false;
    let outcome = run(&config, dir, None);
    let theta_star = pack_params(&a, &b).unwrap();
    let est: EstimatorSpec = config.estimator.clone();
    let (mut both, mut notes) = (0, Vec::new());
    for r in &outcome.runs {
        let samples = read_trajectory(&run_dir(dir, r.case, r.seed).join("trajectory.csv"), 2, 1).unwrap();
        let recursive = identify(&samples, &config.model, &est).unwrap().report;
        let rec_err = (DVector::from_vec(recursive.theta_hat.clone()) - &theta_star).norm();
        let ls = batch_least_squares(&samples, 2, 1).unwrap();
        let ls_err = (ls - &theta_star).norm();
        if rec_err <= 0.05 && ls_err <= 0.05 {
            both += 1;
        }
        notes.push(format!("{:.4}/{:.4}", rec_err, ls_err));
    }
    verdict(both >= 9, format!("{both}/10 seeds with both within 0.05 (recursive/batch errors: {})", notes.join(" ")))
}

/// Criterion 9: V_t / log(r_t + e) stays within a constant of its early value.
fn lyapunov_boundedness(outcome: &ExperimentOutcome) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for case in CASES {
        let s = median_series(&runs_of(outcome, case), |r| r.lyapunov / (r.grad_energy + std::f64::consts::E).ln());
        let ratio = max_ratio(&s, 1e3, 1e5, 1e3).unwrap();
        ok &= ratio <= 10.0;
        notes.push(format!("{}: max ratio={ratio:.3}", case.name()));
    }
    verdict(ok, notes.join("; "))
}

fn data_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv" || e == "svg") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Criterion 10: byte-identical output across reruns, worker counts and manifest replay.
fn determinism(dir: &Path) -> Verdict {
    let mut config = preset();
    config.horizon = 3_000;
    config.seeds = vec![0, 1, 2, 3];
    config.export_trajectory = true;
    let (d1, d2, d3, d4) = (dir.join("w1"), dir.join("w4"), dir.join("w1_again"), dir.join("manifest_replay"));
    run(&config, &d1, Some(1));
    run(&config, &d2, Some(4));
    run(&config, &d3, Some(1));
    let replay = ExperimentConfig::load(&d1.join("manifest.json")).unwrap();
    run(&replay, &d4, Some(2));
    let base = data_files(&d1);
    let same = [&d2, &d3, &d4].iter().all(|d| data_files(d) == base);
    verdict(same && base.len() > 30, format!("{} CSV/SVG files compared across 4 runs (workers 1, 4, 1, 2 via manifest)", base.len()))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut timed = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        eprintln!("  (criterion {id} took {:.1}s)", start.elapsed().as_secs_f64());
        results.push((id, name, v));
    };

    timed(1, "algorithm identities", &mut algorithm_identities);
    timed(2, "projection oracle equivalence", &mut projection_equivalence);
    timed(3, "jacobian checks", &mut jacobian_checks);
    timed(4, "secant and self-bounding sampling", &mut assumption_sampling);

    let gaussian = {
        let mut config = preset();
        config.emit_svg = false;
        run(&config, &tmp.path().join("gaussian"), None)
    };
    timed(5, "regret convergence", &mut || regret_convergence(&gaussian));
    timed(7, "excitation dichotomy", &mut || excitation_dichotomy(&gaussian));
    timed(9, "lyapunov boundedness", &mut || lyapunov_boundedness(&gaussian));
    drop(gaussian);
    fs::remove_dir_all(tmp.path().join("gaussian")).ok();

    let bounded = {
        let mut config = preset();
        config.emit_svg = false;
        config.noise = NoiseSpec::bounded_uniform(1.0);
        run(&config, &tmp.path().join("bounded"), None)
    };
    timed(6, "logarithmic regret (bounded noise)", &mut || logarithmic_regret(&bounded));
    drop(bounded);
    fs::remove_dir_all(tmp.path().join("bounded")).ok();

    timed(8, "linear cross-validation", &mut || linear_cross_validation(&tmp.path().join("linear")));
    timed(10, "determinism", &mut || determinism(&tmp.path().join("determinism")));

    results.sort_by_key(|r| r.0);
    println!();
    for (id, name, v) in &results {
        println!("{} criterion {id:>2} ({name}): {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
