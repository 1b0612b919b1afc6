use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nlsid_cli::check::run_check;
use nlsid_cli::config::{ExperimentConfig, ModelFile};
use nlsid_cli::experiment::{run_experiment, RunOptions};
use nlsid_cli::identify::run_identify;
use nlsid_cli::CliError;

#[derive(Parser)]
#[command(name = "nlsid", about = "Online identification of nonlinear stochastic systems", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop identification experiment from a JSON config (or a run manifest).
    Experiment {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Worker threads (default: all cores). Output does not depend on it.
        #[arg(long)]
        workers: Option<usize>,
        /// Write SVG charts (overrides the config).
        #[arg(long, overrides_with = "no_svg")]
        svg: bool,
        /// Skip SVG charts (overrides the config).
        #[arg(long = "no-svg", overrides_with = "svg")]
        no_svg: bool,
        /// Added to every seed in the config.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Replay the estimator over a recorded trajectory CSV.
    Identify {
        trajectory: PathBuf,
        model: PathBuf,
        estimator: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check a model configuration; exits nonzero if any gating check fails.
    Check {
        model: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Print the JSON report instead of the text summary.
        #[arg(long)]
        json: bool,
    },
    /// Print the version.
    Version,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Experiment { config, common, workers, svg, no_svg, seed_offset } => {
            let cfg = ExperimentConfig::load(&config)?;
            let emit_svg = if svg { Some(true) } else if no_svg { Some(false) } else { None };
            let options = RunOptions { output_dir: common.out, workers, emit_svg, seed_offset };
            let outcome = run_experiment(&cfg, &options)?;
            println!(
                "wrote {} files for {} runs to {}",
                outcome.files.len(),
                outcome.runs.len(),
                outcome.config.output_dir.display()
            );
            for case in &outcome.cases {
                if let Some(last) = case.aggregate.t.last() {
                    let col = |name| nlsid_core::metrics::AggregateSeries::column_index(name).unwrap();
                    let n = case.aggregate.t.len() - 1;
                    println!(
                        "  {:<16} t = {last}: median avg regret {:.4e}, median parameter error {:.4e}",
                        case.case.name(),
                        case.aggregate.stats[col("avg_regret")][n].0,
                        case.aggregate.stats[col("param_err")][n].0
                    );
                }
            }
            Ok(0)
        }
        Command::Identify { trajectory, model, estimator, common } => {
            let out = common.out.unwrap_or_else(|| PathBuf::from("."));
            let outcome = run_identify(&trajectory, &model, &estimator, &out)?;
            let r = &outcome.report;
            println!("replayed {} samples; theta_hat = {:?}", r.samples, r.theta_hat);
            if let Some(err) = r.reference_error {
                println!("distance to reference parameters: {err:.6}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
        Command::Check { model, common, json } => {
            let file = ModelFile::load(&model)?;
            let report = run_check(&file)?;
            let text = serde_json::to_string_pretty(&report)?;
            if json {
                println!("{text}");
            } else {
                print!("{}", report.render());
            }
            if let Some(dir) = common.out {
                std::fs::create_dir_all(&dir)?;
                let mut f = std::fs::File::create(dir.join("check_report.json"))?;
                writeln!(f, "{text}")?;
            }
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Version => {
            println!("nlsid {}", env!("CARGO_PKG_VERSION"));
            Ok(0)
        }
    }
}
