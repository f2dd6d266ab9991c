use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lti_incentive::app::{
    emit_sweep, load_config, read_report, run_design, summary, validate_solution, write_report,
    write_sweep_csv, RunOptions, Stage, StageError,
};
use lti_incentive::designer::{DesignConfig, LiabilityMode};
use lti_incentive::oracle::DEFAULT_SAMPLES;
use lti_incentive::Error;

#[derive(Parser)]
#[command(
    version,
    about = "Design threshold payment contracts for an agent steering a stochastic LTI system"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full design and print a summary; `--output DIR` also writes report.json and sweep.csv.
    Design {
        #[command(flatten)]
        common: Common,
        /// Monte-Carlo validation with N samples per controller.
        #[arg(long, value_name = "N")]
        validate: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        output: Option<PathBuf>,
    },
    /// Run the design and write only the per-horizon CSV (stdout when `--output` is absent).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Monte-Carlo check of a saved report against its config.
    Validate {
        #[command(flatten)]
        common: Common,
        /// report.json written by `design`.
        #[arg(long, value_name = "FILE")]
        solution: PathBuf,
        #[arg(long, value_name = "N", default_value_t = DEFAULT_SAMPLES)]
        validate: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the validation report as JSON.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML design problem.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the longest horizon searched.
    #[arg(long, value_name = "T")]
    t_max: Option<usize>,
    /// Override the liability mode.
    #[arg(long, value_enum)]
    liability: Option<Liability>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Liability {
    Limited,
    General,
}

impl Common {
    fn load(&self) -> Result<DesignConfig<f64>, StageError> {
        let stage = |e| StageError::new(Stage::Config, e);
        let mut config = load_config(&self.config).map_err(stage)?;
        if let Some(t) = self.t_max {
            config.search.t_max = t;
        }
        if let Some(l) = self.liability {
            config.search.liability = match l {
                Liability::Limited => LiabilityMode::Limited,
                Liability::General => LiabilityMode::General,
            };
        }
        config.validate().map_err(stage)?;
        Ok(config)
    }
}

fn output_error(e: Error) -> StageError {
    StageError::new(Stage::Output, e)
}

fn create_dir(dir: &Path) -> Result<(), StageError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| output_error(Error::Io(format!("{}: {e}", dir.display()))))
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::Design {
            common,
            validate,
            seed,
            output,
        } => {
            let config = common.load()?;
            let result = run_design(&config, RunOptions { validate, seed });
            if let Some(dir) = &output {
                create_dir(dir)?;
                let solution = result.as_ref().ok().map(|r| &r.solution);
                emit_sweep(solution, dir.join("sweep.csv")).map_err(output_error)?;
                if let Ok(report) = &result {
                    write_report(report, dir.join("report.json")).map_err(output_error)?;
                }
            }
            let report = result?;
            print!("{}", summary(&report));
            if report.validation.is_some_and(|v| !v.passes()) {
                eprintln!("warning: Monte-Carlo validation disagrees with the analytic contract");
            }
            Ok(())
        }
        Command::Sweep { common, output } => {
            let config = common.load()?;
            let result = run_design(&config, RunOptions::default());
            let solution = result.as_ref().ok().map(|r| &r.solution);
            match &output {
                Some(path) => emit_sweep(solution, path),
                None => write_sweep_csv(solution, std::io::stdout().lock()),
            }
            .map_err(output_error)?;
            result.map(|_| ())
        }
        Command::Validate {
            common,
            solution,
            validate,
            seed,
            output,
        } => {
            let config = common.load()?;
            let report = read_report(&solution).map_err(|e| StageError::new(Stage::Config, e))?;
            let v = validate_solution(&config, &report.solution, validate, seed)
                .map_err(|e| StageError::new(Stage::Validation, e))?;
            let text = serde_json::to_string_pretty(&v).expect("plain data serializes");
            match &output {
                Some(path) => std::fs::write(path, text + "\n")
                    .map_err(|e| output_error(Error::Io(format!("{}: {e}", path.display()))))?,
                None => println!("{text}"),
            }
            if !v.passes() {
                eprintln!("warning: Monte-Carlo validation disagrees with the analytic contract");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
