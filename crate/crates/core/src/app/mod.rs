//! Config-driven orchestration behind the command-line tool.

pub mod config;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{config_to_toml, load_config, parse_config, save_config, ConfigFile};

use crate::designer::{
    design_contract, induce_effort, verify_constraints, ConstraintReport, ContractSolution,
    DesignConfig,
};
use crate::error::{Error, Result};
use crate::oracle::{ic_experiment, Streams, MIN_SAMPLES};

pub const CSV_HEADER: &str = "T,eta_star,alpha,beta,pi0,pi1,expected_cost";

/// Pipeline stage an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Design,
    Validation,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Design => "design",
            Stage::Validation => "validation",
            Stage::Output => "output",
        })
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{stage} stage: {source}")]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl StageError {
    pub fn new(stage: Stage, source: Error) -> Self {
        Self { stage, source }
    }

    /// 2 bad input, 3 no contract exists, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        let e = &self.source;
        if e.is_infeasible() {
            return 3;
        }
        match (self.stage, e) {
            (Stage::Config, _) => 2,
            (
                _,
                Error::Config(_) | Error::InvalidParameter { .. } | Error::DimensionMismatch(_),
            ) => 2,
            (_, Error::Divergent(_) | Error::NonpositiveGap(_)) => 2,
            (
                _,
                Error::QuadratureFailure { .. }
                | Error::EigenFailure
                | Error::SingularCovariance(_)
                | Error::NotPsd { .. }
                | Error::HorizonMismatch(..),
            ) => 4,
            _ => 1,
        }
    }
}

fn at(stage: Stage) -> impl FnOnce(Error) -> StageError {
    move |e| StageError::new(stage, e)
}

/// Options that do not live in the config file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Monte-Carlo sample count per controller; `None` skips validation.
    pub validate: Option<usize>,
    pub seed: u64,
}

/// Simulated check of a designed contract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub seed: u64,
    pub alpha: f64,
    pub alpha_hat: f64,
    pub alpha_stderr: f64,
    pub beta: f64,
    pub beta_hat: f64,
    pub beta_stderr: f64,
    /// Analytic and empirical values agree within three standard errors.
    pub alpha_agrees: bool,
    pub beta_agrees: bool,
    /// Agent's high-minus-low total cost and its standard error.
    pub ic_difference: f64,
    pub ic_stderr: f64,
    pub ic_passes: bool,
}

impl ValidationReport {
    pub fn passes(&self) -> bool {
        self.alpha_agrees && self.beta_agrees && self.ic_passes
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub design_seconds: f64,
    pub validation_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub solution: ContractSolution<f64>,
    pub constraints: ConstraintReport<f64>,
    /// Present when principal state costs are configured.
    pub induce_effort: Option<bool>,
    pub validation: Option<ValidationReport>,
    pub timing: Timing,
}

/// Monte-Carlo check of `solution` against `config`.
pub fn validate_solution(
    config: &DesignConfig<f64>,
    solution: &ContractSolution<f64>,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if samples < MIN_SAMPLES {
        return Err(Error::invalid(
            "validate",
            format!("need at least {MIN_SAMPLES} samples"),
        ));
    }
    if solution.t_star == 0 {
        return Err(Error::invalid("solution.t_star", "must be positive"));
    }
    let ic = ic_experiment(config, solution, samples, &Streams::new(seed))?;
    Ok(ValidationReport {
        samples,
        seed,
        alpha: solution.alpha,
        alpha_hat: ic.alpha.mean,
        alpha_stderr: ic.alpha.stderr,
        beta: solution.beta,
        beta_hat: ic.beta.mean,
        beta_stderr: ic.beta.stderr,
        alpha_agrees: ic.alpha.agrees(solution.alpha, 3.0, 1e-12),
        beta_agrees: ic.beta.agrees(solution.beta, 3.0, 1e-12),
        ic_difference: ic.high_minus_low.mean,
        ic_stderr: ic.high_minus_low.stderr,
        ic_passes: ic.passes,
    })
}

/// Design, constraint check and optional validation.
pub fn run_design(
    config: &DesignConfig<f64>,
    options: RunOptions,
) -> Result<RunReport, StageError> {
    config.validate().map_err(at(Stage::Config))?;
    let start = Instant::now();
    let solution = design_contract(config).map_err(at(Stage::Design))?;
    let design_seconds = start.elapsed().as_secs_f64();
    let constraints = verify_constraints(
        &solution,
        solution.cost_gap,
        solution.gamma_a,
        &config.utility,
    );
    let principal = &config.principal;
    let induce = (principal.state_cost_override.is_some() || !principal.is_zero())
        .then(|| induce_effort(&solution, solution.j0p, solution.j1p));
    let (validation, validation_seconds) = match options.validate {
        Some(n) => {
            let start = Instant::now();
            let v = validate_solution(config, &solution, n, options.seed)
                .map_err(at(Stage::Validation))?;
            (Some(v), Some(start.elapsed().as_secs_f64()))
        }
        None => (None, None),
    };
    Ok(RunReport {
        solution,
        constraints,
        induce_effort: induce,
        validation,
        timing: Timing {
            design_seconds,
            validation_seconds,
        },
    })
}

/// Shortest decimal with 17 significant digits, `%.17g` style.
pub fn format_g17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let mantissa = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Writes the per-horizon sweep as CSV (header only when the sweep is empty).
pub fn write_sweep_csv<W: Write>(
    solution: Option<&ContractSolution<f64>>,
    mut out: W,
) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(e.to_string());
    let mut text = String::with_capacity(64 * (1 + solution.map_or(0, |s| s.sweep.len())));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for row in solution.map_or(&[][..], |s| &s.sweep[..]) {
        let fields = [row.eta_opt, row.alpha, row.beta, row.pi0, row.pi1, row.cost].map(format_g17);
        text.push_str(&row.t.to_string());
        for f in fields {
            text.push(',');
            text.push_str(&f);
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(io)?;
    out.flush().map_err(io)
}

/// [`write_sweep_csv`] to a file.
pub fn emit_sweep(solution: Option<&ContractSolution<f64>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file =
        std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_sweep_csv(solution, std::io::BufWriter::new(file))
}

pub fn write_report(report: &RunReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Human-readable summary of a run.
pub fn summary(report: &RunReport) -> String {
    let s = &report.solution;
    let c = &report.constraints;
    let mut out = String::new();
    let mut line = |text: String| {
        out.push_str(&text);
        out.push('\n');
    };
    line(format!("liability mode      {}", s.liability_mode));
    line(format!("horizons feasible   {}", s.sweep.len()));
    line(format!("T*                  {}", s.t_star));
    line(format!("eta*                {:.10}", s.eta_star));
    line(format!(
        "alpha, beta         {:.10}, {:.10}",
        s.alpha, s.beta
    ));
    line(format!("pi0, pi1            {:.10}, {:.10}", s.pi0, s.pi1));
    line(format!("expected cost       {:.10}", s.expected_cost));
    line(format!("agent cost gap      {:.10}", s.cost_gap));
    line(format!(
        "constraints         {} (ic slack {:.3e}, participation slack {:.3e})",
        if c.satisfied { "satisfied" } else { "VIOLATED" },
        c.ic_slack,
        c.participation_slack
    ));
    if let Some(induce) = report.induce_effort {
        line(format!(
            "induce high effort  {induce} (J0P {:.10}, J1P {:.10})",
            s.j0p, s.j1p
        ));
    }
    if let Some(v) = &report.validation {
        line(format!(
            "validation          {} samples, seed {}",
            v.samples, v.seed
        ));
        line(format!(
            "  alpha             {:.6} vs {:.6} +- {:.2e} ({})",
            v.alpha,
            v.alpha_hat,
            v.alpha_stderr,
            agree(v.alpha_agrees)
        ));
        line(format!(
            "  beta              {:.6} vs {:.6} +- {:.2e} ({})",
            v.beta,
            v.beta_hat,
            v.beta_stderr,
            agree(v.beta_agrees)
        ));
        line(format!(
            "  incentive check   {:.4e} +- {:.2e} ({})",
            v.ic_difference,
            v.ic_stderr,
            if v.ic_passes {
                "high effort preferred"
            } else {
                "FAILED"
            }
        ));
    }
    line(format!(
        "design time         {:.2} s",
        report.timing.design_seconds
    ));
    out
}

fn agree(ok: bool) -> &'static str {
    if ok {
        "agrees"
    } else {
        "DISAGREES"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g17_matches_printf() {
        assert_eq!(format_g17(0.1), "0.10000000000000001");
        assert_eq!(format_g17(1.0), "1");
        assert_eq!(format_g17(-2.5), "-2.5");
        assert_eq!(format_g17(31.6495), "31.6495");
        assert_eq!(format_g17(1e-5), "1.0000000000000001e-05");
        assert_eq!(format_g17(1.5e-4), "0.00014999999999999999");
        assert_eq!(format_g17(1e17), "1e+17");
        assert_eq!(format_g17(123456789012345678.0), "1.2345678901234568e+17");
        assert_eq!(format_g17(0.0), "0");
    }

    #[test]
    fn g17_round_trips() {
        for x in [
            std::f64::consts::PI,
            1.0 / 3.0,
            2e-300,
            6.02e23,
            -7.0e-7,
            0.9856,
        ] {
            assert_eq!(format_g17(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let mut buf = Vec::new();
        write_sweep_csv(None, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn exit_codes() {
        let code = |stage, e| StageError::new(stage, e).exit_code();
        assert_eq!(code(Stage::Config, Error::Io("x".into())), 2);
        assert_eq!(code(Stage::Design, Error::invalid("gamma_a", "bad")), 2);
        assert_eq!(code(Stage::Design, Error::NoFeasibleContract(3)), 3);
        assert_eq!(code(Stage::Design, Error::EigenFailure), 4);
        assert_eq!(
            code(
                Stage::Design,
                Error::QuadratureFailure {
                    tolerance: 1e-6,
                    estimate: 1e-3
                }
            ),
            4
        );
        assert_eq!(code(Stage::Output, Error::Io("x".into())), 1);
    }
}
