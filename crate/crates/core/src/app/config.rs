//! TOML design-problem files.
//!
//! ```toml
//! [system]        # A, B, C, mu_w, sigma_w, sigma_e, mu_0, sigma_0
//! [controllers]   # K_low, K_high
//! [agent]         # gamma_a and either cost_gap or R (and optionally r)
//! [principal]     # gamma_p, optional J0P + J1P, optional Q / q
//! [utility]       # family = "sqrt" | "power" (rho) | "exponential" (risk_aversion)
//! [search]        # T_max, eta_grid_size, liability_mode, tol_cdf, tol_sep
//! ```
//!
//! Matrices are row-major nested lists; a bare number stands for a 1x1 matrix
//! or a length-1 vector.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::designer::{DesignConfig, LiabilityMode, SearchSettings, DEFAULT_ETA_GRID, TOL_SEP};
use crate::error::{Error, Result};
use crate::gchi2::TOL_CDF;
use crate::system::{
    AgentCostSpec, Effort, FeedbackController, LtiSystem, PrincipalCostSpec, UtilityFunction,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Values(Vec<f64>),
}

impl MatrixSpec {
    fn to_matrix(&self, field: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(x) => Ok(DMatrix::from_element(1, 1, *x)),
            MatrixSpec::Rows(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || cols == 0 {
                    return Err(Error::invalid(field, "matrix must be non-empty"));
                }
                if rows.iter().any(|r| r.len() != cols) {
                    return Err(Error::invalid(field, "rows have unequal lengths"));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
            }
        }
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixSpec::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }
}

impl VectorSpec {
    fn to_vector(&self, field: &str) -> Result<DVector<f64>> {
        match self {
            VectorSpec::Scalar(x) => Ok(DVector::from_element(1, *x)),
            VectorSpec::Values(v) if v.is_empty() => {
                Err(Error::invalid(field, "vector must be non-empty"))
            }
            VectorSpec::Values(v) => Ok(DVector::from_column_slice(v)),
        }
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        VectorSpec::Values(v.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "A")]
    pub a: MatrixSpec,
    #[serde(rename = "B")]
    pub b: MatrixSpec,
    #[serde(rename = "C")]
    pub c: MatrixSpec,
    pub mu_w: VectorSpec,
    pub sigma_w: MatrixSpec,
    pub sigma_e: MatrixSpec,
    pub mu_0: VectorSpec,
    pub sigma_0: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllersSection {
    #[serde(rename = "K_low")]
    pub k_low: MatrixSpec,
    #[serde(rename = "K_high")]
    pub k_high: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub gamma_a: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_gap: Option<f64>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r_matrix: Option<MatrixSpec>,
    #[serde(rename = "r", default, skip_serializing_if = "Option::is_none")]
    pub r_vector: Option<VectorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrincipalSection {
    pub gamma_p: f64,
    #[serde(rename = "J0P", default, skip_serializing_if = "Option::is_none")]
    pub j0p: Option<f64>,
    #[serde(rename = "J1P", default, skip_serializing_if = "Option::is_none")]
    pub j1p: Option<f64>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q_matrix: Option<MatrixSpec>,
    #[serde(rename = "q", default, skip_serializing_if = "Option::is_none")]
    pub q_vector: Option<VectorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySection {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_aversion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(rename = "T_max")]
    pub t_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_grid_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub liability_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_cdf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_sep: Option<f64>,
}

/// The file as written, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemSection,
    pub controllers: ControllersSection,
    pub agent: AgentSection,
    pub principal: PrincipalSection,
    pub utility: UtilitySection,
    pub search: SearchSection,
}

fn utility_from(section: &UtilitySection) -> Result<UtilityFunction<f64>> {
    let need = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| Error::invalid(format!("utility.{name}"), "required for this family"))
    };
    let u = match section.family.as_str() {
        "sqrt" => UtilityFunction::Sqrt,
        "power" => UtilityFunction::Power {
            rho: need(section.rho, "rho")?,
        },
        "exponential" => UtilityFunction::Exponential {
            risk_aversion: need(section.risk_aversion, "risk_aversion")?,
        },
        other => {
            return Err(Error::invalid(
                "utility.family",
                format!("expected \"sqrt\", \"power\" or \"exponential\", got \"{other}\""),
            ))
        }
    };
    u.validate()?;
    Ok(u)
}

impl ConfigFile {
    /// Builds and validates the design problem.
    pub fn to_design(&self) -> Result<DesignConfig<f64>> {
        let s = &self.system;
        let system = LtiSystem::new(
            s.a.to_matrix("system.A")?,
            s.b.to_matrix("system.B")?,
            s.c.to_matrix("system.C")?,
            s.mu_w.to_vector("system.mu_w")?,
            s.sigma_w.to_matrix("system.sigma_w")?,
            s.sigma_e.to_matrix("system.sigma_e")?,
            s.mu_0.to_vector("system.mu_0")?,
            s.sigma_0.to_matrix("system.sigma_0")?,
        )?;
        let low = FeedbackController::new(
            self.controllers.k_low.to_matrix("controllers.K_low")?,
            Effort::Low,
        );
        let high = FeedbackController::new(
            self.controllers.k_high.to_matrix("controllers.K_high")?,
            Effort::High,
        );
        low.check(&system)
            .map_err(|e| Error::invalid("controllers.K_low", e.to_string()))?;
        high.check(&system)
            .map_err(|e| Error::invalid("controllers.K_high", e.to_string()))?;

        let a = &self.agent;
        let (q, n) = (system.q(), system.n());
        if a.cost_gap.is_none() && a.r_matrix.is_none() {
            return Err(Error::invalid("agent", "give either cost_gap or R"));
        }
        let r_matrix = match &a.r_matrix {
            Some(m) => m.to_matrix("agent.R")?,
            None => DMatrix::zeros(q, q),
        };
        let r_vector = match &a.r_vector {
            Some(v) => v.to_vector("agent.r")?,
            None => DVector::zeros(r_matrix.nrows()),
        };
        let agent = AgentCostSpec::new(r_matrix, r_vector, a.gamma_a, a.cost_gap)?;

        let p = &self.principal;
        let state_cost_override = match (p.j0p, p.j1p) {
            (Some(j0), Some(j1)) => Some((j0, j1)),
            (None, None) => None,
            _ => {
                return Err(Error::invalid(
                    "principal",
                    "J0P and J1P must be given together",
                ))
            }
        };
        let q_matrix = match &p.q_matrix {
            Some(m) => m.to_matrix("principal.Q")?,
            None => DMatrix::zeros(n, n),
        };
        let q_vector = match &p.q_vector {
            Some(v) => v.to_vector("principal.q")?,
            None => DVector::zeros(q_matrix.nrows()),
        };
        let principal = PrincipalCostSpec::new(q_matrix, q_vector, p.gamma_p, state_cost_override)?;

        let sr = &self.search;
        let liability = match &sr.liability_mode {
            Some(m) => m.parse()?,
            None => LiabilityMode::Limited,
        };
        let search = SearchSettings {
            t_max: sr.t_max,
            eta_grid_size: sr.eta_grid_size.unwrap_or(DEFAULT_ETA_GRID),
            liability,
            tol_cdf: sr.tol_cdf.unwrap_or(TOL_CDF),
            tol_sep: sr.tol_sep.unwrap_or(TOL_SEP),
        };
        let config = DesignConfig {
            system,
            low,
            high,
            agent,
            principal,
            utility: utility_from(&self.utility)?,
            search,
        };
        config.validate()?;
        Ok(config)
    }

    /// File form of a design problem; every field is written out.
    pub fn from_design(config: &DesignConfig<f64>) -> Self {
        let sys = &config.system;
        let nonzero_m = |m: &DMatrix<f64>| m.iter().any(|x| *x != 0.0);
        let nonzero_v = |v: &DVector<f64>| v.iter().any(|x| *x != 0.0);
        let agent = &config.agent;
        let principal = &config.principal;
        let (family, rho, risk_aversion) = match config.utility {
            UtilityFunction::Sqrt => ("sqrt", None, None),
            UtilityFunction::Power { rho } => ("power", Some(rho), None),
            UtilityFunction::Exponential { risk_aversion } => {
                ("exponential", None, Some(risk_aversion))
            }
        };
        let write_r = agent.cost_gap_override.is_none()
            || nonzero_m(&agent.control_weight)
            || nonzero_v(&agent.control_linear);
        let write_q = nonzero_m(&principal.state_weight) || nonzero_v(&principal.state_linear);
        ConfigFile {
            system: SystemSection {
                a: MatrixSpec::from_matrix(sys.a()),
                b: MatrixSpec::from_matrix(sys.b()),
                c: MatrixSpec::from_matrix(sys.c()),
                mu_w: VectorSpec::from_vector(sys.mu_w()),
                sigma_w: MatrixSpec::from_matrix(sys.sigma_w()),
                sigma_e: MatrixSpec::from_matrix(sys.sigma_e()),
                mu_0: VectorSpec::from_vector(sys.mu_0()),
                sigma_0: MatrixSpec::from_matrix(sys.sigma_0()),
            },
            controllers: ControllersSection {
                k_low: MatrixSpec::from_matrix(&config.low.gain),
                k_high: MatrixSpec::from_matrix(&config.high.gain),
            },
            agent: AgentSection {
                gamma_a: agent.discount,
                cost_gap: agent.cost_gap_override,
                r_matrix: write_r.then(|| MatrixSpec::from_matrix(&agent.control_weight)),
                r_vector: write_r.then(|| VectorSpec::from_vector(&agent.control_linear)),
            },
            principal: PrincipalSection {
                gamma_p: principal.discount,
                j0p: principal.state_cost_override.map(|p| p.0),
                j1p: principal.state_cost_override.map(|p| p.1),
                q_matrix: write_q.then(|| MatrixSpec::from_matrix(&principal.state_weight)),
                q_vector: write_q.then(|| VectorSpec::from_vector(&principal.state_linear)),
            },
            utility: UtilitySection {
                family: family.to_string(),
                rho,
                risk_aversion,
            },
            search: SearchSection {
                t_max: config.search.t_max,
                eta_grid_size: Some(config.search.eta_grid_size),
                liability_mode: Some(config.search.liability.to_string()),
                tol_cdf: Some(config.search.tol_cdf),
                tol_sep: Some(config.search.tol_sep),
            },
        }
    }
}

/// Parses and validates a config from TOML text.
pub fn parse_config(text: &str) -> Result<DesignConfig<f64>> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    file.to_design()
}

/// Reads, parses and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<DesignConfig<f64>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(config: &DesignConfig<f64>) -> Result<String> {
    toml::to_string(&ConfigFile::from_design(config)).map_err(|e| Error::Config(e.to_string()))
}

pub fn save_config(config: &DesignConfig<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, config_to_toml(config)?)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
