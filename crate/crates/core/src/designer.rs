//! Payments, principal objective, constraint checks and the nested
//! horizon/threshold search for the optimal contract.
//!
//! The contract pays `pi_1` when `L(Y_T) >= eta` and `pi_0` otherwise. For a
//! fixed `(T, eta)` the incentive constraint binds and the payments follow in
//! closed form; the outer search runs over `T = 1..=T_max`, the inner one over
//! `eta` on a grid spanning both LLR laws, refined by golden section.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gchi2::{quantile_bracket, SurvivalBatch, TOL_CDF};
use crate::llr::{GChi2Law, NestedLlr};
use crate::scalar::{lit, to_f64, Real};
use crate::system::{
    agent_cost_gap, principal_costs, AgentCostSpec, FeedbackController, LtiSystem,
    PrincipalCostSpec, UtilityFunction,
};
use crate::trajectory::{distinguishable, stacked_distribution, Hypothesis};

/// Smallest admissible `beta - alpha` before dividing by it.
pub const TOL_SEP: f64 = 1e-8;
pub const DEFAULT_ETA_GRID: usize = 512;
/// Slack below which a constraint counts as violated.
pub const TOL_CONSTRAINT: f64 = 1e-6;

const GOLDEN_ITERATIONS: usize = 60;

/// Whether the agent can be fined (`pi_0 < 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiabilityMode {
    General,
    Limited,
}

impl std::fmt::Display for LiabilityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LiabilityMode::General => "general",
            LiabilityMode::Limited => "limited",
        })
    }
}

impl std::str::FromStr for LiabilityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(LiabilityMode::General),
            "limited" => Ok(LiabilityMode::Limited),
            other => Err(Error::invalid(
                "liability_mode",
                format!("expected `limited` or `general`, got `{other}`"),
            )),
        }
    }
}

/// Search grid and tolerances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSettings<T> {
    pub t_max: usize,
    pub eta_grid_size: usize,
    pub liability: LiabilityMode,
    pub tol_cdf: T,
    pub tol_sep: T,
}

impl<T: Real> SearchSettings<T> {
    pub fn new(t_max: usize, liability: LiabilityMode) -> Self {
        Self {
            t_max,
            eta_grid_size: DEFAULT_ETA_GRID,
            liability,
            tol_cdf: lit(TOL_CDF),
            tol_sep: lit(TOL_SEP),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::invalid("T_max", "must be at least 1"));
        }
        if self.eta_grid_size < 2 {
            return Err(Error::invalid("eta_grid_size", "must be at least 2"));
        }
        if !(self.tol_cdf > T::zero() && self.tol_cdf < lit(0.01)) {
            return Err(Error::invalid("tol_cdf", "must lie in (0, 0.01)"));
        }
        if !(self.tol_sep > T::zero() && self.tol_sep < T::one()) {
            return Err(Error::invalid("tol_sep", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// A complete design problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignConfig<T: Real> {
    pub system: LtiSystem<T>,
    pub low: FeedbackController<T>,
    pub high: FeedbackController<T>,
    pub agent: AgentCostSpec<T>,
    pub principal: PrincipalCostSpec<T>,
    pub utility: UtilityFunction<T>,
    pub search: SearchSettings<T>,
}

impl<T: Real> DesignConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.low.check(&self.system)?;
        self.high.check(&self.system)?;
        self.utility.validate()?;
        self.search.validate()?;
        if self.agent.cost_gap_override.is_none()
            && self.agent.control_weight.nrows() != self.system.q()
        {
            return Err(Error::DimensionMismatch(format!(
                "R is {}x{}, plant has {} inputs",
                self.agent.control_weight.nrows(),
                self.agent.control_weight.ncols(),
                self.system.q()
            )));
        }
        if self.principal.state_cost_override.is_none()
            && self.principal.state_weight.nrows() != self.system.n()
        {
            return Err(Error::DimensionMismatch(format!(
                "Q is {}x{}, plant has {} states",
                self.principal.state_weight.nrows(),
                self.principal.state_weight.ncols(),
                self.system.n()
            )));
        }
        if self.search.liability == LiabilityMode::General && !self.utility.allows_fines() {
            return Err(Error::invalid(
                "liability_mode",
                "general contracts need a utility defined on negative payments (family = \"exponential\")",
            ));
        }
        Ok(())
    }
}

/// Per-horizon optimum of the threshold search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    #[serde(rename = "T")]
    pub t: usize,
    pub eta_opt: T,
    pub alpha: T,
    pub beta: T,
    pub pi0: T,
    pub pi1: T,
    pub cost: T,
}

/// Optimal contract and the sweep behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractSolution<T> {
    pub t_star: usize,
    pub eta_star: T,
    pub pi0: T,
    pub pi1: T,
    pub alpha: T,
    pub beta: T,
    pub expected_cost: T,
    pub liability_mode: LiabilityMode,
    pub cost_gap: T,
    pub gamma_a: T,
    pub gamma_p: T,
    pub j0p: T,
    pub j1p: T,
    pub sweep: Vec<SweepRow<T>>,
}

/// `Delta = gamma_a^-T (J^A_1 - J^A_0) / (U(pi_1) - U(pi_0))`.
pub fn delta_constant<T: Real>(
    horizon: usize,
    cost_gap: T,
    gamma_a: T,
    u_pi0: T,
    u_pi1: T,
) -> Result<T> {
    let du = u_pi1 - u_pi0;
    if !(du > T::zero()) {
        return Err(Error::DegenerateSeparation(to_f64(du)));
    }
    Ok(discount_inverse(gamma_a, horizon) * cost_gap / du)
}

fn discount_inverse<T: Real>(gamma: T, horizon: usize) -> T {
    // gamma^-T as exp(-T ln gamma) stays finite well past i32 exponents
    (-(gamma.ln()) * lit::<T>(horizon as f64)).exp()
}

fn discount<T: Real>(gamma: T, horizon: usize) -> T {
    (gamma.ln() * lit::<T>(horizon as f64)).exp()
}

fn check_separation<T: Real>(alpha: T, beta: T, tol_sep: T) -> Result<T> {
    let sep = beta - alpha;
    if !(sep >= tol_sep) {
        return Err(Error::DegenerateSeparation(to_f64(sep)));
    }
    Ok(sep)
}

fn check_gap<T: Real>(cost_gap: T) -> Result<()> {
    if !(cost_gap > T::zero()) {
        return Err(Error::NonpositiveGap(to_f64(cost_gap)));
    }
    Ok(())
}

/// Payments when fines are allowed: both the incentive and participation
/// constraints bind.
pub fn optimal_payments<T: Real>(
    horizon: usize,
    alpha: T,
    beta: T,
    cost_gap: T,
    gamma_a: T,
    utility: &UtilityFunction<T>,
) -> Result<(T, T)> {
    optimal_payments_with(
        horizon,
        alpha,
        beta,
        cost_gap,
        gamma_a,
        utility,
        lit(TOL_SEP),
    )
}

fn optimal_payments_with<T: Real>(
    horizon: usize,
    alpha: T,
    beta: T,
    cost_gap: T,
    gamma_a: T,
    utility: &UtilityFunction<T>,
    tol_sep: T,
) -> Result<(T, T)> {
    check_gap(cost_gap)?;
    let sep = check_separation(alpha, beta, tol_sep)?;
    let scale = discount_inverse(gamma_a, horizon) * cost_gap / sep;
    let pi0 = utility.inverse(-alpha * scale)?;
    let pi1 = utility.inverse((T::one() - alpha) * scale)?;
    Ok((pi0, pi1))
}

/// Payments under `pi_0 >= 0`: `pi_0 = 0` and the incentive constraint binds.
pub fn limited_liability_payments<T: Real>(
    horizon: usize,
    alpha: T,
    beta: T,
    cost_gap: T,
    gamma_a: T,
    utility: &UtilityFunction<T>,
) -> Result<(T, T)> {
    limited_payments_with(
        horizon,
        alpha,
        beta,
        cost_gap,
        gamma_a,
        utility,
        lit(TOL_SEP),
    )
}

fn limited_payments_with<T: Real>(
    horizon: usize,
    alpha: T,
    beta: T,
    cost_gap: T,
    gamma_a: T,
    utility: &UtilityFunction<T>,
    tol_sep: T,
) -> Result<(T, T)> {
    check_gap(cost_gap)?;
    let sep = check_separation(alpha, beta, tol_sep)?;
    let pi1 = utility.inverse(discount_inverse(gamma_a, horizon) * cost_gap / sep)?;
    Ok((T::zero(), pi1))
}

/// `J^P_1 + gamma_p^T (pi_0 (1 - beta) + pi_1 beta)`.
pub fn principal_objective<T: Real>(
    horizon: usize,
    pi0: T,
    pi1: T,
    beta: T,
    gamma_p: T,
    j1p: T,
) -> T {
    j1p + discount(gamma_p, horizon) * (pi0 * (T::one() - beta) + pi1 * beta)
}

/// Economic inputs of the inner search that do not change with `T`.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdProblem<T: Real> {
    pub cost_gap: T,
    pub gamma_a: T,
    pub gamma_p: T,
    pub j1p: T,
    pub utility: UtilityFunction<T>,
    pub settings: SearchSettings<T>,
}

impl<T: Real> ThresholdProblem<T> {
    fn payments(&self, horizon: usize, alpha: T, beta: T) -> Result<(T, T)> {
        let s = &self.settings;
        match s.liability {
            LiabilityMode::Limited => limited_payments_with(
                horizon,
                alpha,
                beta,
                self.cost_gap,
                self.gamma_a,
                &self.utility,
                s.tol_sep,
            ),
            LiabilityMode::General => optimal_payments_with(
                horizon,
                alpha,
                beta,
                self.cost_gap,
                self.gamma_a,
                &self.utility,
                s.tol_sep,
            ),
        }
    }

    /// Contract at `(T, eta)` given its `(alpha, beta)`; `None` when infeasible.
    fn evaluate(&self, horizon: usize, eta: T, alpha: T, beta: T) -> Result<Option<SweepRow<T>>> {
        match self.payments(horizon, alpha, beta) {
            Ok((pi0, pi1)) => Ok(Some(SweepRow {
                t: horizon,
                eta_opt: eta,
                alpha,
                beta,
                pi0,
                pi1,
                cost: principal_objective(horizon, pi0, pi1, beta, self.gamma_p, self.j1p),
            })),
            Err(e) if e.is_infeasible() => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// `(eta, alpha, beta)` on the uniform grid over the union of both laws' brackets.
#[derive(Debug, Clone)]
pub struct EtaProfile<T: Real> {
    pub etas: Vec<T>,
    pub alphas: Vec<T>,
    pub betas: Vec<T>,
    batch0: SurvivalBatch<T>,
    batch1: SurvivalBatch<T>,
}

impl<T: Real> EtaProfile<T> {
    pub fn new(
        law0: &GChi2Law<T>,
        law1: &GChi2Law<T>,
        grid_size: usize,
        tol_cdf: T,
    ) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::invalid("eta_grid_size", "must be at least 2"));
        }
        let (lo0, hi0) = quantile_bracket(law0)?;
        let (lo1, hi1) = quantile_bracket(law1)?;
        let lo = lo0.min(lo1);
        let hi = hi0.max(hi1);
        let step = (hi - lo) / lit::<T>((grid_size - 1) as f64);
        let etas: Vec<T> = (0..grid_size)
            .map(|i| {
                if i + 1 == grid_size {
                    hi
                } else {
                    lo + step * lit::<T>(i as f64)
                }
            })
            .collect();
        let batch0 = SurvivalBatch::new(law0, &etas, tol_cdf)?;
        let batch1 = SurvivalBatch::new(law1, &etas, tol_cdf)?;
        let alphas = batch0.survival_all(&etas)?;
        let betas = batch1.survival_all(&etas)?;
        Ok(Self {
            etas,
            alphas,
            betas,
            batch0,
            batch1,
        })
    }

    /// `(alpha, beta)` at an arbitrary threshold, reusing the cached meshes.
    pub fn at(&self, eta: T) -> Result<(T, T)> {
        Ok((self.batch0.survival(eta)?, self.batch1.survival(eta)?))
    }
}

/// Best `eta` for one horizon: grid scan, then golden-section refinement in
/// the cell around the best grid point. Ties go to the smallest `eta`.
pub fn threshold_search<T: Real>(
    horizon: usize,
    law0: &GChi2Law<T>,
    law1: &GChi2Law<T>,
    problem: &ThresholdProblem<T>,
) -> Result<SweepRow<T>> {
    let profile = EtaProfile::new(
        law0,
        law1,
        problem.settings.eta_grid_size,
        problem.settings.tol_cdf,
    )?;
    search_profile(horizon, &profile, problem)
}

pub(crate) fn search_profile<T: Real>(
    horizon: usize,
    profile: &EtaProfile<T>,
    problem: &ThresholdProblem<T>,
) -> Result<SweepRow<T>> {
    let mut best: Option<(usize, SweepRow<T>)> = None;
    for (i, eta) in profile.etas.iter().enumerate() {
        if let Some(row) = problem.evaluate(horizon, *eta, profile.alphas[i], profile.betas[i])? {
            if best.as_ref().is_none_or(|(_, b)| row.cost < b.cost) {
                best = Some((i, row));
            }
        }
    }
    let Some((i, grid_best)) = best else {
        return Err(Error::NoFeasibleThreshold(horizon));
    };
    let last = profile.etas.len() - 1;
    let a = profile.etas[i.saturating_sub(1)];
    let b = profile.etas[(i + 1).min(last)];
    let refined = golden_section(a, b, |eta| {
        let (alpha, beta) = profile.at(eta)?;
        problem.evaluate(horizon, eta, alpha, beta)
    })?;
    Ok(match refined {
        Some(row) if row.cost < grid_best.cost => row,
        _ => grid_best,
    })
}

/// Minimizes `f` on `[a, b]`; infeasible points count as `+inf`.
fn golden_section<T: Real, F>(mut a: T, mut b: T, mut f: F) -> Result<Option<SweepRow<T>>>
where
    F: FnMut(T) -> Result<Option<SweepRow<T>>>,
{
    let inv_phi = lit::<T>((5f64.sqrt() - 1.0) / 2.0);
    let cost = |r: &Option<SweepRow<T>>| r.map(|r| r.cost).unwrap_or_else(T::max_value_or_inf);
    let mut c = b - (b - a) * inv_phi;
    let mut d = a + (b - a) * inv_phi;
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut best = if cost(&fc) <= cost(&fd) { fc } else { fd };
    for _ in 0..GOLDEN_ITERATIONS {
        if !(b - a > T::default_epsilon() * (a.abs() + b.abs()).max(T::one())) {
            break;
        }
        if cost(&fc) <= cost(&fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * inv_phi;
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * inv_phi;
            fd = f(d)?;
        }
        for cand in [fc, fd] {
            if cost(&cand) < cost(&best) {
                best = cand;
            }
        }
    }
    Ok(best)
}

trait MaxOrInf {
    fn max_value_or_inf() -> Self;
}

impl<T: Real> MaxOrInf for T {
    fn max_value_or_inf() -> Self {
        T::max_value().unwrap_or_else(|| lit(f64::MAX))
    }
}

/// Runs the nested search over `T = 1..=T_max` and picks the cheapest horizon
/// (ties to the smallest `T`).
pub fn design_contract<T: Real>(config: &DesignConfig<T>) -> Result<ContractSolution<T>> {
    design_contract_with(config, |_| {})
}

/// [`design_contract`] with a callback after each horizon (progress reporting).
pub fn design_contract_with<T: Real, F: FnMut(usize)>(
    config: &DesignConfig<T>,
    mut progress: F,
) -> Result<ContractSolution<T>> {
    config.validate()?;
    let sys = &config.system;
    let t_max = config.search.t_max;
    let cost_gap = agent_cost_gap(sys, &config.low, &config.high, &config.agent)?;
    let (j0p, j1p) = principal_costs(sys, &config.low, &config.high, &config.principal)?;
    let problem = ThresholdProblem {
        cost_gap,
        gamma_a: config.agent.discount,
        gamma_p: config.principal.discount,
        j1p,
        utility: config.utility,
        settings: config.search,
    };
    let d0 = stacked_distribution(sys, &config.low, t_max, Hypothesis::H0)?;
    let d1 = stacked_distribution(sys, &config.high, t_max, Hypothesis::H1)?;
    let nested = NestedLlr::new(&d0, &d1)?;
    let mut sweep = Vec::with_capacity(t_max);
    for horizon in 1..=t_max {
        progress(horizon);
        if !distinguishable(&d0.leading(horizon)?, &d1.leading(horizon)?)? {
            continue;
        }
        let (law0, law1) = nested.laws(horizon)?;
        match threshold_search(horizon, &law0, &law1, &problem) {
            Ok(row) => sweep.push(row),
            Err(e) if e.is_infeasible() => {}
            Err(e) => return Err(e),
        }
    }
    let best = sweep
        .iter()
        .copied()
        .reduce(|best, row| if row.cost < best.cost { row } else { best })
        .ok_or(Error::NoFeasibleContract(t_max))?;
    Ok(ContractSolution {
        t_star: best.t,
        eta_star: best.eta_opt,
        pi0: best.pi0,
        pi1: best.pi1,
        alpha: best.alpha,
        beta: best.beta,
        expected_cost: best.cost,
        liability_mode: config.search.liability,
        cost_gap,
        gamma_a: config.agent.discount,
        gamma_p: config.principal.discount,
        j0p,
        j1p,
        sweep,
    })
}

/// Slack of the incentive constraint `beta - Delta - alpha` and of the
/// participation constraint `beta - Delta + U(pi_0) / (U(pi_1) - U(pi_0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport<T> {
    pub delta: T,
    pub ic_slack: T,
    pub participation_slack: T,
    pub satisfied: bool,
}

/// Constraint slacks of a contract `(T, alpha, beta, pi_0, pi_1)`. Never fails:
/// undefined quantities are reported as NaN and marked unsatisfied.
#[allow(clippy::too_many_arguments)]
pub fn constraint_slacks<T: Real>(
    horizon: usize,
    alpha: T,
    beta: T,
    pi0: T,
    pi1: T,
    cost_gap: T,
    gamma_a: T,
    utility: &UtilityFunction<T>,
) -> ConstraintReport<T> {
    let nan = || ConstraintReport {
        delta: T::NAN,
        ic_slack: T::NAN,
        participation_slack: T::NAN,
        satisfied: false,
    };
    let (Ok(u0), Ok(u1)) = (utility.value(pi0), utility.value(pi1)) else {
        return nan();
    };
    let Ok(delta) = delta_constant(horizon, cost_gap, gamma_a, u0, u1) else {
        return nan();
    };
    let ic_slack = beta - delta - alpha;
    let participation_slack = beta - delta + u0 / (u1 - u0);
    let floor = -lit::<T>(TOL_CONSTRAINT);
    ConstraintReport {
        delta,
        ic_slack,
        participation_slack,
        satisfied: ic_slack >= floor && participation_slack >= floor,
    }
}

/// Constraint slacks at the optimum.
pub fn verify_constraints<T: Real>(
    sol: &ContractSolution<T>,
    cost_gap: T,
    gamma_a: T,
    utility: &UtilityFunction<T>,
) -> ConstraintReport<T> {
    constraint_slacks(
        sol.t_star, sol.alpha, sol.beta, sol.pi0, sol.pi1, cost_gap, gamma_a, utility,
    )
}

/// Whether inducing high effort beats accepting low effort for free:
/// `J^P_1 + gamma_p^T* (pi_0 (1 - beta) + pi_1 beta) <= J^P_0`.
pub fn induce_effort<T: Real>(sol: &ContractSolution<T>, j0p: T, j1p: T) -> bool {
    principal_objective(sol.t_star, sol.pi0, sol.pi1, sol.beta, sol.gamma_p, j1p) <= j0p
}
