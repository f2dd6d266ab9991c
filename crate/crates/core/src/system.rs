//! Plant, controllers, cost specifications and the agent's utility.

use nalgebra::{DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, min_eigenvalue, symmetrize, to_f64, Real};

/// Smallest admissible eigenvalue of a covariance, as `-TOL_PSD`.
pub const TOL_PSD: f64 = 1e-9;
/// Absolute (or relative, above 1) tolerance on the truncated discounted series.
pub const TOL_SERIES: f64 = 1e-10;

const MAX_SERIES_TERMS: usize = 50_000_000;

/// Discrete-time affine LTI plant
/// `x_{k+1} = A x_k + B u_k + w_k`, `y_k = C x_k + e_k`
/// with `w_k ~ N(mu_w, Sigma_w)`, `e_k ~ N(0, Sigma_e)`, `x_0 ~ N(mu_0, Sigma_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem<T: Real> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    c: DMatrix<T>,
    mu_w: DVector<T>,
    sigma_w: DMatrix<T>,
    sigma_e: DMatrix<T>,
    mu_0: DVector<T>,
    sigma_0: DMatrix<T>,
}

fn check_shape<T: Real>(m: &DMatrix<T>, rows: usize, cols: usize, name: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_len<T: Real>(v: &DVector<T>, len: usize, name: &str) -> Result<()> {
    if v.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "{name} has length {}, expected {len}",
            v.len()
        )));
    }
    Ok(())
}

fn checked_covariance<T: Real>(s: &DMatrix<T>, what: &'static str) -> Result<DMatrix<T>> {
    let sym = symmetrize(s);
    let min = min_eigenvalue(&sym)?;
    if min < -lit::<T>(TOL_PSD) {
        return Err(Error::NotPsd {
            what,
            min_eig: to_f64(min),
        });
    }
    Ok(sym)
}

impl<T: Real> LtiSystem<T> {
    /// Validates dimensions and covariances; covariances are stored symmetrized.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<T>,
        b: DMatrix<T>,
        c: DMatrix<T>,
        mu_w: DVector<T>,
        sigma_w: DMatrix<T>,
        sigma_e: DMatrix<T>,
        mu_0: DVector<T>,
        sigma_0: DMatrix<T>,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::DimensionMismatch("A must be non-empty".into()));
        }
        check_shape(&a, n, n, "A")?;
        let q = b.ncols();
        check_shape(&b, n, q, "B")?;
        let p = c.nrows();
        if p == 0 {
            return Err(Error::DimensionMismatch(
                "C must have at least one row".into(),
            ));
        }
        check_shape(&c, p, n, "C")?;
        check_len(&mu_w, n, "mu_w")?;
        check_shape(&sigma_w, n, n, "Sigma_w")?;
        check_shape(&sigma_e, p, p, "Sigma_e")?;
        check_len(&mu_0, n, "mu_0")?;
        check_shape(&sigma_0, n, n, "Sigma_0")?;
        let all_finite = a
            .iter()
            .chain(b.iter())
            .chain(c.iter())
            .chain(mu_w.iter())
            .chain(sigma_w.iter())
            .chain(sigma_e.iter())
            .chain(mu_0.iter())
            .chain(sigma_0.iter())
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::invalid("system", "entries must be finite"));
        }
        Ok(Self {
            sigma_w: checked_covariance(&sigma_w, "Sigma_w")?,
            sigma_e: checked_covariance(&sigma_e, "Sigma_e")?,
            sigma_0: checked_covariance(&sigma_0, "Sigma_0")?,
            a,
            b,
            c,
            mu_w,
            mu_0,
        })
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<T> {
        &self.c
    }
    pub fn mu_w(&self) -> &DVector<T> {
        &self.mu_w
    }
    pub fn sigma_w(&self) -> &DMatrix<T> {
        &self.sigma_w
    }
    pub fn sigma_e(&self) -> &DMatrix<T> {
        &self.sigma_e
    }
    pub fn mu_0(&self) -> &DVector<T> {
        &self.mu_0
    }
    pub fn sigma_0(&self) -> &DMatrix<T> {
        &self.sigma_0
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Output dimension.
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
    /// Input dimension.
    pub fn q(&self) -> usize {
        self.b.ncols()
    }
}

/// Which of the two controllers a gain represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effort {
    Low,
    High,
}

/// Linear state feedback `u = K x`, `K` is `q x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackController<T: Real> {
    pub gain: DMatrix<T>,
    pub effort: Effort,
}

impl<T: Real> FeedbackController<T> {
    pub fn new(gain: DMatrix<T>, effort: Effort) -> Self {
        Self { gain, effort }
    }

    pub fn check(&self, sys: &LtiSystem<T>) -> Result<()> {
        check_shape(&self.gain, sys.q(), sys.n(), "K")
    }
}

fn check_discount<T: Real>(gamma: T, field: &str) -> Result<()> {
    if !(gamma > T::zero() && gamma < T::one()) {
        return Err(Error::invalid(
            field,
            format!("must lie in (0, 1), got {gamma}"),
        ));
    }
    Ok(())
}

/// Agent's discounted control cost `sum gamma_a^t (u'Ru + r'u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentCostSpec<T: Real> {
    pub control_weight: DMatrix<T>,
    pub control_linear: DVector<T>,
    pub discount: T,
    /// When set, used directly as `J^A_1 - J^A_0`.
    pub cost_gap_override: Option<T>,
}

impl<T: Real> AgentCostSpec<T> {
    pub fn new(
        control_weight: DMatrix<T>,
        control_linear: DVector<T>,
        discount: T,
        cost_gap_override: Option<T>,
    ) -> Result<Self> {
        check_discount(discount, "gamma_a")?;
        let q = control_weight.nrows();
        check_shape(&control_weight, q, q, "R")?;
        check_len(&control_linear, q, "r")?;
        if let Some(gap) = cost_gap_override {
            if !(gap > T::zero()) || !gap.is_finite() {
                return Err(Error::invalid(
                    "cost_gap",
                    format!("must be positive, got {gap}"),
                ));
            }
        }
        Ok(Self {
            control_weight,
            control_linear,
            discount,
            cost_gap_override,
        })
    }

    /// Spec with zero weights and a fixed cost gap.
    pub fn with_gap(q: usize, discount: T, gap: T) -> Result<Self> {
        Self::new(DMatrix::zeros(q, q), DVector::zeros(q), discount, Some(gap))
    }
}

/// Principal's discounted state cost `sum gamma_p^t (x'Qx + q'x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalCostSpec<T: Real> {
    pub state_weight: DMatrix<T>,
    pub state_linear: DVector<T>,
    pub discount: T,
    /// `(J^P_0, J^P_1)` used in place of the computed costs.
    pub state_cost_override: Option<(T, T)>,
}

impl<T: Real> PrincipalCostSpec<T> {
    pub fn new(
        state_weight: DMatrix<T>,
        state_linear: DVector<T>,
        discount: T,
        state_cost_override: Option<(T, T)>,
    ) -> Result<Self> {
        check_discount(discount, "gamma_p")?;
        let n = state_weight.nrows();
        check_shape(&state_weight, n, n, "Q")?;
        check_len(&state_linear, n, "q")?;
        Ok(Self {
            state_weight,
            state_linear,
            discount,
            state_cost_override,
        })
    }

    /// No state cost configured: `J^P_0 = J^P_1 = 0`.
    pub fn discount_only(n: usize, discount: T) -> Result<Self> {
        Self::new(DMatrix::zeros(n, n), DVector::zeros(n), discount, None)
    }

    pub fn is_zero(&self) -> bool {
        self.state_weight.iter().all(|x| x.is_zero())
            && self.state_linear.iter().all(|x| x.is_zero())
    }
}

/// Agent's utility of a payment. All families satisfy `U(0) = 0`, `U' > 0`, `U'' < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum UtilityFunction<T> {
    /// `U(pi) = sqrt(pi)` on `pi >= 0`.
    Sqrt,
    /// `U(pi) = pi^rho`, `0 < rho < 1`, on `pi >= 0`.
    Power { rho: T },
    /// `U(pi) = (1 - exp(-a pi)) / a` on all reals; the only family that can fine the agent.
    Exponential { risk_aversion: T },
}

impl<T: Real> UtilityFunction<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UtilityFunction::Sqrt => Ok(()),
            UtilityFunction::Power { rho } => {
                if rho > T::zero() && rho < T::one() {
                    Ok(())
                } else {
                    Err(Error::invalid(
                        "rho",
                        format!("must lie in (0, 1), got {rho}"),
                    ))
                }
            }
            UtilityFunction::Exponential { risk_aversion } => {
                if risk_aversion > T::zero() && risk_aversion.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(
                        "risk_aversion",
                        format!("must be positive, got {risk_aversion}"),
                    ))
                }
            }
        }
    }

    /// Whether negative payments (fines) are in the domain.
    pub fn allows_fines(&self) -> bool {
        matches!(self, UtilityFunction::Exponential { .. })
    }

    pub fn value(&self, payment: T) -> Result<T> {
        match *self {
            UtilityFunction::Sqrt => {
                if payment < T::zero() {
                    return Err(Error::UtilityDomain(to_f64(payment)));
                }
                Ok(payment.sqrt())
            }
            UtilityFunction::Power { rho } => {
                if payment < T::zero() {
                    return Err(Error::UtilityDomain(to_f64(payment)));
                }
                if payment.is_zero() {
                    return Ok(T::zero());
                }
                Ok(payment.powf(rho))
            }
            UtilityFunction::Exponential { risk_aversion: a } => {
                // -expm1(-a pi) / a keeps full precision near zero
                Ok(-((-a * payment).exp_m1()) / a)
            }
        }
    }

    pub fn inverse(&self, utility: T) -> Result<T> {
        if !utility.is_finite() {
            return Err(Error::UtilityDomain(to_f64(utility)));
        }
        match *self {
            UtilityFunction::Sqrt => {
                if utility < T::zero() {
                    return Err(Error::UtilityDomain(to_f64(utility)));
                }
                Ok(utility * utility)
            }
            UtilityFunction::Power { rho } => {
                if utility < T::zero() {
                    return Err(Error::UtilityDomain(to_f64(utility)));
                }
                if utility.is_zero() {
                    return Ok(T::zero());
                }
                Ok(utility.powf(T::one() / rho))
            }
            UtilityFunction::Exponential { risk_aversion: a } => {
                // U < 1/a is the range
                if a * utility >= T::one() {
                    return Err(Error::UtilityDomain(to_f64(utility)));
                }
                Ok(-(-a * utility).ln_1p() / a)
            }
        }
    }
}

/// `A + B K`.
pub fn closed_loop_matrix<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
) -> Result<DMatrix<T>> {
    ctrl.check(sys)?;
    Ok(sys.a() + sys.b() * &ctrl.gain)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> Result<T> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "spectral radius of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(T::zero());
    }
    let schur =
        Schur::try_new(m.clone(), T::default_epsilon(), 10_000).ok_or(Error::EigenFailure)?;
    let eig = schur.complex_eigenvalues();
    Ok(eig
        .iter()
        .fold(T::zero(), |acc, z| acc.max(z.re.hypot(z.im))))
}

/// First and second moments of the closed-loop state: `m_t = E[x_t]` and
/// `P_t = E[x_t x_t']` (second moment, not covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct StateMoments<T: Real> {
    pub mean: DVector<T>,
    pub second: DMatrix<T>,
}

impl<T: Real> StateMoments<T> {
    fn initial(sys: &LtiSystem<T>) -> Self {
        Self {
            mean: sys.mu_0().clone(),
            second: sys.sigma_0() + sys.mu_0() * sys.mu_0().transpose(),
        }
    }

    fn step(&self, a_cl: &DMatrix<T>, sys: &LtiSystem<T>) -> Self {
        let mu_w = sys.mu_w();
        let am = a_cl * &self.mean;
        let cross = &am * mu_w.transpose();
        let second = a_cl * &self.second * a_cl.transpose()
            + &cross
            + cross.transpose()
            + mu_w * mu_w.transpose()
            + sys.sigma_w();
        Self {
            mean: am + mu_w,
            second: symmetrize(&second),
        }
    }

    /// `Cov(x_t) = P_t - m_t m_t'`.
    pub fn covariance(&self) -> DMatrix<T> {
        &self.second - &self.mean * self.mean.transpose()
    }
}

/// Moments for `t = 0..=horizon`.
pub fn propagate_moments<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    horizon: usize,
) -> Result<Vec<StateMoments<T>>> {
    let a_cl = closed_loop_matrix(sys, ctrl)?;
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(StateMoments::initial(sys));
    for t in 0..horizon {
        let next = out[t].step(&a_cl, sys);
        out.push(next);
    }
    Ok(out)
}

/// Discounted series value and the number of terms summed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesCost<T> {
    pub value: T,
    pub terms: usize,
}

/// Per-step cost `tr(W P_t) + v' m_t`.
fn step_cost<T: Real>(w: &DMatrix<T>, v: &DVector<T>, m: &StateMoments<T>) -> T {
    w.component_mul(&m.second).sum() + v.dot(&m.mean)
}

/// `sum_{t>=0} gamma^t (tr(W P_t) + v' m_t)` for the closed loop `a_cl`.
///
/// Summation stops once the geometric tail bound (per-step growth at most
/// `max(1, rho^2)`, padded halfway towards `1/gamma`) falls below
/// `TOL_SERIES`.
pub fn discounted_quadratic_cost<T: Real>(
    sys: &LtiSystem<T>,
    a_cl: &DMatrix<T>,
    weight: &DMatrix<T>,
    linear: &DVector<T>,
    gamma: T,
) -> Result<SeriesCost<T>> {
    check_discount(gamma, "gamma")?;
    if weight.iter().all(|x| x.is_zero()) && linear.iter().all(|x| x.is_zero()) {
        return Ok(SeriesCost {
            value: T::zero(),
            terms: 0,
        });
    }
    let rho = spectral_radius(a_cl)?;
    let growth = (rho * rho).max(T::one());
    if gamma * rho * rho >= T::one() {
        return Err(Error::Divergent(to_f64(gamma * rho * rho)));
    }
    let half = lit::<T>(0.5);
    let padded = growth + (T::one() / gamma - growth) * half;
    let ratio = gamma * padded;
    let tail_factor = ratio / (T::one() - ratio);
    let tol = lit::<T>(TOL_SERIES);

    const WINDOW: usize = 32;
    let mut recent = [T::zero(); WINDOW];
    let mut sum = crate::scalar::CompensatedSum::default();
    let mut moments = StateMoments::initial(sys);
    let mut discount = T::one();
    for t in 0..MAX_SERIES_TERMS {
        let c = step_cost(weight, linear, &moments);
        sum.add(discount * c);
        recent[t % WINDOW] = c.abs();
        if t >= WINDOW {
            let bound = recent.iter().fold(T::zero(), |m, &x| m.max(x));
            let tail = discount * bound * tail_factor;
            let total = sum.value();
            if tail <= tol {
                return Ok(SeriesCost {
                    value: total,
                    terms: t + 1,
                });
            }
        }
        moments = moments.step(a_cl, sys);
        discount *= gamma;
    }
    Err(Error::Divergent(to_f64(gamma * rho * rho)))
}

/// Same series, truncated after `terms` terms (`t = 0..terms`).
pub fn discounted_quadratic_cost_truncated<T: Real>(
    sys: &LtiSystem<T>,
    a_cl: &DMatrix<T>,
    weight: &DMatrix<T>,
    linear: &DVector<T>,
    gamma: T,
    terms: usize,
) -> T {
    let mut sum = crate::scalar::CompensatedSum::default();
    let mut moments = StateMoments::initial(sys);
    let mut discount = T::one();
    for _ in 0..terms {
        sum.add(discount * step_cost(weight, linear, &moments));
        moments = moments.step(a_cl, sys);
        discount *= gamma;
    }
    sum.value()
}

/// State-space form of the agent's cost: `W = K'RK`, `v = K'r`.
pub fn agent_cost_weights<T: Real>(
    ctrl: &FeedbackController<T>,
    spec: &AgentCostSpec<T>,
) -> Result<(DMatrix<T>, DVector<T>)> {
    let k = &ctrl.gain;
    if spec.control_weight.nrows() != k.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "R is {}x{}, controller has {} inputs",
            spec.control_weight.nrows(),
            spec.control_weight.ncols(),
            k.nrows()
        )));
    }
    let w = symmetrize(&(k.transpose() * &spec.control_weight * k));
    let v = k.transpose() * &spec.control_linear;
    Ok((w, v))
}

/// `J^A` for one controller.
pub fn discounted_agent_cost<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    spec: &AgentCostSpec<T>,
) -> Result<T> {
    let a_cl = closed_loop_matrix(sys, ctrl)?;
    let (w, v) = agent_cost_weights(ctrl, spec)?;
    Ok(discounted_quadratic_cost(sys, &a_cl, &w, &v, spec.discount)?.value)
}

/// `J^P` for one controller.
pub fn discounted_principal_cost<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    spec: &PrincipalCostSpec<T>,
) -> Result<T> {
    let a_cl = closed_loop_matrix(sys, ctrl)?;
    check_shape(&spec.state_weight, sys.n(), sys.n(), "Q")?;
    check_len(&spec.state_linear, sys.n(), "q")?;
    Ok(discounted_quadratic_cost(
        sys,
        &a_cl,
        &spec.state_weight,
        &spec.state_linear,
        spec.discount,
    )?
    .value)
}

/// `J^A_1 - J^A_0`; the override wins when present.
pub fn agent_cost_gap<T: Real>(
    sys: &LtiSystem<T>,
    low: &FeedbackController<T>,
    high: &FeedbackController<T>,
    spec: &AgentCostSpec<T>,
) -> Result<T> {
    let gap = match spec.cost_gap_override {
        Some(g) => g,
        None => discounted_agent_cost(sys, high, spec)? - discounted_agent_cost(sys, low, spec)?,
    };
    if !(gap > T::zero()) {
        return Err(Error::NonpositiveGap(to_f64(gap)));
    }
    Ok(gap)
}

/// `(J^P_0, J^P_1)`; the override wins when present.
pub fn principal_costs<T: Real>(
    sys: &LtiSystem<T>,
    low: &FeedbackController<T>,
    high: &FeedbackController<T>,
    spec: &PrincipalCostSpec<T>,
) -> Result<(T, T)> {
    if let Some(pair) = spec.state_cost_override {
        return Ok(pair);
    }
    Ok((
        discounted_principal_cost(sys, low, spec)?,
        discounted_principal_cost(sys, high, spec)?,
    ))
}
