//! Monte Carlo cross-checks of the analytic quantities.
//!
//! Every estimator draws from [`Streams`]: one ChaCha stream per
//! `(controller, replicate)` derived from a master seed, so results do not
//! depend on evaluation order and H0/H1 batches never share noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::designer::{ContractSolution, DesignConfig};
use crate::error::{Error, Result};
use crate::llr::LlrStatistic;
use crate::scalar::{lit, psd_sqrt, to_f64, CompensatedSum, Real};
use crate::system::{
    agent_cost_gap, closed_loop_matrix, AgentCostSpec, Effort, FeedbackController, LtiSystem,
    TOL_PSD,
};
use crate::trajectory::{stacked_distribution, Hypothesis};

/// Smallest sample size accepted by the probability estimators.
pub const MIN_SAMPLES: usize = 1000;
pub const DEFAULT_SAMPLES: usize = 100_000;

/// Independent random streams split from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Stream for one replicate under one controller.
    pub fn rng(&self, effort: Effort, replicate: u64) -> ChaCha8Rng {
        let tag = match effort {
            Effort::Low => 0u64,
            Effort::High => 1u64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((tag << 62) | (replicate & ((1 << 62) - 1)));
        rng
    }

    /// Stream outside the controller-indexed family (for law sampling).
    pub fn auxiliary(&self, replicate: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((2u64 << 62) | (replicate & ((1 << 62) - 1)));
        rng
    }
}

fn normal_vector<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<T> {
    DVector::from_fn(n, |_, _| lit::<T>(StandardNormal.sample(rng)))
}

/// Closed loop with noise factors precomputed.
#[derive(Debug, Clone)]
pub struct Simulator<T: Real> {
    a_cl: DMatrix<T>,
    k: DMatrix<T>,
    c: DMatrix<T>,
    mu_w: DVector<T>,
    mu_0: DVector<T>,
    root_w: DMatrix<T>,
    root_e: DMatrix<T>,
    root_0: DMatrix<T>,
}

/// One simulated run: states `x_0..x_T`, inputs `u_0..u_(T-1)`, outputs `y_1..y_T` stacked.
#[derive(Debug, Clone)]
pub struct SimulatedPath<T: Real> {
    pub states: Vec<DVector<T>>,
    pub inputs: Vec<DVector<T>>,
    pub outputs: DVector<T>,
}

impl<T: Real> Simulator<T> {
    pub fn new(sys: &LtiSystem<T>, ctrl: &FeedbackController<T>) -> Result<Self> {
        let tol = lit::<T>(TOL_PSD);
        Ok(Self {
            a_cl: closed_loop_matrix(sys, ctrl)?,
            k: ctrl.gain.clone(),
            c: sys.c().clone(),
            mu_w: sys.mu_w().clone(),
            mu_0: sys.mu_0().clone(),
            root_w: psd_sqrt(sys.sigma_w(), tol, "Sigma_w")?,
            root_e: psd_sqrt(sys.sigma_e(), tol, "Sigma_e")?,
            root_0: psd_sqrt(sys.sigma_0(), tol, "Sigma_0")?,
        })
    }

    /// Forward simulation over `horizon` steps.
    pub fn path<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> SimulatedPath<T> {
        let (n, p) = (self.a_cl.nrows(), self.c.nrows());
        let mut x = &self.mu_0 + &self.root_0 * normal_vector::<T, R>(rng, n);
        let mut states = Vec::with_capacity(horizon + 1);
        let mut inputs = Vec::with_capacity(horizon);
        let mut outputs = DVector::zeros(horizon * p);
        for t in 0..horizon {
            inputs.push(&self.k * &x);
            let w = &self.mu_w + &self.root_w * normal_vector::<T, R>(rng, n);
            let next = &self.a_cl * &x + w;
            states.push(std::mem::replace(&mut x, next));
            let y = &self.c * &x + &self.root_e * normal_vector::<T, R>(rng, p);
            outputs.rows_mut(t * p, p).copy_from(&y);
        }
        states.push(x);
        SimulatedPath {
            states,
            inputs,
            outputs,
        }
    }

    /// Stacked outputs `(y_1, ..., y_T)` only.
    pub fn outputs<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> DVector<T> {
        self.path(horizon, rng).outputs
    }
}

/// One draw of `Y_T` under `ctrl`.
pub fn simulate_trajectory<T: Real, R: Rng + ?Sized>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    horizon: usize,
    rng: &mut R,
) -> Result<DVector<T>> {
    if horizon == 0 {
        return Err(Error::invalid("T", "horizon must be at least 1"));
    }
    Ok(Simulator::new(sys, ctrl)?.outputs(horizon, rng))
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mut s = CompensatedSum::default();
        xs.iter().for_each(|x| s.add(*x));
        let mean = s.value() / n;
        let mut v = CompensatedSum::default();
        xs.iter().for_each(|x| v.add((x - mean) * (x - mean)));
        let var = if xs.len() > 1 {
            v.value() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }

    /// Binomial proportion `hits / n`.
    pub fn proportion(hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self {
            mean: p,
            stderr: (p * (1.0 - p) / n as f64).sqrt(),
        }
    }

    /// `|mean - value| <= k * stderr`, with a floor of `eps` on the band.
    pub fn agrees(&self, value: f64, k: f64, eps: f64) -> bool {
        (self.mean - value).abs() <= (k * self.stderr).max(eps)
    }
}

/// `n` LLR values of trajectories simulated under `ctrl`, replicate `i` on
/// stream `(ctrl.effort, first + i)`.
pub fn simulate_llr<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    stat: &LlrStatistic<T>,
    horizon: usize,
    n: usize,
    streams: &Streams,
) -> Result<Vec<T>> {
    let sim = Simulator::new(sys, ctrl)?;
    (0..n)
        .map(|i| {
            let mut rng = streams.rng(ctrl.effort, i as u64);
            stat.evaluate(&sim.outputs(horizon, &mut rng))
        })
        .collect()
}

/// Empirical `(alpha, beta)` of the region `{L >= eta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalAlphaBeta {
    pub alpha: Estimate,
    pub beta: Estimate,
}

pub fn empirical_alpha_beta<T: Real>(
    sys: &LtiSystem<T>,
    k0: &FeedbackController<T>,
    k1: &FeedbackController<T>,
    eta: T,
    horizon: usize,
    n: usize,
    streams: &Streams,
) -> Result<EmpiricalAlphaBeta> {
    if n < MIN_SAMPLES {
        return Err(Error::invalid(
            "n",
            format!("need at least {MIN_SAMPLES} samples, got {n}"),
        ));
    }
    let d0 = stacked_distribution(sys, k0, horizon, Hypothesis::H0)?;
    let d1 = stacked_distribution(sys, k1, horizon, Hypothesis::H1)?;
    let stat = LlrStatistic::new(&d0, &d1)?;
    let count = |ctrl: &FeedbackController<T>| -> Result<usize> {
        Ok(simulate_llr(sys, ctrl, &stat, horizon, n, streams)?
            .iter()
            .filter(|l| **l >= eta)
            .count())
    };
    Ok(EmpiricalAlphaBeta {
        alpha: Estimate::proportion(count(k0)?, n),
        beta: Estimate::proportion(count(k1)?, n),
    })
}

/// Sample of `sum_{t < horizon} gamma^t (x_t' W x_t + v' x_t)` under `ctrl`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_discounted_cost<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    weight: &DMatrix<T>,
    linear: &DVector<T>,
    gamma: T,
    horizon: usize,
    n: usize,
    streams: &Streams,
) -> Result<Estimate> {
    let sim = Simulator::new(sys, ctrl)?;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let mut rng = streams.rng(ctrl.effort, i as u64);
            let path = sim.path(horizon, &mut rng);
            let mut s = CompensatedSum::default();
            let mut g = T::one();
            for x in &path.states[..horizon] {
                s.add(g * ((weight * x).dot(x) + linear.dot(x)));
                g *= gamma;
            }
            to_f64(s.value())
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// Sample of the truncated discounted control cost `sum gamma_a^t (u'Ru + r'u)`.
fn control_cost_samples<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    spec: &AgentCostSpec<T>,
    horizon: usize,
    n: usize,
    streams: &Streams,
    stream_tag: Effort,
) -> Result<Vec<f64>> {
    let sim = Simulator::new(sys, ctrl)?;
    Ok((0..n)
        .map(|i| {
            let mut rng = streams.rng(stream_tag, i as u64);
            let path = sim.path(horizon, &mut rng);
            let mut s = CompensatedSum::default();
            let mut g = T::one();
            for u in &path.inputs {
                s.add(g * ((&spec.control_weight * u).dot(u) + spec.control_linear.dot(u)));
                g *= spec.discount;
            }
            to_f64(s.value())
        })
        .collect())
}

/// `J^A_1 - J^A_0` estimated from truncated sample paths. The horizon should
/// make the neglected tail small against the standard error.
pub fn empirical_cost_gap<T: Real>(
    sys: &LtiSystem<T>,
    k0: &FeedbackController<T>,
    k1: &FeedbackController<T>,
    spec: &AgentCostSpec<T>,
    horizon: usize,
    n: usize,
    streams: &Streams,
) -> Result<Estimate> {
    let c0 = Estimate::from_samples(&control_cost_samples(
        sys,
        k0,
        spec,
        horizon,
        n,
        streams,
        Effort::Low,
    )?);
    let c1 = Estimate::from_samples(&control_cost_samples(
        sys,
        k1,
        spec,
        horizon,
        n,
        streams,
        Effort::High,
    )?);
    Ok(Estimate {
        mean: c1.mean - c0.mean,
        stderr: c0.stderr.hypot(c1.stderr),
    })
}

/// Outcome of letting the agent face a contract under both controllers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcReport {
    /// Empirical `alpha`, `beta` of the contract's payment region.
    pub alpha: Estimate,
    pub beta: Estimate,
    /// `(J^A_1 - gamma_a^T E_1[U(pi)]) - (J^A_0 - gamma_a^T E_0[U(pi)])` with its standard error.
    pub high_minus_low: Estimate,
    /// High effort is weakly cheaper for the agent within three standard errors.
    pub passes: bool,
}

/// Estimates the agent's total cost under each controller when paid by `solution`.
pub fn ic_experiment<T: Real>(
    config: &DesignConfig<T>,
    solution: &ContractSolution<T>,
    n: usize,
    streams: &Streams,
) -> Result<IcReport> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let sys = &config.system;
    let horizon = solution.t_star;
    let gap = to_f64(agent_cost_gap(
        sys,
        &config.low,
        &config.high,
        &config.agent,
    )?);
    let d0 = stacked_distribution(sys, &config.low, horizon, Hypothesis::H0)?;
    let d1 = stacked_distribution(sys, &config.high, horizon, Hypothesis::H1)?;
    let stat = LlrStatistic::new(&d0, &d1)?;
    let u0 = to_f64(config.utility.value(solution.pi0)?);
    let u1 = to_f64(config.utility.value(solution.pi1)?);
    let run = |ctrl: &FeedbackController<T>| -> Result<(Estimate, Estimate)> {
        let llr = simulate_llr(sys, ctrl, &stat, horizon, n, streams)?;
        let hits: Vec<bool> = llr.iter().map(|l| *l >= solution.eta_star).collect();
        let utilities: Vec<f64> = hits.iter().map(|h| if *h { u1 } else { u0 }).collect();
        let count = hits.iter().filter(|h| **h).count();
        Ok((
            Estimate::proportion(count, n),
            Estimate::from_samples(&utilities),
        ))
    };
    let (alpha, eu0) = run(&config.low)?;
    let (beta, eu1) = run(&config.high)?;
    let disc = to_f64(config.agent.discount).powi(horizon as i32);
    let diff = Estimate {
        mean: gap - disc * (eu1.mean - eu0.mean),
        stderr: disc * eu0.stderr.hypot(eu1.stderr),
    };
    Ok(IcReport {
        alpha,
        beta,
        high_minus_low: diff,
        passes: diff.mean <= 3.0 * diff.stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designer::{design_contract, LiabilityMode, SearchSettings};
    use crate::system::{discounted_agent_cost, PrincipalCostSpec, UtilityFunction};
    use crate::test_fixtures::{lfc_high, lfc_low, lfc_system, scalar_gain, scalar_system};
    use crate::trajectory::stacking_operators;

    #[test]
    fn noiseless_path_follows_the_mean() {
        let sys = lfc_system();
        let quiet = LtiSystem::new(
            sys.a().clone(),
            sys.b().clone(),
            sys.c().clone(),
            DVector::zeros(4),
            DMatrix::zeros(4, 4),
            DMatrix::zeros(4, 4),
            sys.mu_0().clone(),
            DMatrix::zeros(4, 4),
        )
        .unwrap();
        let y = simulate_trajectory(
            &quiet,
            &lfc_high(),
            5,
            &mut Streams::new(1).rng(Effort::High, 0),
        )
        .unwrap();
        let (_, v) = stacking_operators(&quiet, &lfc_high(), 5).unwrap();
        assert!((y - v * quiet.mu_0()).amax() < 1e-15);
    }

    #[test]
    fn scalar_noiseless_path() {
        let sys = scalar_system(0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let y = simulate_trajectory(
            &sys,
            &scalar_gain(0.0, Effort::Low),
            2,
            &mut Streams::new(0).rng(Effort::Low, 0),
        )
        .unwrap();
        assert_eq!(y.as_slice(), &[0.5, 0.25]);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = Streams::new(42);
        let sys = lfc_system();
        let a = simulate_trajectory(&sys, &lfc_low(), 3, &mut s.rng(Effort::Low, 7)).unwrap();
        let b = simulate_trajectory(&sys, &lfc_low(), 3, &mut s.rng(Effort::Low, 7)).unwrap();
        let c = simulate_trajectory(&sys, &lfc_low(), 3, &mut s.rng(Effort::High, 7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_region_has_unit_probabilities() {
        let sys = lfc_system();
        let est = empirical_alpha_beta(
            &sys,
            &lfc_low(),
            &lfc_high(),
            f64::NEG_INFINITY,
            2,
            1000,
            &Streams::new(3),
        )
        .unwrap();
        assert_eq!((est.alpha.mean, est.beta.mean), (1.0, 1.0));
        assert!(
            empirical_alpha_beta(&sys, &lfc_low(), &lfc_high(), 0.0, 2, 10, &Streams::new(3))
                .is_err()
        );
    }

    #[test]
    fn equal_controllers_have_no_gap() {
        let sys = lfc_system();
        let spec =
            AgentCostSpec::new(DMatrix::identity(1, 1), DVector::zeros(1), 0.9, None).unwrap();
        let est = empirical_cost_gap(
            &sys,
            &lfc_high(),
            &lfc_high(),
            &spec,
            100,
            4000,
            &Streams::new(9),
        )
        .unwrap();
        assert!(est.agrees(0.0, 3.0, 0.0), "{est:?}");
    }

    #[test]
    fn geometric_cost_gap() {
        // x_t ~ N(0, 1) for t >= 1 under a_cl = 0; u = x under k = 1, u = 0 under k = 0
        let sys = scalar_system(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        let spec =
            AgentCostSpec::new(DMatrix::identity(1, 1), DVector::zeros(1), 0.5, None).unwrap();
        let est = empirical_cost_gap(
            &sys,
            &scalar_gain(0.0, Effort::Low),
            &scalar_gain(1.0, Effort::High),
            &spec,
            60,
            20_000,
            &Streams::new(2),
        )
        .unwrap();
        assert!(est.agrees(1.0, 3.0, 0.0), "{est:?}");
    }

    #[test]
    fn lfc_cost_gap_matches_analytic() {
        let sys = lfc_system();
        let spec = AgentCostSpec::new(
            DMatrix::identity(1, 1),
            DVector::from_element(1, 0.05),
            0.9,
            None,
        )
        .unwrap();
        let analytic = discounted_agent_cost(&sys, &lfc_high(), &spec).unwrap()
            - discounted_agent_cost(&sys, &lfc_low(), &spec).unwrap();
        let est = empirical_cost_gap(
            &sys,
            &lfc_low(),
            &lfc_high(),
            &spec,
            300,
            20_000,
            &Streams::new(4),
        )
        .unwrap();
        assert!(est.agrees(analytic, 3.0, 0.0), "{est:?} vs {analytic}");
    }

    fn small_lfc_config() -> DesignConfig<f64> {
        DesignConfig {
            system: lfc_system(),
            low: lfc_low(),
            high: lfc_high(),
            agent: AgentCostSpec::with_gap(1, 0.995, 0.1).unwrap(),
            principal: PrincipalCostSpec::discount_only(4, 0.998).unwrap(),
            utility: UtilityFunction::Sqrt,
            search: SearchSettings::new(4, LiabilityMode::Limited),
        }
    }

    #[test]
    fn ic_experiments() {
        let config = small_lfc_config();
        let sol = design_contract(&config).unwrap();
        let streams = Streams::new(17);
        let bound = ic_experiment(&config, &sol, 20_000, &streams).unwrap();
        assert!(bound.passes, "{bound:?}");
        assert!(bound.high_minus_low.agrees(0.0, 4.0, 0.0), "{bound:?}");

        let unpaid = ContractSolution {
            pi0: 0.0,
            pi1: 0.0,
            ..sol.clone()
        };
        let r = ic_experiment(&config, &unpaid, 5_000, &streams).unwrap();
        assert!(!r.passes);
        assert!((r.high_minus_low.mean - 0.1).abs() < 1e-12);

        let doubled = ContractSolution {
            pi1: 2.0 * sol.pi1,
            ..sol
        };
        let r = ic_experiment(&config, &doubled, 20_000, &streams).unwrap();
        assert!(
            r.passes && r.high_minus_low.mean < -3.0 * r.high_minus_low.stderr,
            "{r:?}"
        );
    }
}
