//! Optimal two-level incentive contracts for moral hazard over stochastic
//! discrete-time LTI systems.
//!
//! A principal observes noisy outputs `Y_T = (y_1, ..., y_T)` of a plant run by
//! an agent who privately picks a low- or high-effort state-feedback
//! controller. The optimal contract pays `pi_1` when the log-likelihood ratio
//! of `Y_T` clears a threshold `eta` and `pi_0` otherwise. This crate
//!
//! * builds the exact Gaussian law of `Y_T` under each controller ([`trajectory`]),
//! * reduces the LLR to a generalized chi-squared law under each hypothesis ([`llr`]),
//! * evaluates its tails by Imhof inversion ([`gchi2`]),
//! * searches horizons and thresholds for the cheapest incentive-compatible
//!   contract ([`designer`]),
//! * and checks all of it by simulation ([`oracle`]).
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod designer;
pub mod error;
pub mod gchi2;
pub mod llr;
pub mod oracle;
pub mod scalar;
pub mod system;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Real;

pub use designer::{
    delta_constant, design_contract, induce_effort, limited_liability_payments, optimal_payments,
    principal_objective, threshold_search, verify_constraints, ConstraintReport, LiabilityMode,
    SearchSettings, SweepRow,
};
pub use gchi2::{alpha_beta, quantile_bracket, survival};
pub use llr::{decompose, law_mean, llr_value, Hypothesis};
pub use system::{
    agent_cost_gap, closed_loop_matrix, discounted_agent_cost, discounted_principal_cost,
    propagate_moments, spectral_radius, Effort, UtilityFunction,
};
pub use trajectory::{distinguishable, stacked_distribution, stacking_operators};

pub type LtiSystemF64 = system::LtiSystem<f64>;
pub type FeedbackControllerF64 = system::FeedbackController<f64>;
pub type AgentCostSpecF64 = system::AgentCostSpec<f64>;
pub type PrincipalCostSpecF64 = system::PrincipalCostSpec<f64>;
pub type StackedGaussianF64 = trajectory::StackedGaussian<f64>;
pub type GChi2LawF64 = llr::GChi2Law<f64>;
pub type ContractSolutionF64 = designer::ContractSolution<f64>;
pub type DesignConfigF64 = designer::DesignConfig<f64>;

#[cfg(test)]
pub(crate) mod test_fixtures {
    use nalgebra::{DMatrix, DVector};

    use crate::system::{Effort, FeedbackController, LtiSystem};

    pub fn lfc_system() -> LtiSystem<f64> {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.287, 0.0, 0.0, 0.0, //
                0.156, 0.717, 0.0, 0.0, //
                0.061, 0.509, 0.995, 0.0, //
                0.002, 0.027, 0.100, 1.0,
            ],
        );
        let b = DMatrix::from_column_slice(4, 1, &[0.713, 0.127, 0.029, 0.001]);
        LtiSystem::new(
            a,
            b,
            DMatrix::identity(4, 4),
            DVector::zeros(4),
            DMatrix::identity(4, 4) * 0.01,
            DMatrix::identity(4, 4) * 0.01,
            DVector::from_vec(vec![0.0, 0.0, 0.1, 0.0]),
            DMatrix::identity(4, 4) * 1e-9,
        )
        .unwrap()
    }

    pub fn lfc_low() -> FeedbackController<f64> {
        FeedbackController::new(
            DMatrix::from_row_slice(1, 4, &[0.0, 0.0002, -0.0856, -0.0139]),
            Effort::Low,
        )
    }

    pub fn lfc_high() -> FeedbackController<f64> {
        FeedbackController::new(
            DMatrix::from_row_slice(1, 4, &[0.0, -2.2033, -0.6932, -0.0556]),
            Effort::High,
        )
    }

    /// One-dimensional plant from scalar parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar_system(
        a: f64,
        b: f64,
        c: f64,
        mu_w: f64,
        sigma_w: f64,
        sigma_e: f64,
        mu_0: f64,
        sigma_0: f64,
    ) -> LtiSystem<f64> {
        let m = |x| DMatrix::from_element(1, 1, x);
        let v = |x| DVector::from_element(1, x);
        LtiSystem::new(
            m(a),
            m(b),
            m(c),
            v(mu_w),
            m(sigma_w),
            m(sigma_e),
            v(mu_0),
            m(sigma_0),
        )
        .unwrap()
    }

    pub fn scalar_gain(k: f64, effort: Effort) -> FeedbackController<f64> {
        FeedbackController::new(DMatrix::from_element(1, 1, k), effort)
    }
}
