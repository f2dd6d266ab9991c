use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use lti_incentive::app::{config_to_toml, parse_config};
use lti_incentive::designer::{DesignConfig, SearchSettings};
use lti_incentive::llr::GChi2Law;
use lti_incentive::system::{
    AgentCostSpec, Effort, FeedbackController, LtiSystem, PrincipalCostSpec,
};
use lti_incentive::trajectory::{stacked_distribution, Hypothesis};
use lti_incentive::{alpha_beta, decompose, survival, LiabilityMode, UtilityFunction};

fn scalar(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

/// Scalar plant `x+ = a x + b u + w` under gains `k0`, `k1`.
fn scalar_pair(
    a: f64,
    b: f64,
    k0: f64,
    k1: f64,
    sw: f64,
    se: f64,
) -> (
    LtiSystem<f64>,
    FeedbackController<f64>,
    FeedbackController<f64>,
) {
    let sys = LtiSystem::new(
        scalar(a),
        scalar(b),
        scalar(1.0),
        DVector::from_element(1, 0.2),
        scalar(sw),
        scalar(se),
        DVector::from_element(1, 1.0),
        scalar(0.0),
    )
    .unwrap();
    (
        sys,
        FeedbackController::new(scalar(k0), Effort::Low),
        FeedbackController::new(scalar(k1), Effort::High),
    )
}

prop_compose! {
    fn stable_pair()(a in -0.9..0.9f64, b in 0.2..1.5f64, k0 in -0.3..0.3f64, dk in 0.1..0.5f64,
                     sw in 0.01..1.0f64, se in 0.01..1.0f64)
        -> (LtiSystem<f64>, FeedbackController<f64>, FeedbackController<f64>) {
        // Clamp both closed loops inside the unit circle.
        let k0 = k0.clamp((-0.95 - a) / b, (0.95 - a) / b);
        let k1 = (k0 - dk).clamp((-0.95 - a) / b, (0.95 - a) / b);
        scalar_pair(a, b, k0, k1, sw, se)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn utility_inverse_round_trips(pi in 0.0..1e4f64, rho in 0.05..0.95f64, risk in 1e-3..2.0f64) {
        for u in [
            UtilityFunction::Sqrt,
            UtilityFunction::Power { rho },
            UtilityFunction::Exponential { risk_aversion: risk },
        ] {
            let payment = if u.allows_fines() { pi.min(10.0 / risk) - 1.0 } else { pi };
            let back = u.inverse(u.value(payment).unwrap()).unwrap();
            prop_assert!((back - payment).abs() <= 1e-9 * payment.abs().max(1.0), "{u:?}: {payment} -> {back}");
        }
    }

    #[test]
    fn survival_is_a_nonincreasing_probability(
        weights in prop::collection::vec(-2.0..2.0f64, 1..5),
        nc in prop::collection::vec(0.0..3.0f64, 5),
        sigma in 0.0..1.0f64,
        offset in -2.0..2.0f64,
    ) {
        let nc = nc[..weights.len()].to_vec();
        let law = GChi2Law::new(weights, nc, sigma, offset, Hypothesis::H0).unwrap();
        let mut prev = 1.0f64;
        for i in 0..25 {
            let x = -12.0 + i as f64;
            let s = survival(&law, x).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!(s <= prev + 2e-6, "sf({x}) = {s} > {prev}");
            prev = s;
        }
    }

    #[test]
    fn high_effort_dominates_the_likelihood_test((sys, k0, k1) in stable_pair(), horizon in 1usize..6, eta in -5.0..5.0f64) {
        let d0 = stacked_distribution(&sys, &k0, horizon, Hypothesis::H0).unwrap();
        let d1 = stacked_distribution(&sys, &k1, horizon, Hypothesis::H1).unwrap();
        let law0 = decompose(&d0, &d1, Hypothesis::H0).unwrap();
        let law1 = decompose(&d0, &d1, Hypothesis::H1).unwrap();
        let (alpha, beta) = alpha_beta(&law0, &law1, eta).unwrap();
        prop_assert!(beta >= alpha - 2e-6, "alpha {alpha} beta {beta}");
    }

    #[test]
    fn shorter_horizons_are_leading_blocks((sys, k0, _k1) in stable_pair(), long in 2usize..8, short_frac in 0.0..1.0f64) {
        let short = 1 + ((long - 1) as f64 * short_frac) as usize;
        let full = stacked_distribution(&sys, &k0, long, Hypothesis::H0).unwrap();
        let direct = stacked_distribution(&sys, &k0, short, Hypothesis::H0).unwrap();
        let lead = full.leading(short).unwrap();
        prop_assert!((&lead.mean - &direct.mean).amax() <= 1e-12);
        prop_assert!((&lead.cov - &direct.cov).amax() <= 1e-12);
    }

    #[test]
    fn config_survives_a_toml_round_trip((sys, k0, k1) in stable_pair(), gap in 0.01..10.0f64,
                                         ga in 0.5..0.999f64, gp in 0.5..0.999f64, t_max in 1usize..400) {
        let config = DesignConfig {
            system: sys,
            low: k0,
            high: k1,
            agent: AgentCostSpec::with_gap(1, ga, gap).unwrap(),
            principal: PrincipalCostSpec::discount_only(1, gp).unwrap(),
            utility: UtilityFunction::Sqrt,
            search: SearchSettings::new(t_max, LiabilityMode::Limited),
        };
        let text = config_to_toml(&config).unwrap();
        prop_assert_eq!(parse_config(&text).unwrap(), config);
    }
}
