//! Exact Gaussian law of the stacked observation vector `Y_T = (y_1, ..., y_T)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, max_abs, min_eigenvalue, symmetrize, to_f64, Real};
use crate::system::{closed_loop_matrix, FeedbackController, LtiSystem, TOL_PSD};

/// Threshold on `||M_0 - M_1||_inf` and `||S_0 - S_1||_inf` below which the
/// two hypotheses are treated as the same distribution.
pub const TOL_DIST: f64 = 1e-10;

/// Which controller generated the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hypothesis {
    /// Low effort.
    H0,
    /// High effort.
    H1,
}

/// `Y_T ~ N(mean, cov)` under one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedGaussian<T: Real> {
    pub horizon: usize,
    /// Output dimension `p`; `mean` has length `horizon * p`.
    pub block: usize,
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
    pub hypothesis: Hypothesis,
}

impl<T: Real> StackedGaussian<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Law of the first `horizon` observations. Exact: the leading blocks of a
    /// longer horizon are the shorter horizon's law.
    pub fn leading(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 || horizon > self.horizon {
            return Err(Error::HorizonMismatch(horizon, self.horizon));
        }
        let d = horizon * self.block;
        Ok(Self {
            horizon,
            block: self.block,
            mean: self.mean.rows(0, d).into_owned(),
            cov: self.cov.view((0, 0), (d, d)).into_owned(),
            hypothesis: self.hypothesis,
        })
    }
}

fn check_horizon(horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::invalid("T", "horizon must be at least 1"));
    }
    Ok(())
}

/// `(U, V)` with `Y_T = U W + V x_0 + E`: `U` is block lower triangular with
/// block `(s, t) = C A_cl^(s-t)`, `V` stacks `C A_cl^1 ... C A_cl^T`.
pub fn stacking_operators<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    horizon: usize,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    check_horizon(horizon)?;
    let a_cl = closed_loop_matrix(sys, ctrl)?;
    let (n, p) = (sys.n(), sys.p());
    // C A_cl^k for k = 0..=T
    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(sys.c().clone());
    for k in 0..horizon {
        let next = &powers[k] * &a_cl;
        powers.push(next);
    }
    let mut u = DMatrix::zeros(horizon * p, horizon * n);
    let mut v = DMatrix::zeros(horizon * p, n);
    for s in 0..horizon {
        for t in 0..=s {
            u.view_mut((s * p, t * n), (p, n)).copy_from(&powers[s - t]);
        }
        v.view_mut((s * p, 0), (p, n)).copy_from(&powers[s + 1]);
    }
    Ok((u, v))
}

/// Reference assembly `M = U mu_W + V mu_0`, `S = U Sigma_W U' + V Sigma_0 V' + Sigma_E`
/// through the explicit stacking operators.
pub fn stacked_distribution_dense<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    horizon: usize,
    hypothesis: Hypothesis,
) -> Result<StackedGaussian<T>> {
    let (u, v) = stacking_operators(sys, ctrl, horizon)?;
    let (n, p) = (sys.n(), sys.p());
    let mut mu_big = DVector::zeros(horizon * n);
    let mut sw_big = DMatrix::zeros(horizon * n, horizon * n);
    let mut se_big = DMatrix::zeros(horizon * p, horizon * p);
    for t in 0..horizon {
        mu_big.rows_mut(t * n, n).copy_from(sys.mu_w());
        sw_big
            .view_mut((t * n, t * n), (n, n))
            .copy_from(sys.sigma_w());
        se_big
            .view_mut((t * p, t * p), (p, p))
            .copy_from(sys.sigma_e());
    }
    let mean = &u * mu_big + &v * sys.mu_0();
    let cov = &u * sw_big * u.transpose() + &v * sys.sigma_0() * v.transpose() + se_big;
    finish(horizon, p, mean, cov, hypothesis)
}

/// Law of `Y_T` under `ctrl`, assembled block by block from the state
/// covariance recursion: block `(s, t)` of `S` for `s >= t` is
/// `C A_cl^(s-t) Cov(x_(t+1)) C'`. Equal to the operator assembly of
/// [`stacked_distribution_dense`] but `O(T^2)` rather than `O(T^3)`.
pub fn stacked_distribution<T: Real>(
    sys: &LtiSystem<T>,
    ctrl: &FeedbackController<T>,
    horizon: usize,
    hypothesis: Hypothesis,
) -> Result<StackedGaussian<T>> {
    check_horizon(horizon)?;
    let a_cl = closed_loop_matrix(sys, ctrl)?;
    let (p, c) = (sys.p(), sys.c());
    let d = horizon * p;
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    let mut m = sys.mu_0().clone();
    let mut sigma = sys.sigma_0().clone();
    for t in 0..horizon {
        m = &a_cl * m + sys.mu_w();
        sigma = symmetrize(&(&a_cl * &sigma * a_cl.transpose() + sys.sigma_w()));
        mean.rows_mut(t * p, p).copy_from(&(c * &m));
        // column block t: rows s >= t
        let mut x = &sigma * c.transpose();
        for s in t..horizon {
            let blk = c * &x;
            cov.view_mut((s * p, t * p), (p, p)).copy_from(&blk);
            if s > t {
                cov.view_mut((t * p, s * p), (p, p))
                    .copy_from(&blk.transpose());
            }
            x = &a_cl * x;
        }
        let diag = cov.view((t * p, t * p), (p, p)) + sys.sigma_e();
        cov.view_mut((t * p, t * p), (p, p)).copy_from(&diag);
    }
    finish(horizon, p, mean, cov, hypothesis)
}

fn finish<T: Real>(
    horizon: usize,
    p: usize,
    mean: DVector<T>,
    cov: DMatrix<T>,
    hypothesis: Hypothesis,
) -> Result<StackedGaussian<T>> {
    let cov = symmetrize(&cov);
    if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NotPsd {
            what: "stacked covariance",
            min_eig: f64::NAN,
        });
    }
    // scale-aware check: the absolute floor applies to unit-scale covariances
    let scale = max_abs(cov.diagonal().iter().copied()).max(T::one());
    let min = min_eigenvalue(&cov)?;
    if min < -lit::<T>(TOL_PSD) * scale {
        return Err(Error::NotPsd {
            what: "stacked covariance",
            min_eig: to_f64(min),
        });
    }
    Ok(StackedGaussian {
        horizon,
        block: p,
        mean,
        cov,
        hypothesis,
    })
}

/// True when the two laws differ by more than [`TOL_DIST`] in mean or covariance.
pub fn distinguishable<T: Real>(d0: &StackedGaussian<T>, d1: &StackedGaussian<T>) -> Result<bool> {
    if d0.horizon != d1.horizon || d0.dim() != d1.dim() {
        return Err(Error::HorizonMismatch(d0.horizon, d1.horizon));
    }
    let tol = lit::<T>(TOL_DIST);
    let dm = max_abs(d0.mean.iter().zip(d1.mean.iter()).map(|(a, b)| *a - *b));
    let ds = max_abs(d0.cov.iter().zip(d1.cov.iter()).map(|(a, b)| *a - *b));
    Ok(dm > tol || ds > tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Effort;
    use crate::test_fixtures::{lfc_high, lfc_low, lfc_system, scalar_gain, scalar_system};

    #[test]
    fn single_step_operators() {
        let sys = lfc_system();
        let (u, v) = stacking_operators(&sys, &lfc_high(), 1).unwrap();
        let a_cl = closed_loop_matrix(&sys, &lfc_high()).unwrap();
        assert_eq!(u, *sys.c());
        assert_eq!(v, sys.c() * a_cl);
    }

    #[test]
    fn nilpotent_closed_loop() {
        // a + b k = 0
        let sys = scalar_system(0.5, 1.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        let (u, v) = stacking_operators(&sys, &scalar_gain(-0.5, Effort::Low), 3).unwrap();
        assert_eq!(u, DMatrix::identity(3, 3) * 2.0);
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn lfc_operators_match_unrolling() {
        let sys = lfc_system();
        let ctrl = lfc_high();
        let a = closed_loop_matrix(&sys, &ctrl).unwrap();
        let c = sys.c();
        let (u, v) = stacking_operators(&sys, &ctrl, 3).unwrap();
        assert_eq!(
            (u.nrows(), u.ncols(), v.nrows(), v.ncols()),
            (12, 12, 12, 4)
        );
        // y_1 = C(A x0 + w0), y_2 = C(A^2 x0 + A w0 + w1), y_3 = C(A^3 x0 + A^2 w0 + A w1 + w2)
        let i = DMatrix::<f64>::identity(4, 4);
        let z = DMatrix::<f64>::zeros(4, 4);
        let rows = [[&i, &z, &z], [&a, &i, &z], [&(&a * &a), &a, &i]];
        for (s, row) in rows.iter().enumerate() {
            for (t, blk) in row.iter().enumerate() {
                let expect = c * *blk;
                assert!((u.view((4 * s, 4 * t), (4, 4)) - expect).abs().max() < 1e-15);
            }
        }
        let expect_v = [&a, &(&a * &a), &(&a * &a * &a)];
        for (s, blk) in expect_v.iter().enumerate() {
            assert!((v.view((4 * s, 0), (4, 4)) - c * *blk).abs().max() < 1e-15);
        }
    }

    #[test]
    fn one_step_distribution() {
        let sys = scalar_system(0.5, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0);
        let d =
            stacked_distribution(&sys, &scalar_gain(0.0, Effort::Low), 1, Hypothesis::H0).unwrap();
        assert_eq!(d.mean[0], 0.5);
        assert_eq!(d.cov[(0, 0)], 1.0);
    }

    #[test]
    fn centered_system_has_zero_mean() {
        let sys = lfc_system();
        let centered = LtiSystem::new(
            sys.a().clone(),
            sys.b().clone(),
            sys.c().clone(),
            DVector::zeros(4),
            sys.sigma_w().clone(),
            sys.sigma_e().clone(),
            DVector::zeros(4),
            sys.sigma_0().clone(),
        )
        .unwrap();
        let d = stacked_distribution(&centered, &lfc_low(), 6, Hypothesis::H0).unwrap();
        assert!(d.mean.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn recursion_matches_operator_assembly() {
        let sys = lfc_system();
        for ctrl in [lfc_low(), lfc_high()] {
            for horizon in [1, 2, 7, 20] {
                let fast = stacked_distribution(&sys, &ctrl, horizon, Hypothesis::H1).unwrap();
                let dense =
                    stacked_distribution_dense(&sys, &ctrl, horizon, Hypothesis::H1).unwrap();
                assert!((&fast.mean - &dense.mean).amax() < 1e-13);
                assert!((&fast.cov - &dense.cov).amax() < 1e-13);
            }
        }
    }

    #[test]
    fn nesting_is_exact() {
        let sys = lfc_system();
        let long = stacked_distribution(&sys, &lfc_high(), 9, Hypothesis::H1).unwrap();
        let short = stacked_distribution(&sys, &lfc_high(), 8, Hypothesis::H1).unwrap();
        assert_eq!(long.leading(8).unwrap(), short);
        assert!(long.leading(10).is_err());
        let (u9, _) = stacking_operators(&sys, &lfc_high(), 9).unwrap();
        let (u8, _) = stacking_operators(&sys, &lfc_high(), 8).unwrap();
        assert_eq!(u9.view((0, 0), (32, 32)), u8);
    }

    #[test]
    fn positive_definite_with_measurement_noise() {
        let sys = lfc_system();
        let d = stacked_distribution(&sys, &lfc_low(), 10, Hypothesis::H0).unwrap();
        assert!(min_eigenvalue(&d.cov).unwrap() >= 0.01 - 1e-12);
    }

    #[test]
    fn distinguishability() {
        let sys = lfc_system();
        let d0 = stacked_distribution(&sys, &lfc_low(), 1, Hypothesis::H0).unwrap();
        let d1 = stacked_distribution(&sys, &lfc_high(), 1, Hypothesis::H1).unwrap();
        assert!(!distinguishable(&d0, &d0).unwrap());
        assert!(distinguishable(&d0, &d1).unwrap());
        let mut shifted = d0.clone();
        shifted.mean[2] += 1.0;
        assert!(distinguishable(&d0, &shifted).unwrap());
        let d2 = stacked_distribution(&sys, &lfc_low(), 2, Hypothesis::H0).unwrap();
        assert!(matches!(
            distinguishable(&d0, &d2),
            Err(Error::HorizonMismatch(1, 2))
        ));
    }

    #[test]
    fn zero_horizon_rejected() {
        let sys = lfc_system();
        assert!(stacking_operators(&sys, &lfc_low(), 0).is_err());
        assert!(stacked_distribution(&sys, &lfc_low(), 0, Hypothesis::H0).is_err());
    }
}
