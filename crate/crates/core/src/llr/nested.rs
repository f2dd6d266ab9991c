//! Both LLR laws for every horizon `1..=T_max` from one factorization.
//!
//! With `S_1 = L_1 L_1'` (Cholesky) and `G = L_1^-1 S_0 L_1^-T`, the leading
//! `T p` block of `L_1` factors the horizon-`T` covariance, so the leading
//! block `G_T` of `G` and the leading part `e_T` of `e = L_1^-1 D` are exactly
//! the horizon-`T` quantities. A single eigendecomposition
//! `G_T = U diag(lambda) U'` then yields both laws: with `f = U' e_T`,
//!
//! * under H0: `w = (1 - lambda)/2`, `b = sqrt(lambda) f`, `c = (sum ln lambda - |f|^2)/2`;
//! * under H1: `w = (1/lambda - 1)/2`, `b = f / lambda`, `c = (sum ln lambda + sum f^2/lambda)/2`.

use nalgebra::{DMatrix, DVector};

use super::{check_pair, cholesky, GChi2Law};
use crate::error::{Error, Result};
use crate::scalar::{lit, symmetrize, CompensatedSum, Real};
use crate::trajectory::{Hypothesis, StackedGaussian};

#[derive(Debug, Clone)]
pub struct NestedLlr<T: Real> {
    block: usize,
    horizon: usize,
    g: DMatrix<T>,
    e: DVector<T>,
}

impl<T: Real> NestedLlr<T> {
    /// Factorizes the longest-horizon pair once.
    pub fn new(d0: &StackedGaussian<T>, d1: &StackedGaussian<T>) -> Result<Self> {
        check_pair(d0, d1)?;
        // S_0 must be positive definite too; G inherits that
        cholesky(&d0.cov, "S_0")?;
        let l1 = cholesky(&d1.cov, "S_1")?.unpack();
        let x = l1
            .solve_lower_triangular(&d0.cov)
            .ok_or(Error::SingularCovariance("S_1"))?;
        // G = L_1^-1 (L_1^-1 S_0)' since S_0 is symmetric
        let g = l1
            .solve_lower_triangular(&x.transpose())
            .ok_or(Error::SingularCovariance("S_1"))?;
        let e = l1
            .solve_lower_triangular(&(&d1.mean - &d0.mean))
            .ok_or(Error::SingularCovariance("S_1"))?;
        Ok(Self {
            block: d0.block,
            horizon: d0.horizon,
            g: symmetrize(&g),
            e,
        })
    }

    pub fn max_horizon(&self) -> usize {
        self.horizon
    }

    /// `(law under H0, law under H1)` at `horizon`.
    pub fn laws(&self, horizon: usize) -> Result<(GChi2Law<T>, GChi2Law<T>)> {
        if horizon == 0 || horizon > self.horizon {
            return Err(Error::HorizonMismatch(horizon, self.horizon));
        }
        let d = horizon * self.block;
        let g = self.g.view((0, 0), (d, d)).into_owned();
        let (lambda, u) = T::symmetric_eigen(&g)?;
        if !(lambda[0] > T::zero()) {
            return Err(Error::SingularCovariance("S_0"));
        }
        let f = u.transpose() * self.e.rows(0, d);
        let half = lit::<T>(0.5);
        let mut log_det = CompensatedSum::default();
        let mut e_sq = CompensatedSum::default();
        let mut e_sq_scaled = CompensatedSum::default();
        for (l, fj) in lambda.iter().zip(f.iter()) {
            log_det.add(l.ln());
            e_sq.add(*fj * *fj);
            e_sq_scaled.add(*fj * *fj / *l);
        }
        let law0 = GChi2Law::from_coordinates(
            lambda.iter().map(|l| (T::one() - *l) * half),
            lambda.iter().zip(f.iter()).map(|(l, fj)| l.sqrt() * *fj),
            (log_det.value() - e_sq.value()) * half,
            Hypothesis::H0,
        )?;
        let law1 = GChi2Law::from_coordinates(
            lambda.iter().map(|l| (T::one() / *l - T::one()) * half),
            lambda.iter().zip(f.iter()).map(|(l, fj)| *fj / *l),
            (log_det.value() + e_sq_scaled.value()) * half,
            Hypothesis::H1,
        )?;
        Ok((law0, law1))
    }
}
