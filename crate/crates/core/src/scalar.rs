//! Scalar abstraction shared by the numeric modules.
//!
//! Everything numeric is generic over [`Real`], which is implemented for
//! `f32` and `f64`. The contract computations only reach their stated
//! tolerances in `f64`; `f32` is supported for the linear-algebra layer and
//! for quick exploratory runs.

use nalgebra::{DMatrix, DVector, RealField};
use num_traits::{FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point scalar used throughout the crate.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Display + 'static
{
    /// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
    ///
    /// Only the lower triangle of `m` is read.
    fn symmetric_eigen(m: &DMatrix<Self>) -> Result<(DVector<Self>, DMatrix<Self>)>;

    /// Eigenvalues of a symmetric matrix, ascending.
    fn symmetric_eigenvalues(m: &DMatrix<Self>) -> Result<DVector<Self>>;

    const NAN: Self;
    const INFINITY: Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const NAN: $t = <$t>::NAN;
            const INFINITY: $t = <$t>::INFINITY;

            fn symmetric_eigen(m: &DMatrix<$t>) -> Result<(DVector<$t>, DMatrix<$t>)> {
                let n = m.nrows();
                let fm = faer::Mat::<$t>::from_fn(n, n, |i, j| m[(i, j)]);
                let evd = fm
                    .self_adjoint_eigen(faer::Side::Lower)
                    .map_err(|_| Error::EigenFailure)?;
                let s = evd.S();
                let u = evd.U();
                let values = DVector::from_fn(n, |i, _| s[i]);
                let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, j)]);
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::EigenFailure);
                }
                Ok((values, vectors))
            }

            fn symmetric_eigenvalues(m: &DMatrix<$t>) -> Result<DVector<$t>> {
                let n = m.nrows();
                let fm = faer::Mat::<$t>::from_fn(n, n, |i, j| m[(i, j)]);
                let values = fm
                    .self_adjoint_eigenvalues(faer::Side::Lower)
                    .map_err(|_| Error::EigenFailure)?;
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::EigenFailure);
                }
                Ok(DVector::from_vec(values))
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Converts a scalar to `f64` (used for diagnostics and error payloads).
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `(S + Sᵀ) / 2`.
pub fn symmetrize<T: Real>(s: &DMatrix<T>) -> DMatrix<T> {
    (s + s.transpose()) * lit::<T>(0.5)
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_eigenvalue<T: Real>(s: &DMatrix<T>) -> Result<T> {
    if s.nrows() == 0 {
        return Ok(T::zero());
    }
    let vals = T::symmetric_eigenvalues(&symmetrize(s))?;
    Ok(vals[0])
}

/// Symmetric positive-semidefinite square root via eigendecomposition.
///
/// Eigenvalues in `(-tol_psd, 0)` are clamped to zero; anything below
/// `-tol_psd` is reported as [`Error::NotPsd`].
pub fn psd_sqrt<T: Real>(s: &DMatrix<T>, tol_psd: T, what: &'static str) -> Result<DMatrix<T>> {
    let n = s.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (vals, vecs) = T::symmetric_eigen(&symmetrize(s))?;
    if vals[0] < -tol_psd {
        return Err(Error::NotPsd {
            what,
            min_eig: to_f64(vals[0]),
        });
    }
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        let v = vals[j].max(T::zero()).sqrt();
        col *= v;
    }
    Ok(symmetrize(&(scaled * vecs.transpose())))
}

/// Max-abs entry.
pub(crate) fn max_abs<T: Real>(it: impl IntoIterator<Item = T>) -> T {
    it.into_iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy)]
pub struct CompensatedSum<T> {
    sum: T,
    comp: T,
}

impl<T: Real> Default for CompensatedSum<T> {
    fn default() -> Self {
        Self {
            sum: T::zero(),
            comp: T::zero(),
        }
    }
}

impl<T: Real> CompensatedSum<T> {
    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_of_diagonal() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0_f64, 9.0, 0.0]));
        let r = psd_sqrt(&s, 1e-9, "s").unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((r[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(r[(2, 2)].abs() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0_f64, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let r = psd_sqrt(&a, 1e-9, "a").unwrap();
        assert!((&r * &r - &a).abs().max() < 1e-12);
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0_f64, 0.0, 0.0, -1e-3]);
        assert!(matches!(psd_sqrt(&a, 1e-9, "a"), Err(Error::NotPsd { .. })));
        // drift within tolerance is clamped
        let b = DMatrix::from_row_slice(2, 2, &[1.0_f64, 0.0, 0.0, -1e-12]);
        assert!(psd_sqrt(&b, 1e-9, "b").is_ok());
    }

    #[test]
    fn f32_eigen() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0_f32, 1.0, 1.0, 2.0]);
        let (vals, _) = f32::symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-5 && (vals[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::<f64>::default();
        s.add(1e16);
        for _ in 0..10 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 10.0);
    }
}
