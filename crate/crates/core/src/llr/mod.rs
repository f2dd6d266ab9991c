//! Log-likelihood ratio of `Y_T` and its generalized chi-squared law.
//!
//! With `D = M_1 - M_0` the statistic
//! `L(Y) = 1/2 [log|S_0|/|S_1| + (Y-M_0)' S_0^-1 (Y-M_0) - (Y-M_1)' S_1^-1 (Y-M_1)]`
//! is, under either hypothesis, distributed as
//! `sum_j w_j chi2_1(nu_j^2) + sigma Z + C`.

mod nested;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{lit, max_abs, psd_sqrt, symmetrize, CompensatedSum, Real};
use crate::system::TOL_PSD;
pub use crate::trajectory::Hypothesis;
use crate::trajectory::StackedGaussian;

pub use nested::NestedLlr;

/// Relative threshold (against `max(1, max|w|)`) below which a weight is zero
/// and its component is routed into the Gaussian term.
pub const TOL_WEIGHT: f64 = 1e-10;

/// Law of `sum_j w_j (Z_j + nu_j)^2 + sigma Z_0 + C` with independent standard
/// normals. Internally stored in the expanded form
/// `sum_j (w_j Z_j^2 + b_j Z_j) + sigma Z_0 + c`, `b_j = 2 w_j nu_j`,
/// `c = C + sum_j w_j nu_j^2`, which stays accurate when a weight is tiny and
/// its noncentrality huge.
#[derive(Debug, Clone, PartialEq)]
pub struct GChi2Law<T: Real> {
    weights: Vec<T>,
    linear: Vec<T>,
    sigma: T,
    centre: T,
    hypothesis: Hypothesis,
}

impl<T: Real> GChi2Law<T> {
    /// From weights, squared noncentralities `nu_j^2`, Gaussian scale and offset `C`.
    pub fn new(
        weights: Vec<T>,
        noncentralities: Vec<T>,
        sigma: T,
        offset: T,
        hypothesis: Hypothesis,
    ) -> Result<Self> {
        if weights.len() != noncentralities.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights but {} noncentralities",
                weights.len(),
                noncentralities.len()
            )));
        }
        if noncentralities
            .iter()
            .any(|nc| !(*nc >= T::zero()) || !nc.is_finite())
        {
            return Err(Error::invalid(
                "noncentralities",
                "must be finite and nonnegative",
            ));
        }
        let linear = weights
            .iter()
            .zip(&noncentralities)
            .map(|(w, nc)| lit::<T>(2.0) * *w * nc.sqrt())
            .collect();
        let mut centre = CompensatedSum::default();
        centre.add(offset);
        for (w, nc) in weights.iter().zip(&noncentralities) {
            centre.add(*w * *nc);
        }
        Self::expanded(weights, linear, sigma, centre.value(), hypothesis)
    }

    /// From the expanded coefficients `(w_j, b_j)`, `sigma` and centre `c`.
    pub fn expanded(
        weights: Vec<T>,
        linear: Vec<T>,
        sigma: T,
        centre: T,
        hypothesis: Hypothesis,
    ) -> Result<Self> {
        if weights.len() != linear.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights but {} linear coefficients",
                weights.len(),
                linear.len()
            )));
        }
        let tol = lit::<T>(TOL_WEIGHT) * max_abs(weights.iter().copied()).max(T::one());
        if weights.iter().any(|w| !(w.abs() > tol)) {
            return Err(Error::invalid(
                "weights",
                "entries must exceed the zero-weight tolerance",
            ));
        }
        let finite = weights.iter().chain(&linear).all(|x| x.is_finite())
            && sigma.is_finite()
            && centre.is_finite();
        if !finite {
            return Err(Error::invalid("law", "parameters must be finite"));
        }
        if sigma < T::zero() {
            return Err(Error::invalid("sigma", "must be nonnegative"));
        }
        Ok(Self {
            weights,
            linear,
            sigma,
            centre,
            hypothesis,
        })
    }

    /// Splits eigen-coordinates `(w_j, b_j)` into chi-squared components and a
    /// Gaussian remainder: weights at or below the zero-weight tolerance add
    /// `b_j^2` to `sigma^2`. `c` is the constant of the expanded form.
    pub(crate) fn from_coordinates(
        w: impl IntoIterator<Item = T>,
        b: impl IntoIterator<Item = T>,
        c: T,
        hypothesis: Hypothesis,
    ) -> Result<Self> {
        let pairs: Vec<(T, T)> = w.into_iter().zip(b).collect();
        let tol = lit::<T>(TOL_WEIGHT) * max_abs(pairs.iter().map(|p| p.0)).max(T::one());
        let mut weights = Vec::with_capacity(pairs.len());
        let mut linear = Vec::with_capacity(pairs.len());
        let mut var = CompensatedSum::default();
        for (wj, bj) in pairs {
            if wj.abs() > tol {
                weights.push(wj);
                linear.push(bj);
            } else {
                var.add(bj * bj);
            }
        }
        Self::expanded(
            weights,
            linear,
            var.value().max(T::zero()).sqrt(),
            c,
            hypothesis,
        )
    }

    /// Point mass at `c`.
    pub fn point_mass(c: T, hypothesis: Hypothesis) -> Self {
        Self {
            weights: Vec::new(),
            linear: Vec::new(),
            sigma: T::zero(),
            centre: c,
            hypothesis,
        }
    }

    /// `N(mean, sd^2)`.
    pub fn gaussian(mean: T, sd: T, hypothesis: Hypothesis) -> Result<Self> {
        Self::expanded(Vec::new(), Vec::new(), sd, mean, hypothesis)
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Squared noncentralities `nu_j^2 = (b_j / 2 w_j)^2`.
    pub fn noncentralities(&self) -> Vec<T> {
        self.weights
            .iter()
            .zip(&self.linear)
            .map(|(w, b)| {
                let nu = *b / (lit::<T>(2.0) * *w);
                nu * nu
            })
            .collect()
    }

    /// Linear coefficients `b_j` of the expanded form.
    pub fn linear(&self) -> &[T] {
        &self.linear
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    /// `C = c - sum_j w_j nu_j^2`.
    pub fn offset(&self) -> T {
        let mut s = CompensatedSum::default();
        s.add(self.centre);
        for (w, b) in self.weights.iter().zip(&self.linear) {
            s.add(-(*b * *b) / (lit::<T>(4.0) * *w));
        }
        s.value()
    }

    /// Constant `c` of the expanded form.
    pub fn centre(&self) -> T {
        self.centre
    }

    pub fn hypothesis(&self) -> Hypothesis {
        self.hypothesis
    }

    /// No chi-squared and no Gaussian part.
    pub fn is_degenerate(&self) -> bool {
        self.weights.is_empty() && self.sigma.is_zero()
    }

    pub fn mean(&self) -> T {
        law_mean(self)
    }

    /// `sum_j (2 w_j^2 + b_j^2) + sigma^2`.
    pub fn variance(&self) -> T {
        let mut s = CompensatedSum::default();
        for (w, b) in self.weights.iter().zip(&self.linear) {
            s.add(lit::<T>(2.0) * *w * *w + *b * *b);
        }
        s.add(self.sigma * self.sigma);
        s.value()
    }
}

/// `E[Q] = sum_j w_j (1 + nu_j^2) + C`.
pub fn law_mean<T: Real>(law: &GChi2Law<T>) -> T {
    let mut s = CompensatedSum::default();
    s.add(law.centre);
    for w in &law.weights {
        s.add(*w);
    }
    s.value()
}

/// `n` independent draws from the law.
pub fn sample<T: Real, R: Rng + ?Sized>(law: &GChi2Law<T>, rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| sample_one(law, rng)).collect()
}

fn sample_one<T: Real, R: Rng + ?Sized>(law: &GChi2Law<T>, rng: &mut R) -> T {
    let mut s = CompensatedSum::default();
    s.add(law.centre);
    for (w, b) in law.weights.iter().zip(&law.linear) {
        let z: T = lit(StandardNormal.sample(rng));
        s.add((*w * z + *b) * z);
    }
    if law.sigma > T::zero() {
        let z: T = lit(StandardNormal.sample(rng));
        s.add(law.sigma * z);
    }
    s.value()
}

fn cholesky<T: Real>(s: &DMatrix<T>, what: &'static str) -> Result<Cholesky<T, Dyn>> {
    Cholesky::new(symmetrize(s)).ok_or(Error::SingularCovariance(what))
}

fn log_det<T: Real>(chol: &Cholesky<T, Dyn>) -> T {
    let l = chol.l_dirty();
    let mut s = CompensatedSum::default();
    for i in 0..l.nrows() {
        s.add(l[(i, i)].ln());
    }
    s.value() * lit::<T>(2.0)
}

fn check_pair<T: Real>(d0: &StackedGaussian<T>, d1: &StackedGaussian<T>) -> Result<()> {
    if d0.horizon != d1.horizon || d0.dim() != d1.dim() {
        return Err(Error::HorizonMismatch(d0.horizon, d1.horizon));
    }
    Ok(())
}

/// The LLR with both covariances factorized once, for repeated evaluation.
#[derive(Debug, Clone)]
pub struct LlrStatistic<T: Real> {
    m0: DVector<T>,
    m1: DVector<T>,
    l0: DMatrix<T>,
    l1: DMatrix<T>,
    half_log_det_ratio: T,
}

impl<T: Real> LlrStatistic<T> {
    pub fn new(d0: &StackedGaussian<T>, d1: &StackedGaussian<T>) -> Result<Self> {
        check_pair(d0, d1)?;
        let c0 = cholesky(&d0.cov, "S_0")?;
        let c1 = cholesky(&d1.cov, "S_1")?;
        let half = lit::<T>(0.5);
        Ok(Self {
            m0: d0.mean.clone(),
            m1: d1.mean.clone(),
            half_log_det_ratio: (log_det(&c0) - log_det(&c1)) * half,
            l0: c0.unpack(),
            l1: c1.unpack(),
        })
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }

    pub fn evaluate(&self, y: &DVector<T>) -> Result<T> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "observation has length {}, expected {}",
                y.len(),
                self.dim()
            )));
        }
        let r0 = self
            .l0
            .solve_lower_triangular(&(y - &self.m0))
            .ok_or(Error::SingularCovariance("S_0"))?;
        let r1 = self
            .l1
            .solve_lower_triangular(&(y - &self.m1))
            .ok_or(Error::SingularCovariance("S_1"))?;
        Ok(self.half_log_det_ratio + (r0.norm_squared() - r1.norm_squared()) * lit::<T>(0.5))
    }
}

/// `L(Y)` for a single observation vector.
pub fn llr_value<T: Real>(
    y: &DVector<T>,
    d0: &StackedGaussian<T>,
    d1: &StackedGaussian<T>,
) -> Result<T> {
    LlrStatistic::new(d0, d1)?.evaluate(y)
}

/// Law of `L(Y_T)` under `under`, by whitening with the symmetric square root
/// of that hypothesis' covariance and diagonalizing
/// `Phi_0 = S_0^1/2 S_1^-1 S_0^1/2` (or `Phi_1 = S_1^1/2 S_0^-1 S_1^1/2`).
pub fn decompose<T: Real>(
    d0: &StackedGaussian<T>,
    d1: &StackedGaussian<T>,
    under: Hypothesis,
) -> Result<GChi2Law<T>> {
    check_pair(d0, d1)?;
    let c0 = cholesky(&d0.cov, "S_0")?;
    let c1 = cholesky(&d1.cov, "S_1")?;
    let log_det_ratio = log_det(&c0) - log_det(&c1);
    let d = &d1.mean - &d0.mean;
    let half = lit::<T>(0.5);
    let tol_psd = lit::<T>(TOL_PSD);
    let (own, other_chol, sign) = match under {
        Hypothesis::H0 => (&d0.cov, &c1, -T::one()),
        Hypothesis::H1 => (&d1.cov, &c0, T::one()),
    };
    let root = psd_sqrt(own, tol_psd, "S_i")?;
    let phi = symmetrize(&(&root * other_chol.solve(&root)));
    let (lambda, psi) = T::symmetric_eigen(&phi)?;
    let other_inv_d = other_chol.solve(&d);
    let b = psi.transpose() * (&root * &other_inv_d);
    // H0: w = (1 - lambda)/2, c = (logdet ratio - D'S_1^-1 D)/2
    // H1: w = (lambda - 1)/2, c = (logdet ratio + D'S_0^-1 D)/2
    let w = lambda.iter().map(|l| (*l - T::one()) * half * sign);
    let c = (log_det_ratio + sign * d.dot(&other_inv_d)) * half;
    GChi2Law::from_coordinates(w, b.iter().copied(), c, under)
}

/// `KL(N(m_a, s_a) || N(m_b, s_b))` in closed form.
pub fn gaussian_kl<T: Real>(
    m_a: &DVector<T>,
    s_a: &DMatrix<T>,
    m_b: &DVector<T>,
    s_b: &DMatrix<T>,
) -> Result<T> {
    let ca = cholesky(s_a, "S_a")?;
    let cb = cholesky(s_b, "S_b")?;
    let k = lit::<T>(m_a.len() as f64);
    let trace = cb.solve(s_a).trace();
    let d = m_b - m_a;
    let maha = d.dot(&cb.solve(&d));
    Ok((trace - k + maha + log_det(&cb) - log_det(&ca)) * lit::<T>(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Effort;
    use crate::test_fixtures::{lfc_high, lfc_low, lfc_system, scalar_gain, scalar_system};
    use crate::trajectory::stacked_distribution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_law(mean: f64, var: f64, h: Hypothesis) -> StackedGaussian<f64> {
        StackedGaussian {
            horizon: 1,
            block: 1,
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            hypothesis: h,
        }
    }

    fn lfc_pair(horizon: usize) -> (StackedGaussian<f64>, StackedGaussian<f64>) {
        let sys = lfc_system();
        (
            stacked_distribution(&sys, &lfc_low(), horizon, Hypothesis::H0).unwrap(),
            stacked_distribution(&sys, &lfc_high(), horizon, Hypothesis::H1).unwrap(),
        )
    }

    #[test]
    fn identical_hypotheses_give_zero() {
        let (d0, _) = lfc_pair(3);
        let y = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin());
        assert_eq!(llr_value(&y, &d0, &d0).unwrap(), 0.0);
    }

    #[test]
    fn scalar_llr_closed_form() {
        let d0 = scalar_law(0.0, 1.0, Hypothesis::H0);
        let d1 = scalar_law(1.0, 1.0, Hypothesis::H1);
        let at = |y: f64| llr_value(&DVector::from_element(1, y), &d0, &d1).unwrap();
        assert!(at(0.5).abs() < 1e-15);
        assert!((at(1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn singular_covariance_reported() {
        let d0 = scalar_law(0.0, 0.0, Hypothesis::H0);
        let d1 = scalar_law(1.0, 1.0, Hypothesis::H1);
        assert!(matches!(
            llr_value(&DVector::zeros(1), &d0, &d1),
            Err(Error::SingularCovariance(_))
        ));
    }

    #[test]
    fn equal_covariance_is_gaussian() {
        let d0 = scalar_law(0.0, 2.0, Hypothesis::H0);
        let d1 = scalar_law(3.0, 2.0, Hypothesis::H1);
        let d2 = 4.5;
        let l0 = decompose(&d0, &d1, Hypothesis::H0).unwrap();
        assert!(l0.weights().is_empty());
        assert!((l0.sigma() * l0.sigma() - d2).abs() < 1e-12);
        assert!((law_mean(&l0) + 0.5 * d2).abs() < 1e-12);
        let l1 = decompose(&d0, &d1, Hypothesis::H1).unwrap();
        assert!((law_mean(&l1) - 0.5 * d2).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_is_point_mass_at_zero() {
        let (d0, _) = lfc_pair(2);
        let law = decompose(&d0, &d0, Hypothesis::H0).unwrap();
        assert!(law.weights().is_empty());
        assert!(law.sigma() < 1e-12);
        assert!(law.offset().abs() < 1e-12);
    }

    #[test]
    fn scalar_variance_change_matches_kl() {
        let d0 = scalar_law(0.0, 1.0, Hypothesis::H0);
        let d1 = scalar_law(0.0, 2.0, Hypothesis::H1);
        let law = decompose(&d0, &d1, Hypothesis::H0).unwrap();
        assert_eq!(law.weights().len(), 1);
        assert!((law.weights()[0] - 0.25).abs() < 1e-15);
        assert!(law.noncentralities()[0].abs() < 1e-15);
        assert!((law.offset() - 0.5 * 0.5_f64.ln()).abs() < 1e-15);
        let kl = 0.5 * (0.5 - 1.0 + 2.0_f64.ln());
        assert!((law_mean(&law) + kl).abs() < 1e-15);
        assert!((law_mean(&law) + 0.0966).abs() < 1e-4);
    }

    #[test]
    fn lfc_means_are_kl_divergences() {
        let (d0, d1) = lfc_pair(4);
        let l0 = decompose(&d0, &d1, Hypothesis::H0).unwrap();
        let l1 = decompose(&d0, &d1, Hypothesis::H1).unwrap();
        let kl01 = gaussian_kl(&d0.mean, &d0.cov, &d1.mean, &d1.cov).unwrap();
        let kl10 = gaussian_kl(&d1.mean, &d1.cov, &d0.mean, &d0.cov).unwrap();
        assert!((law_mean(&l0) + kl01).abs() < 1e-8 * kl01.max(1.0));
        assert!((law_mean(&l1) - kl10).abs() < 1e-8 * kl10.max(1.0));
    }

    #[test]
    fn law_mean_examples() {
        let g = GChi2Law::gaussian(0.0, 1.0, Hypothesis::H0).unwrap();
        assert_eq!(law_mean(&g), 0.0);
        let chi = GChi2Law::new(vec![1.0], vec![0.0], 0.0, 0.0, Hypothesis::H0).unwrap();
        assert_eq!(law_mean(&chi), 1.0);
    }

    #[test]
    fn rejects_invalid_laws() {
        assert!(GChi2Law::new(vec![0.0], vec![0.0], 0.0, 0.0, Hypothesis::H0).is_err());
        assert!(GChi2Law::new(vec![1.0], vec![-1.0], 0.0, 0.0, Hypothesis::H0).is_err());
        assert!(GChi2Law::new(vec![1.0], vec![0.0], -1.0, 0.0, Hypothesis::H0).is_err());
        assert!(GChi2Law::new(vec![1.0, 2.0], vec![0.0], 0.0, 0.0, Hypothesis::H0).is_err());
    }

    #[test]
    fn offset_round_trips() {
        let law = GChi2Law::<f64>::new(vec![0.5, -1.5], vec![2.0, 0.3], 0.7, -1.25, Hypothesis::H1)
            .unwrap();
        assert!((law.offset() + 1.25).abs() < 1e-14);
        let nc = law.noncentralities();
        assert!((nc[0] - 2.0).abs() < 1e-14 && (nc[1] - 0.3).abs() < 1e-14);
        assert!((law_mean(&law) - (0.5 * 3.0 - 1.5 * 1.3 - 1.25)).abs() < 1e-14);
    }

    #[test]
    fn degenerate_sampling() {
        let law = GChi2Law::point_mass(2.5, Hypothesis::H0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample(&law, &mut rng, 100).iter().all(|x| *x == 2.5));
    }

    #[test]
    fn chi2_sample_mean() {
        let law = GChi2Law::new(vec![1.0], vec![0.0], 0.0, 0.0, Hypothesis::H0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let xs = sample(&law, &mut rng, n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn lfc_sample_mean_matches_law_mean() {
        let (d0, d1) = lfc_pair(2);
        let law = decompose(&d0, &d1, Hypothesis::H0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let xs = sample(&law, &mut rng, n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = (law.variance() / n as f64).sqrt();
        assert!(
            (mean - law_mean(&law)).abs() < 3.0 * se,
            "{mean} vs {}",
            law_mean(&law)
        );
    }

    #[test]
    fn sampling_is_reproducible() {
        let (d0, d1) = lfc_pair(2);
        let law = decompose(&d0, &d1, Hypothesis::H1).unwrap();
        let a = sample(&law, &mut ChaCha8Rng::seed_from_u64(3), 50);
        let b = sample(&law, &mut ChaCha8Rng::seed_from_u64(3), 50);
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_invariance() {
        let (d0, d1) = lfc_pair(2);
        let y = DVector::from_fn(8, |i, _| 0.1 * i as f64 - 0.3);
        let base = llr_value(&y, &d0, &d1).unwrap();
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let permute = |d: &StackedGaussian<f64>| StackedGaussian {
            mean: DVector::from_fn(8, |i, _| d.mean[perm[i]]),
            cov: DMatrix::from_fn(8, 8, |i, j| d.cov[(perm[i], perm[j])]),
            ..d.clone()
        };
        let yp = DVector::from_fn(8, |i, _| y[perm[i]]);
        let moved = llr_value(&yp, &permute(&d0), &permute(&d1)).unwrap();
        assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn scalar_plant_laws_have_one_weight_per_step() {
        let sys = scalar_system(0.9, 1.0, 1.0, 0.2, 0.5, 0.01, 1.0, 0.0);
        let d0 =
            stacked_distribution(&sys, &scalar_gain(-0.1, Effort::Low), 3, Hypothesis::H0).unwrap();
        let d1 = stacked_distribution(&sys, &scalar_gain(-0.5, Effort::High), 3, Hypothesis::H1)
            .unwrap();
        let law = decompose(&d0, &d1, Hypothesis::H1).unwrap();
        assert_eq!(law.weights().len(), 3);
        assert_eq!(law.hypothesis(), Hypothesis::H1);
    }
}
