//! Tail probabilities of generalized chi-squared laws by Imhof inversion.
//!
//! For `Q = sum_j (w_j Z_j^2 + b_j Z_j) + sigma Z_0 + c` and the substitution
//! `t = u / 2` in Imhof's formula,
//!
//! ```text
//! P[Q >= x] = 1/2 + 1/pi * int_0^inf sin(theta(u)) / (u rho(u)) du
//! theta(u)  = sum_j [atan(w_j u)/2 - b_j^2 w_j u^3 / (8 (1 + w_j^2 u^2))] + (c - x) u / 2
//! log rho   = sum_j [ln(1 + w_j^2 u^2)/4 + b_j^2 u^2 / (8 (1 + w_j^2 u^2))] + sigma^2 u^2 / 8
//! ```
//!
//! The integral is cut at `U` chosen from a decay envelope of `1/(u rho)`,
//! integrated with adaptive Gauss-Kronrod (10/21) on `[0, U]` and, when `[0, U]`
//! spans too many oscillations, summed over half-periods beyond a cut-off with
//! Wynn's epsilon extrapolation. The error budget is split as truncation 1/4,
//! quadrature 1/2, oscillatory tail 1/4.
//!
//! [`SurvivalBatch`] builds one adaptive mesh shared by many thresholds and
//! caches the integrand at its nodes, so further thresholds cost one sine per node.
//! Evenly spaced thresholds are swept by rotating each node's phase, which
//! replaces the sine by a complex multiplication.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::llr::GChi2Law;
use crate::scalar::{lit, to_f64, CompensatedSum, Real};

/// Absolute accuracy of every probability returned with default settings.
pub const TOL_CDF: f64 = 1e-6;

/// Tail mass left outside a [`quantile_bracket`] on each side (target).
const BRACKET_TAIL: f64 = 1e-7;
/// Accuracy used while locating the bracket.
const BRACKET_TOL: f64 = 1e-8;

const MAX_INTERVALS: usize = 8192;
const CYCLE_CAP: f64 = 2048.0;
const MAX_TAIL_CHUNKS: usize = 4000;
const MIN_TAIL_CHUNKS: usize = 8;
const WYNN_WINDOW: usize = 41;
/// Evenly spaced thresholds between the two Chernoff caps of a bracket.
const BRACKET_RUNGS: usize = 64;
/// Subdivisions of the crossing rung.
const BRACKET_REFINE: usize = 16;
/// Rotation steps between direct re-evaluations of the phase.
const ROTATION_ANCHOR: usize = 64;

// Gauss-Kronrod 10/21 abscissae on [-1, 1] (non-negative half) and weights.
#[allow(clippy::excessive_precision)]
const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_208_745_694_790,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];
// 10-point Gauss weights for the odd Kronrod abscissae XGK[1], XGK[3], ...
#[allow(clippy::excessive_precision)]
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Law coefficients in the form the integrand needs.
#[derive(Debug, Clone)]
struct Integrand<T: Real> {
    w: Vec<T>,
    b2: Vec<T>,
    sigma2: T,
    centre: T,
    /// Asymptotic phase slope without the threshold term: `c/2 - sum b^2/(8w)`.
    drift: T,
}

impl<T: Real> Integrand<T> {
    fn new(law: &GChi2Law<T>) -> Self {
        let w = law.weights().to_vec();
        let b2: Vec<T> = law.linear().iter().map(|b| *b * *b).collect();
        let eighth = lit::<T>(0.125);
        let mut drift = CompensatedSum::default();
        drift.add(law.centre() * lit::<T>(0.5));
        for (wj, bj2) in w.iter().zip(&b2) {
            drift.add(-*bj2 * eighth / *wj);
        }
        Self {
            sigma2: law.sigma() * law.sigma(),
            centre: law.centre(),
            drift: drift.value(),
            w,
            b2,
        }
    }

    /// `(theta(u) + x u / 2, 1 / (u rho(u)))` for `u > 0`.
    ///
    /// `sum atan(w u)` and `sum ln(1 + w^2 u^2) / 2` are the unwrapped argument
    /// and log-modulus of `prod (1 + i w u)`, accumulated as one running
    /// complex product (renormalized every few factors, windings counted on
    /// crossings of the negative real axis).
    fn at(&self, u: T) -> (T, T) {
        const RENORMALIZE: usize = 16;
        let half = lit::<T>(0.5);
        let eighth = lit::<T>(0.125);
        let u2 = u * u;
        let (mut re, mut im) = (T::one(), T::zero());
        let mut windings = 0i64;
        let mut log_modulus = T::zero();
        let mut cubic = T::zero();
        let mut quadratic = T::zero();
        for (j, (wj, bj2)) in self.w.iter().zip(&self.b2).enumerate() {
            let wu = *wj * u;
            let inv_q = T::one() / (T::one() + wu * wu);
            cubic += *bj2 * wu * inv_q;
            quadratic += *bj2 * inv_q;
            let was_upper = im >= T::zero();
            let next_re = re - im * wu;
            im += re * wu;
            re = next_re;
            if was_upper != (im >= T::zero()) && re < T::zero() {
                windings += if was_upper { 1 } else { -1 };
            }
            if j % RENORMALIZE == RENORMALIZE - 1 {
                let m = re.hypot(im);
                log_modulus += m.ln();
                re /= m;
                im /= m;
            }
        }
        log_modulus += re.hypot(im).ln();
        let arg = im.atan2(re) + lit::<T>(2.0 * PI * windings as f64);
        let phase = (self.centre * u + arg) * half - cubic * u2 * eighth;
        let log_rho = (self.sigma2 + quadratic) * u2 * eighth + log_modulus * half;
        (phase, (-log_rho).exp() / u)
    }

    /// Phase slope at large `u` for threshold `x`.
    fn slope(&self, x: T) -> T {
        self.drift - x * lit::<T>(0.5)
    }

    /// Upper bound on `int_U^inf 1/(u rho(u)) du`.
    fn envelope(&self, big_u: T) -> T {
        let eighth = lit::<T>(0.125);
        let u2 = big_u * big_u;
        let mut kappa = self.sigma2 * u2 * eighth;
        let mut log_small = T::zero();
        let mut log_all = T::zero();
        let mut log_big_w = T::zero();
        let mut big = 0usize;
        for (wj, bj2) in self.w.iter().zip(&self.b2) {
            let wu = (*wj * big_u).abs();
            let q = T::one() + wu * wu;
            kappa += *bj2 * u2 * eighth / q;
            let quarter_log_q = wu.hypot(T::one()).ln() * lit::<T>(0.5);
            log_all -= quarter_log_q;
            if wu >= T::one() {
                big += 1;
                log_big_w -= wj.abs().ln() * lit::<T>(0.5);
            } else {
                log_small -= quarter_log_q;
            }
        }
        let mut best = T::max_value().unwrap_or_else(|| lit(f64::MAX));
        if big > 0 {
            let k = lit::<T>(big as f64);
            // (1 + w^2 u^2)^(-1/4) <= (|w| u)^(-1/2) for the big terms
            let log_b = -kappa + (lit::<T>(2.0) / k).ln() - k * lit::<T>(0.5) * big_u.ln()
                + log_big_w
                + log_small;
            best = best.min(log_b.exp());
        }
        if self.sigma2 > T::zero() {
            // int_U^inf e^(-s^2 u^2 / 8) / u du <= 4 e^(-s^2 U^2 / 8) / (s^2 U^2)
            let log_b = -kappa + log_all + (lit::<T>(4.0) / (self.sigma2 * u2)).ln();
            best = best.min(log_b.exp());
        }
        best
    }

    /// Smallest doubling of a natural scale whose envelope is below `target`.
    fn truncation_point(&self, target: T) -> Result<(T, T)> {
        let var = {
            let mut s = self.sigma2;
            for (wj, bj2) in self.w.iter().zip(&self.b2) {
                s += lit::<T>(2.0) * *wj * *wj + *bj2;
            }
            s
        };
        let mut u = T::one() / var.sqrt();
        for _ in 0..400 {
            let bound = self.envelope(u);
            if bound <= target {
                return Ok((u, bound));
            }
            u *= lit::<T>(2.0);
        }
        Err(Error::QuadratureFailure {
            tolerance: to_f64(target),
            estimate: to_f64(self.envelope(u)),
        })
    }
}

/// A set of thresholds. Evenly spaced sets are recognised so panels can be
/// swept by phase rotation.
#[derive(Debug, Clone, Copy)]
enum Thresholds<'a, T> {
    Uniform { x0: T, dx: T, n: usize },
    Points(&'a [T]),
}

impl<'a, T: Real> Thresholds<'a, T> {
    fn of(xs: &'a [T]) -> Self {
        let n = xs.len();
        if n >= 8 {
            let x0 = xs[0];
            let dx = (xs[n - 1] - x0) / lit::<T>((n - 1) as f64);
            let scale = xs.iter().fold(T::one(), |m, x| m.max(x.abs()));
            let tol = lit::<T>(1e-13) * scale;
            let even = xs
                .iter()
                .enumerate()
                .all(|(i, x)| (*x - (x0 + dx * lit::<T>(i as f64))).abs() <= tol);
            if even && !dx.is_zero() {
                return Thresholds::Uniform { x0, dx, n };
            }
        }
        Thresholds::Points(xs)
    }

    fn len(&self) -> usize {
        match self {
            Thresholds::Uniform { n, .. } => *n,
            Thresholds::Points(xs) => xs.len(),
        }
    }
}

const NODES: usize = 21;

/// Gauss-Kronrod (10/21) panel with the integrand cached at its nodes; the
/// rule weights are folded into `kronrod` and `gauss`.
#[derive(Debug, Clone)]
struct Panel<T> {
    a: T,
    b: T,
    u: [T; NODES],
    phase: [T; NODES],
    kronrod: [T; NODES],
    gauss: [T; NODES],
}

impl<T: Real> Panel<T> {
    fn new(f: &Integrand<T>, a: T, b: T) -> Self {
        let half = lit::<T>(0.5);
        let centre = (a + b) * half;
        let hw = (b - a) * half;
        let zero = [T::zero(); NODES];
        let mut panel = Self {
            a,
            b,
            u: zero,
            phase: zero,
            kronrod: zero,
            gauss: zero,
        };
        let mut idx = 0;
        for (j, x) in XGK.iter().enumerate() {
            let gauss_w = if j % 2 == 1 { WG[j / 2] } else { 0.0 };
            let signs: &[f64] = if j == 10 { &[1.0] } else { &[-1.0, 1.0] };
            for s in signs {
                let u = centre + hw * lit::<T>(s * x);
                let (phase, amp) = f.at(u);
                panel.u[idx] = u;
                panel.phase[idx] = phase;
                panel.kronrod[idx] = hw * amp * lit::<T>(WGK[j]);
                panel.gauss[idx] = hw * amp * lit::<T>(gauss_w);
                idx += 1;
            }
        }
        panel
    }

    /// `(Kronrod estimate, |Kronrod - Gauss|)` at threshold `x`.
    fn integrate(&self, x: T) -> (T, T) {
        let (k, g) = self.rules(x);
        (k, (k - g).abs())
    }

    /// `(Kronrod, Gauss)` at threshold `x`.
    fn rules(&self, x: T) -> (T, T) {
        let half_x = x * lit::<T>(0.5);
        let mut k = T::zero();
        let mut g = T::zero();
        for m in 0..NODES {
            let s = (self.phase[m] - half_x * self.u[m]).sin();
            k += self.kronrod[m] * s;
            g += self.gauss[m] * s;
        }
        (k, g)
    }

    /// Kronrod and Gauss estimates at every threshold, written to `k` and `g`.
    fn sweep(&self, xs: &Thresholds<'_, T>, k: &mut [T], g: &mut [T]) {
        match xs {
            Thresholds::Points(points) => {
                for (i, x) in points.iter().enumerate() {
                    (k[i], g[i]) = self.rules(*x);
                }
            }
            Thresholds::Uniform { x0, dx, n } => {
                let half = lit::<T>(0.5);
                let mut rot_s = [T::zero(); NODES];
                let mut rot_c = [T::zero(); NODES];
                for m in 0..NODES {
                    (rot_s[m], rot_c[m]) = (-(*dx * half * self.u[m])).sin_cos();
                }
                let mut s = [T::zero(); NODES];
                let mut c = [T::zero(); NODES];
                for j in 0..*n {
                    if j % ROTATION_ANCHOR == 0 {
                        let half_x = (*x0 + *dx * lit::<T>(j as f64)) * half;
                        for m in 0..NODES {
                            (s[m], c[m]) = (self.phase[m] - half_x * self.u[m]).sin_cos();
                        }
                    }
                    let mut kk = [T::zero(); 3];
                    let mut gg = [T::zero(); 3];
                    for m in 0..NODES {
                        kk[m % 3] += self.kronrod[m] * s[m];
                        gg[m % 3] += self.gauss[m] * s[m];
                    }
                    k[j] = kk[0] + kk[1] + kk[2];
                    g[j] = gg[0] + gg[1] + gg[2];
                    for m in 0..NODES {
                        let next = s[m] * rot_c[m] + c[m] * rot_s[m];
                        c[m] = c[m] * rot_c[m] - s[m] * rot_s[m];
                        s[m] = next;
                    }
                }
            }
        }
    }
}

/// A panel with its Kronrod estimates and `|Kronrod - Gauss|` at every threshold.
struct Ranked<T> {
    err: f64,
    panel: Panel<T>,
    k: Vec<T>,
    e: Vec<T>,
}

impl<T: Real> Ranked<T> {
    fn new(f: &Integrand<T>, a: T, b: T, xs: &Thresholds<'_, T>) -> Self {
        let panel = Panel::new(f, a, b);
        let n = xs.len();
        let mut k = vec![T::zero(); n];
        let mut e = vec![T::zero(); n];
        panel.sweep(xs, &mut k, &mut e);
        let mut worst = T::zero();
        for (ki, ei) in k.iter().zip(e.iter_mut()) {
            *ei = (*ki - *ei).abs();
            worst = worst.max(*ei);
        }
        Self {
            err: to_f64(worst),
            panel,
            k,
            e,
        }
    }
}

impl<T> PartialEq for Ranked<T> {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl<T> Eq for Ranked<T> {}
impl<T> PartialOrd for Ranked<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Ranked<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Adapted panels in order, with the integral and error summed over them at
/// every threshold the mesh was built for.
struct Mesh<T> {
    panels: Vec<Panel<T>>,
    sums: Vec<(T, T)>,
}

/// Adaptive bisection on `[a, b]` until the summed worst-case error over
/// `xs` is below `tol`, starting from `pieces` equal panels.
fn adapt<T: Real>(
    f: &Integrand<T>,
    a: T,
    b: T,
    pieces: usize,
    xs: &Thresholds<'_, T>,
    tol: T,
) -> Result<Mesh<T>> {
    let mut heap = BinaryHeap::new();
    let mut total = 0.0;
    let step = (b - a) / lit::<T>(pieces as f64);
    for i in 0..pieces {
        let lo = a + step * lit::<T>(i as f64);
        let hi = if i + 1 == pieces { b } else { lo + step };
        let ranked = Ranked::new(f, lo, hi, xs);
        total += ranked.err;
        heap.push(ranked);
    }
    let tol = to_f64(tol);
    while total > tol {
        if heap.len() >= MAX_INTERVALS {
            return Err(Error::QuadratureFailure {
                tolerance: tol / PI,
                estimate: total / PI,
            });
        }
        let Some(worst) = heap.pop() else { break };
        total -= worst.err;
        let (lo, hi) = (worst.panel.a, worst.panel.b);
        let mid = (lo + hi) * lit::<T>(0.5);
        if !(mid > lo && mid < hi) {
            // cannot split further at this precision
            return Err(Error::QuadratureFailure {
                tolerance: tol / PI,
                estimate: (total + worst.err) / PI,
            });
        }
        for (l, h) in [(lo, mid), (mid, hi)] {
            let ranked = Ranked::new(f, l, h, xs);
            total += ranked.err;
            heap.push(ranked);
        }
        // guard against accumulated round-off in the running total
        if total <= tol {
            total = heap.iter().map(|r| r.err).sum();
        }
    }
    let mut ranked: Vec<Ranked<T>> = heap.into_vec();
    ranked.sort_by(|p, q| p.panel.a.partial_cmp(&q.panel.a).unwrap_or(Ordering::Equal));
    let n = xs.len();
    let mut sums = vec![CompensatedSum::default(); n];
    let mut errs = vec![T::zero(); n];
    for r in &ranked {
        for i in 0..n {
            sums[i].add(r.k[i]);
            errs[i] += r.e[i];
        }
    }
    Ok(Mesh {
        panels: ranked.into_iter().map(|r| r.panel).collect(),
        sums: sums.iter().zip(errs).map(|(s, e)| (s.value(), e)).collect(),
    })
}

/// `(integral, error)` of one threshold over `[a, b]`.
fn integrate_single<T: Real>(
    f: &Integrand<T>,
    a: T,
    b: T,
    pieces: usize,
    x: T,
    tol: T,
) -> Result<(T, T)> {
    let mesh = adapt(f, a, b, pieces, &Thresholds::Points(&[x]), tol)?;
    Ok(mesh.sums[0])
}

/// Epsilon-algorithm limit of a sequence of partial sums, from the last
/// entries of the highest complete even column.
fn wynn_epsilon<T: Real>(s: &[T]) -> T {
    let n = s.len();
    let mut best = s[n - 1];
    let mut prev = vec![T::zero(); n + 1];
    let mut cur = s.to_vec();
    for k in 1..n {
        let mut next = Vec::with_capacity(cur.len() - 1);
        for i in 0..cur.len() - 1 {
            let d = cur[i + 1] - cur[i];
            if d.is_zero() || !d.is_finite() {
                return best;
            }
            next.push(prev[i + 1] + T::one() / d);
        }
        prev = cur;
        cur = next;
        if k % 2 == 0 {
            let e = cur[cur.len() - 1];
            if !e.is_finite() {
                return best;
            }
            best = e;
        }
        if cur.len() < 2 {
            break;
        }
    }
    best
}

/// Survival function of one law with an adaptive mesh built for a set of thresholds.
#[derive(Debug, Clone)]
pub struct SurvivalBatch<T: Real> {
    f: Integrand<T>,
    degenerate: bool,
    panels: Vec<Panel<T>>,
    cut: T,
    end: T,
    trunc_err: T,
    tol: T,
    /// Thresholds the mesh was adapted for, with their panel sums.
    built_for: Vec<T>,
    built_sums: Vec<(T, T)>,
}

impl<T: Real> SurvivalBatch<T> {
    /// Builds a mesh on which every `x` in `xs` meets `tol`.
    pub fn new(law: &GChi2Law<T>, xs: &[T], tol: T) -> Result<Self> {
        let f = Integrand::new(law);
        if law.is_degenerate() {
            return Ok(Self {
                f,
                degenerate: true,
                panels: Vec::new(),
                cut: T::zero(),
                end: T::zero(),
                trunc_err: T::zero(),
                tol,
                built_for: Vec::new(),
                built_sums: Vec::new(),
            });
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("x", "thresholds must be finite"));
        }
        Self::new_from_integrand(f, xs, tol)
    }

    pub fn tolerance(&self) -> T {
        self.tol
    }

    /// `(P[Q >= x], error bound)` on the cached mesh, unclamped.
    pub fn raw(&self, x: T) -> Result<(T, T)> {
        if self.degenerate {
            let p = if x <= self.f.centre {
                T::one()
            } else {
                T::zero()
            };
            return Ok((p, T::zero()));
        }
        let mut sum = CompensatedSum::default();
        let mut err = self.trunc_err;
        for p in &self.panels {
            let (k, e) = p.integrate(x);
            sum.add(k);
            err += e;
        }
        if self.cut < self.end {
            let (tail, tail_err) = self.tail(x)?;
            sum.add(tail);
            err += tail_err;
        }
        let pi = lit::<T>(PI);
        Ok((lit::<T>(0.5) + sum.value() / pi, err / pi))
    }

    /// Oscillatory remainder `int_cut^inf`, summed over half-periods of the
    /// asymptotic phase and extrapolated.
    fn tail(&self, x: T) -> Result<(T, T)> {
        let pi = lit::<T>(PI);
        let budget = self.tol * pi * lit::<T>(0.25);
        let slope = self.f.slope(x).abs();
        let span = self.end - self.cut;
        if slope * span <= pi * lit::<T>(MAX_TAIL_CHUNKS as f64 / 4.0) {
            // few oscillations left: integrate directly on a geometric partition
            let ratio = to_f64(self.end / self.cut).log2().ceil().max(1.0) as usize;
            let pieces = ratio
                .max((to_f64(slope * span / pi)).ceil() as usize)
                .min(MAX_INTERVALS / 2);
            return integrate_single(&self.f, self.cut, self.end, pieces.max(1), x, budget);
        }
        let h = pi / slope;
        let chunk_tol = budget / lit::<T>(2.0 * MAX_TAIL_CHUNKS as f64);
        let mut partial = Vec::new();
        let mut sum = CompensatedSum::default();
        let mut quad_err = T::zero();
        let mut estimates: Vec<T> = Vec::new();
        let mut a = self.cut;
        for m in 0..MAX_TAIL_CHUNKS {
            let b = a + h;
            let (v, e) = integrate_single(&self.f, a, b, 1, x, chunk_tol)?;
            sum.add(v);
            quad_err += e;
            partial.push(sum.value());
            a = b;
            if m + 1 >= MIN_TAIL_CHUNKS {
                let window = &partial[partial.len().saturating_sub(WYNN_WINDOW)..];
                let est = wynn_epsilon(window);
                estimates.push(est);
                let n = estimates.len();
                if n >= 3 {
                    let spread = (estimates[n - 1] - estimates[n - 2]).abs()
                        + (estimates[n - 1] - estimates[n - 3]).abs();
                    let remaining = self.f.envelope(a);
                    if spread + quad_err <= budget || remaining + quad_err <= budget {
                        let value = if remaining <= spread {
                            sum.value()
                        } else {
                            est
                        };
                        let err = quad_err + spread.min(remaining);
                        return Ok((value, err));
                    }
                }
            }
        }
        Err(Error::QuadratureFailure {
            tolerance: to_f64(self.tol),
            estimate: to_f64(quad_err / pi),
        })
    }

    /// `P[Q >= x]`, clamped to `[0, 1]` and snapped to 0 or 1 within tolerance.
    /// Falls back to a dedicated mesh when the cached one is too coarse at `x`.
    pub fn survival(&self, x: T) -> Result<T> {
        let (p, err) = self.raw(x)?;
        if err <= self.tol {
            return Ok(clamp(p, self.tol));
        }
        let own = SurvivalBatch::new_from_integrand(self.f.clone(), &[x], self.tol)?;
        let (p, err) = own.raw(x)?;
        if err > self.tol {
            return Err(Error::QuadratureFailure {
                tolerance: to_f64(self.tol),
                estimate: to_f64(err),
            });
        }
        Ok(clamp(p, self.tol))
    }

    fn new_from_integrand(f: Integrand<T>, xs: &[T], tol: T) -> Result<Self> {
        let pi = lit::<T>(PI);
        let (end, trunc_err) = f.truncation_point(tol * pi * lit::<T>(0.25))?;
        let two_pi = lit::<T>(2.0 * PI);
        let max_slope = xs
            .iter()
            .fold(f.slope(T::zero()).abs(), |m, x| m.max(f.slope(*x).abs()));
        let cut = if max_slope * end > lit::<T>(CYCLE_CAP) * two_pi {
            lit::<T>(CYCLE_CAP) * two_pi / max_slope
        } else {
            end
        };
        let cycles = to_f64(max_slope * cut / two_pi);
        let pieces = (cycles.ceil() as usize).clamp(4, CYCLE_CAP as usize);
        let mesh = adapt(
            &f,
            T::zero(),
            cut,
            pieces,
            &Thresholds::of(xs),
            tol * pi * lit::<T>(0.5),
        )?;
        Ok(Self {
            f,
            degenerate: false,
            panels: mesh.panels,
            cut,
            end,
            trunc_err,
            tol,
            built_for: xs.to_vec(),
            built_sums: mesh.sums,
        })
    }

    /// [`Self::raw`] at every threshold, sweeping each panel once.
    pub fn raw_all(&self, xs: &[T]) -> Result<Vec<(T, T)>> {
        if self.degenerate {
            return xs.iter().map(|x| self.raw(*x)).collect();
        }
        let n = xs.len();
        let mut sums = vec![CompensatedSum::default(); n];
        let mut errs = vec![self.trunc_err; n];
        if xs == self.built_for.as_slice() {
            for (i, (k, e)) in self.built_sums.iter().enumerate() {
                sums[i].add(*k);
                errs[i] += *e;
            }
        } else {
            let set = Thresholds::of(xs);
            let mut k = vec![T::zero(); n];
            let mut g = vec![T::zero(); n];
            for p in &self.panels {
                p.sweep(&set, &mut k, &mut g);
                for i in 0..n {
                    sums[i].add(k[i]);
                    errs[i] += (k[i] - g[i]).abs();
                }
            }
        }
        let pi = lit::<T>(PI);
        let mut out = Vec::with_capacity(n);
        for (i, x) in xs.iter().enumerate() {
            if self.cut < self.end {
                let (tail, tail_err) = self.tail(*x)?;
                sums[i].add(tail);
                errs[i] += tail_err;
            }
            out.push((lit::<T>(0.5) + sums[i].value() / pi, errs[i] / pi));
        }
        Ok(out)
    }

    /// [`Self::survival`] at every threshold.
    pub fn survival_all(&self, xs: &[T]) -> Result<Vec<T>> {
        let raw = self.raw_all(xs)?;
        xs.iter()
            .zip(raw)
            .map(|(x, (p, err))| {
                if err <= self.tol {
                    Ok(clamp(p, self.tol))
                } else {
                    self.survival(*x)
                }
            })
            .collect()
    }
}

fn clamp<T: Real>(p: T, tol: T) -> T {
    if p <= tol {
        T::zero()
    } else if p >= T::one() - tol {
        T::one()
    } else {
        p
    }
}

/// `P[Q >= x]` within [`TOL_CDF`].
pub fn survival<T: Real>(law: &GChi2Law<T>, x: T) -> Result<T> {
    survival_with_tolerance(law, x, lit(TOL_CDF))
}

/// `P[Q >= x]` within `tol`.
pub fn survival_with_tolerance<T: Real>(law: &GChi2Law<T>, x: T, tol: T) -> Result<T> {
    SurvivalBatch::new(law, &[x], tol)?.survival(x)
}

/// `(alpha, beta) = (P[L >= eta | H0], P[L >= eta | H1])`.
pub fn alpha_beta<T: Real>(law0: &GChi2Law<T>, law1: &GChi2Law<T>, eta: T) -> Result<(T, T)> {
    if eta == -T::INFINITY {
        return Ok((T::one(), T::one()));
    }
    if eta == T::INFINITY {
        return Ok((T::zero(), T::zero()));
    }
    Ok((survival(law0, eta)?, survival(law1, eta)?))
}

/// Interval holding all but about `2e-7` of the law's mass. A Chernoff bound
/// caps the `mean +- k sd` expansion on each side; an evenly spaced ladder up
/// to the caps locates the crossing rungs, which are then subdivided.
pub fn quantile_bracket<T: Real>(law: &GChi2Law<T>) -> Result<(T, T)> {
    let mean = law.mean();
    if law.is_degenerate() {
        let delta = lit::<T>(1e-9) * mean.abs().max(T::one());
        return Ok((mean - delta, mean + delta));
    }
    let tol = lit::<T>(BRACKET_TOL);
    let target = lit::<T>(BRACKET_TAIL);
    let log_target = BRACKET_TAIL.ln();
    let cap_hi = lit::<T>(chernoff_limit(law, 1.0, log_target));
    let cap_lo = -lit::<T>(chernoff_limit(law, -1.0, log_target));
    let step = (cap_hi - cap_lo) / lit::<T>((BRACKET_RUNGS - 1) as f64);
    let rungs: Vec<T> = (0..BRACKET_RUNGS)
        .map(|i| {
            if i + 1 == BRACKET_RUNGS {
                cap_hi
            } else {
                cap_lo + step * lit::<T>(i as f64)
            }
        })
        .collect();
    let rung_batch = SurvivalBatch::new(law, &rungs, tol)?;
    let p = rung_batch.raw_all(&rungs)?;
    // the caps themselves are guaranteed, whatever the quadrature says there
    let lo_idx = p
        .iter()
        .rposition(|(v, _)| *v >= T::one() - target)
        .unwrap_or(0);
    let hi_idx = p
        .iter()
        .position(|(v, _)| *v <= target)
        .unwrap_or(BRACKET_RUNGS - 1);
    let lo_cell: Vec<T> = (1..BRACKET_REFINE)
        .map(|i| rungs[lo_idx] + step * lit::<T>(i as f64 / BRACKET_REFINE as f64))
        .filter(|x| *x < cap_hi)
        .collect();
    let hi_cell: Vec<T> = (1..BRACKET_REFINE)
        .map(|i| rungs[hi_idx] - step * lit::<T>(i as f64 / BRACKET_REFINE as f64))
        .filter(|x| *x > cap_lo)
        .collect();
    let mut xs = lo_cell.clone();
    xs.extend(&hi_cell);
    if xs.is_empty() {
        return Ok((rungs[lo_idx], rungs[hi_idx]));
    }
    // the rung mesh usually resolves the cells too; otherwise adapt a new one
    let mut refined = rung_batch.raw_all(&xs)?;
    if refined.iter().any(|(_, err)| *err > tol) {
        refined = SurvivalBatch::new(law, &xs, tol)?.raw_all(&xs)?;
    }
    let (lo_p, hi_p) = refined.split_at(lo_cell.len());
    let mut lo = rungs[lo_idx];
    for (x, (p, _)) in lo_cell.iter().zip(lo_p) {
        if *p >= T::one() - target {
            lo = *x;
        } else {
            break;
        }
    }
    let mut hi = rungs[hi_idx];
    for (x, (p, _)) in hi_cell.iter().zip(hi_p) {
        if *p <= target {
            hi = *x;
        } else {
            break;
        }
    }
    Ok((lo, hi))
}

/// Smallest `x` found with Chernoff bound `ln P[sign Q >= x] <= log_target`,
/// from the cumulant generating function
/// `K(s) = c s + sigma^2 s^2/2 + sum [-ln(1 - 2 w s)/2 + b^2 s^2 / (2 (1 - 2 w s))]`.
/// Any `s` in the domain gives a valid bound, so an inexact minimizer is safe.
fn chernoff_limit<T: Real>(law: &GChi2Law<T>, sign: f64, log_target: f64) -> f64 {
    let w: Vec<f64> = law.weights().iter().map(|x| sign * to_f64(*x)).collect();
    let b2: Vec<f64> = law.linear().iter().map(|x| to_f64(*x).powi(2)).collect();
    let sigma2 = to_f64(law.sigma()).powi(2);
    let c = sign * to_f64(law.centre());
    let bound = |s: f64| -> f64 {
        let mut k = c * s + 0.5 * sigma2 * s * s;
        for (wj, bj2) in w.iter().zip(&b2) {
            let q = 1.0 - 2.0 * wj * s;
            k += -0.5 * q.ln() + 0.5 * bj2 * s * s / q;
        }
        (k - log_target) / s
    };
    let scale = 1.0 / to_f64(law.variance()).sqrt();
    let w_max = w.iter().fold(0.0_f64, |m, x| m.max(*x));
    let mut lo = (scale * 1e-8).ln();
    let mut hi = if w_max > 0.0 {
        (0.5 / w_max).ln() - 1e-12
    } else {
        (scale * 1e8).ln()
    };
    lo = lo.min(hi - 1.0);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut best = f64::INFINITY;
    let mut eval = |t: f64| {
        let v = bound(t.exp());
        let v = if v.is_finite() { v } else { f64::INFINITY };
        best = best.min(v);
        v
    };
    let mut c1 = hi - (hi - lo) * inv_phi;
    let mut d1 = lo + (hi - lo) * inv_phi;
    let mut fc = eval(c1);
    let mut fd = eval(d1);
    for _ in 0..200 {
        if fc <= fd {
            hi = d1;
            d1 = c1;
            fd = fc;
            c1 = hi - (hi - lo) * inv_phi;
            fc = eval(c1);
        } else {
            lo = c1;
            c1 = d1;
            fc = fd;
            d1 = lo + (hi - lo) * inv_phi;
            fd = eval(d1);
        }
    }
    best
}
