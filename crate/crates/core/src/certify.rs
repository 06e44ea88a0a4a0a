//! Trajectory-level safety certification.
//!
//! Run `N` i.i.d. episodes of a deployed policy, record each trajectory's
//! minimum margin `J`, and count the failures `k` with `J <= 0`. The safety
//! probability `P(J > 0)` then follows `Beta(N - k, k + 1)`.

use alloc::vec::Vec;

use libm::{exp, lgamma, log};
use rand::{Rng as _, SeedableRng};

use crate::error::{Error, Result};
use crate::filter::{run_episode_seeded, Policy};
use crate::rng;
use crate::system::{Environment, State};
use crate::value::ValueFunction;

const CF_MAX_ITER: usize = 10_000;
const CF_EPS: f64 = 1e-15;
const TINY: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaDist {
    pub a: f64,
    pub b: f64,
}

impl BetaDist {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "beta shape parameters must be positive and finite, got ({a}, {b})"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn variance(&self) -> f64 {
        let s = self.a + self.b;
        self.a * self.b / (s * s * (s + 1.0))
    }

    fn ln_beta(&self) -> f64 {
        lgamma(self.a) + lgamma(self.b) - lgamma(self.a + self.b)
    }

    pub fn pdf(&self, p: f64) -> f64 {
        if !(0.0..=1.0).contains(&p) {
            return 0.0;
        }
        if p == 0.0 || p == 1.0 {
            let edge = if p == 0.0 { self.a } else { self.b };
            return if edge < 1.0 {
                f64::INFINITY
            } else if edge > 1.0 {
                0.0
            } else {
                exp(-self.ln_beta())
            };
        }
        exp((self.a - 1.0) * log(p) + (self.b - 1.0) * log(1.0 - p) - self.ln_beta())
    }

    /// Regularized incomplete beta `I_p(a, b)`.
    pub fn cdf(&self, p: f64) -> Result<f64> {
        if p.is_nan() {
            return Err(Error::Numeric("beta cdf at NaN"));
        }
        if p <= 0.0 {
            return Ok(0.0);
        }
        if p >= 1.0 {
            return Ok(1.0);
        }
        let (a, b) = (self.a, self.b);
        let front = exp(a * log(p) + b * log(1.0 - p) - self.ln_beta());
        // the continued fraction converges fast below the mode-ish split point
        if p < (a + 1.0) / (a + b + 2.0) {
            Ok(front * beta_cf(a, b, p)? / a)
        } else {
            Ok(1.0 - front * beta_cf(b, a, 1.0 - p)? / b)
        }
    }

    /// Inverse cdf by bisection.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Config(alloc::format!("quantile level {q} outside [0, 1]")));
        }
        if q == 0.0 {
            return Ok(0.0);
        }
        if q == 1.0 {
            return Ok(1.0);
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while hi - lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid)? < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Equal-tailed interval holding `level` of the mass.
    pub fn central_interval(&self, level: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::Config(alloc::format!("credible level {level} outside [0, 1]")));
        }
        let tail = 0.5 * (1.0 - level);
        Ok((self.quantile(tail)?, self.quantile(1.0 - tail)?))
    }

    /// `points` evenly spaced `(p, pdf(p))` pairs over the open unit interval.
    pub fn pdf_curve(&self, points: usize) -> Vec<(f64, f64)> {
        (0..points)
            .map(|i| {
                let p = (i as f64 + 0.5) / points as f64;
                (p, self.pdf(p))
            })
            .collect()
    }
}

/// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            return Ok(h);
        }
    }
    Err(Error::Numeric("incomplete beta continued fraction did not converge"))
}

/// Minimum failure margin along a trajectory, initial state included.
pub fn trajectory_margin<E: Environment + ?Sized>(env: &E, trajectory: &[State]) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    Ok(min_of(trajectory.iter().map(|x| env.margin(x))))
}

fn min_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificationResult {
    pub n_cert: usize,
    pub k: usize,
    pub beta_a: f64,
    pub beta_b: f64,
    pub mean: f64,
    /// `(level, lo, hi)` per requested level.
    pub intervals: Vec<(f64, f64, f64)>,
    pub margins: Vec<f64>,
    /// Every trial failed, so `Beta(0, N + 1)` is not a distribution. Mean and
    /// intervals are then reported as zero.
    pub degenerate: bool,
}

impl CertificationResult {
    /// Posterior from per-trial margins; a trial fails when its margin is `<= 0`.
    pub fn from_margins(margins: Vec<f64>, levels: &[f64]) -> Result<Self> {
        let n_cert = margins.len();
        if n_cert == 0 {
            return Err(Error::Empty("certification trials"));
        }
        let k = margins.iter().filter(|&&m| !(m > 0.0)).count();
        let beta_a = (n_cert - k) as f64;
        let beta_b = (k + 1) as f64;
        let degenerate = k == n_cert;
        let mut intervals = Vec::with_capacity(levels.len());
        let mean = if degenerate {
            for &level in levels {
                intervals.push((level, 0.0, 0.0));
            }
            0.0
        } else {
            let d = BetaDist::new(beta_a, beta_b)?;
            for &level in levels {
                let (lo, hi) = d.central_interval(level)?;
                intervals.push((level, lo, hi));
            }
            d.mean()
        };
        Ok(Self {
            n_cert,
            k,
            beta_a,
            beta_b,
            mean,
            intervals,
            margins,
            degenerate,
        })
    }

    pub fn posterior(&self) -> Option<BetaDist> {
        BetaDist::new(self.beta_a, self.beta_b).ok()
    }
}

/// Run `n_cert` episodes from i.i.d. initial states and return the posterior.
pub fn certify<E, V>(
    env: &E,
    policy: &Policy<'_, V>,
    n_cert: usize,
    seed: u64,
    levels: &[f64],
) -> Result<CertificationResult>
where
    E: Environment + ?Sized,
    V: ValueFunction,
{
    if n_cert == 0 {
        return Err(Error::Config("n_cert must be >= 1".into()));
    }
    let mut margins = Vec::with_capacity(n_cert);
    for i in 0..n_cert {
        let ep = run_episode_seeded(env, policy, env.horizon(), rng::derive_seed(seed, i as u64))?;
        margins.push(trajectory_margin(env, &ep.trajectory)?);
    }
    CertificationResult::from_margins(margins, levels)
}

/// Fraction of simulated certifications whose central interval at `level`
/// contains `true_p`, with Bernoulli(`true_p`) trial outcomes.
pub fn coverage_selfcheck(true_p: f64, n_cert: usize, repetitions: usize, level: f64, seed: u64) -> Result<f64> {
    if !(true_p > 0.0 && true_p < 1.0) {
        return Err(Error::Config(alloc::format!("true_p must lie in (0, 1), got {true_p}")));
    }
    if n_cert == 0 || repetitions == 0 {
        return Err(Error::Config("n_cert and repetitions must be >= 1".into()));
    }
    let mut r = rng::Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..repetitions {
        let margins: Vec<f64> = (0..n_cert)
            .map(|_| if r.gen::<f64>() < true_p { 1.0 } else { -1.0 })
            .collect();
        let res = CertificationResult::from_margins(margins, &[level])?;
        let (_, lo, hi) = res.intervals[0];
        if lo <= true_p && true_p <= hi {
            hits += 1;
        }
    }
    Ok(hits as f64 / repetitions as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::highway::Highway;
    use crate::systems::DoubleIntegrator;
    use crate::value::Constant;
    use proptest::prelude::{prop_assert, proptest};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_cdf_is_identity() {
        let d = BetaDist::new(1.0, 1.0).unwrap();
        for i in 0..=20 {
            let p = i as f64 / 20.0;
            assert!(close(d.cdf(p).unwrap(), p, 1e-12));
        }
    }

    #[test]
    fn closed_forms() {
        let d = BetaDist::new(2.0, 2.0).unwrap();
        assert!(close(d.cdf(0.5).unwrap(), 0.5, 1e-12));
        let d = BetaDist::new(48.0, 1.0).unwrap();
        assert!(close(d.cdf(0.9).unwrap(), libm::pow(0.9, 48.0), 1e-12));
        // I_p(1, b) = 1 - (1 - p)^b
        let d = BetaDist::new(1.0, 7.0).unwrap();
        assert!(close(d.cdf(0.2).unwrap(), 1.0 - libm::pow(0.8, 7.0), 1e-12));
        // I_p(2, 2) = 3p^2 - 2p^3
        let d = BetaDist::new(2.0, 2.0).unwrap();
        let p = 0.3;
        assert!(close(d.cdf(p).unwrap(), 3.0 * p * p - 2.0 * p * p * p, 1e-12));
    }

    #[test]
    fn pdf_integrates_to_one() {
        for (a, b) in [(1.0, 1.0), (2.0, 5.0), (48.0, 3.0), (90.0, 10.0), (1.0, 101.0)] {
            let d = BetaDist::new(a, b).unwrap();
            let n = 20_000;
            let total: f64 = d.pdf_curve(n).iter().map(|&(_, f)| f).sum::<f64>() / n as f64;
            assert!(close(total, 1.0, 1e-3), "({a},{b}) integrates to {total}");
        }
    }

    #[test]
    fn pdf_edges() {
        assert_eq!(BetaDist::new(2.0, 2.0).unwrap().pdf(0.0), 0.0);
        assert!(BetaDist::new(0.5, 2.0).unwrap().pdf(0.0).is_infinite());
        assert!(close(BetaDist::new(1.0, 3.0).unwrap().pdf(0.0), 3.0, 1e-12));
        assert_eq!(BetaDist::new(2.0, 2.0).unwrap().pdf(1.5), 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(BetaDist::new(0.0, 1.0).is_err());
        assert!(BetaDist::new(1.0, -1.0).is_err());
        assert!(BetaDist::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn posterior_examples() {
        let r = CertificationResult::from_margins(vec![1.0; 100], &[0.9]).unwrap();
        assert_eq!((r.k, r.beta_a, r.beta_b), (0, 100.0, 1.0));
        assert!(close(r.mean, 100.0 / 101.0, 1e-15));
        let mut m = vec![0.5; 50];
        m[3] = -0.1;
        m[7] = 0.0;
        let r = CertificationResult::from_margins(m, &[0.9, 0.99]).unwrap();
        assert_eq!((r.k, r.beta_a, r.beta_b), (2, 48.0, 3.0));
        assert!(close(r.mean, 48.0 / 51.0, 1e-15));
        let (_, lo90, hi90) = r.intervals[0];
        let (_, lo99, hi99) = r.intervals[1];
        assert!(lo99 < lo90 && lo90 < r.mean && r.mean < hi90 && hi90 < hi99);
    }

    #[test]
    fn all_failures_are_degenerate() {
        let r = CertificationResult::from_margins(vec![-1.0; 10], &[0.9]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.beta_a, 0.0);
        assert_eq!(r.intervals, vec![(0.9, 0.0, 0.0)]);
        assert!(r.posterior().is_none());
    }

    #[test]
    fn margin_is_min_over_trajectory() {
        let di = DoubleIntegrator::default();
        let traj = |ps: &[f64]| ps.iter().map(|&p| State::from(vec![p, 0.0])).collect::<Vec<_>>();
        // h = 1 - |p|
        assert!(close(trajectory_margin(&di, &traj(&[-2.0, 0.0, -1.0])).unwrap(), -1.0, 1e-15));
        assert!(close(trajectory_margin(&di, &traj(&[0.3])).unwrap(), 0.7, 1e-15));
        assert!(trajectory_margin(&di, &[]).is_err());
    }

    #[test]
    fn selfcheck_covers() {
        let c = coverage_selfcheck(0.9, 100, 200, 0.9, 7).unwrap();
        assert!(c >= 0.85, "coverage {c}");
        assert_eq!(coverage_selfcheck(0.9, 100, 50, 1.0, 7).unwrap(), 1.0);
        let c = coverage_selfcheck(0.9, 1, 1000, 0.9, 7).unwrap();
        assert!(c >= 0.85, "N = 1 coverage {c}");
    }

    #[test]
    fn variance_shrinks_with_trials() {
        let mut prev = f64::INFINITY;
        for n in [10usize, 20, 50, 100, 200, 500] {
            let k = n / 10;
            let v = BetaDist::new((n - k) as f64, (k + 1) as f64).unwrap().variance();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn certify_counts_match_margins() {
        let hw = Highway::default();
        let r = certify::<_, Constant>(&hw, &Policy::Nominal, 20, 3, &[0.9]).unwrap();
        let k = r.margins.iter().filter(|&&m| m <= 0.0).count();
        assert_eq!(r.k, k);
        assert_eq!(r.beta_a, (20 - k) as f64);
        assert_eq!(r.beta_b, (k + 1) as f64);
        let again = certify::<_, Constant>(&hw, &Policy::Nominal, 20, 3, &[0.9]).unwrap();
        assert_eq!(r, again);
    }

    proptest! {
        #[test]
        fn cdf_monotone_and_inverted(a in 0.5f64..200.0, b in 0.5f64..200.0, p in 0.001f64..0.999, dp in 0.0f64..0.1) {
            let d = BetaDist::new(a, b).unwrap();
            let c = d.cdf(p).unwrap();
            prop_assert!(d.cdf((p + dp).min(1.0)).unwrap() >= c - 1e-12);
            prop_assert!((0.0..=1.0).contains(&c));
            if c > 1e-9 && c < 1.0 - 1e-9 {
                let back = d.cdf(d.quantile(c).unwrap()).unwrap();
                prop_assert!((back - c).abs() < 1e-6);
            }
        }
    }
}
