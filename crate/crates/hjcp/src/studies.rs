//! Monte-Carlo studies backing the statistical claims: marginal coverage of
//! the calibrated lower bound, the Beta law of conditional coverage, and the
//! grid-oracle comparison of a learned value.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use hjcp_core::certify::BetaDist;
use hjcp_core::conformal::{conditional_coverage_beta, conformal_quantile, lower_bound_with, CalibrationPoint};
use hjcp_core::grid::{GridValueFunction, StateGrid};
use hjcp_core::rng;
use hjcp_core::ValueFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub alpha: f64,
    pub target: f64,
    pub mean_coverage: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub resamples: usize,
    pub n_cal: usize,
    pub n_test: usize,
}

/// Split `pool` at random into `n_cal` calibration and `n_test` test points,
/// `resamples` times, and record how often `V - q <= V*` on the test part.
pub fn marginal_coverage(
    pool: &[CalibrationPoint],
    n_cal: usize,
    n_test: usize,
    resamples: usize,
    alphas: &[f64],
    seed: u64,
) -> anyhow::Result<Vec<CoverageRow>> {
    anyhow::ensure!(n_cal + n_test <= pool.len(), "pool of {} is smaller than {n_cal} + {n_test}", pool.len());
    anyhow::ensure!(resamples > 0 && n_test > 0, "resamples and n_test must be positive");
    let mut r = rng::Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let mut cover = vec![Vec::with_capacity(resamples); alphas.len()];
    for _ in 0..resamples {
        let (chosen, _) = idx.partial_shuffle(&mut r, n_cal + n_test);
        let (cal, test) = chosen.split_at(n_cal);
        let scores: Vec<f64> = cal.iter().map(|&i| pool[i].score).collect();
        for (a, &alpha) in alphas.iter().enumerate() {
            let q = conformal_quantile(&scores, alpha)?;
            let hit = test
                .iter()
                .filter(|&&i| lower_bound_with(pool[i].v_theta, q) <= pool[i].v_star)
                .count();
            cover[a].push(hit as f64 / n_test as f64);
        }
    }
    Ok(alphas
        .iter()
        .zip(cover)
        .map(|(&alpha, c)| CoverageRow {
            alpha,
            target: 1.0 - alpha,
            mean_coverage: c.iter().sum::<f64>() / c.len() as f64,
            min_coverage: c.iter().copied().fold(f64::INFINITY, f64::min),
            max_coverage: c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            resamples,
            n_cal,
            n_test,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalStudy {
    pub n: usize,
    pub alpha: f64,
    pub resamples: usize,
    pub beta_a: f64,
    pub beta_b: f64,
    /// Mean of the stated Beta law, `(n + 1 - l) / (n + 2)`.
    pub stated_mean: f64,
    pub empirical_mean: f64,
    pub ks_statistic: f64,
}

/// Exact conditional coverage of the conformal quantile for continuous
/// Exp(1) scores: a calibration set with quantile `q` covers a fresh score
/// with probability `1 - exp(-q)`.
pub fn conditional_coverage(n: usize, alpha: f64, resamples: usize, seed: u64) -> anyhow::Result<ConditionalStudy> {
    let law = conditional_coverage_beta(n, alpha)?;
    let beta = BetaDist::new(law.a, law.b)?;
    let mut r = rng::Rng::seed_from_u64(seed);
    let mut cov = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let scores: Vec<f64> = (0..n).map(|_| -(1.0 - r.gen::<f64>()).ln()).collect();
        let q = conformal_quantile(&scores, alpha)?;
        cov.push(1.0 - (-q).exp());
    }
    let ks = ks_statistic(&mut cov.clone(), |x| beta.cdf(x).unwrap_or(f64::NAN));
    Ok(ConditionalStudy {
        n,
        alpha,
        resamples,
        beta_a: law.a,
        beta_b: law.b,
        stated_mean: (n as f64 + 1.0 - law.l as f64) / (n as f64 + 2.0),
        empirical_mean: cov.iter().sum::<f64>() / cov.len() as f64,
        ks_statistic: ks,
    })
}

/// One-sample Kolmogorov-Smirnov distance between `samples` and `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub nodes: usize,
    pub sign_agreement: f64,
    pub sup_error: f64,
    pub mean_abs_error: f64,
}

pub fn compare_to_oracle<V: ValueFunction + ?Sized>(grid: &StateGrid, oracle: &GridValueFunction, v: &V) -> OracleComparison {
    let mut agree = 0usize;
    let mut sup = 0.0_f64;
    let mut sum = 0.0;
    for (i, x) in grid.nodes().enumerate() {
        let o = oracle.values[i];
        let l = v.value(&x);
        if (o > 0.0) == (l > 0.0) {
            agree += 1;
        }
        let e = (o - l).abs();
        sup = sup.max(e);
        sum += e;
    }
    let n = grid.len();
    OracleComparison {
        nodes: n,
        sign_agreement: agree as f64 / n as f64,
        sup_error: sup,
        mean_abs_error: sum / n as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hjcp_core::State;

    #[test]
    fn ks_of_exact_quantiles_is_small() {
        let n = 1000;
        let mut s: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_statistic(&mut s, |x| x);
        assert!((d - 0.5 / n as f64).abs() < 1e-12);
        let mut shifted: Vec<f64> = (0..n).map(|i| 0.5 + 0.5 * (i as f64 + 0.5) / n as f64).collect();
        assert!(ks_statistic(&mut shifted, |x| x) > 0.49);
    }

    #[test]
    fn coverage_of_exchangeable_scores() {
        let mut r = rng::Rng::seed_from_u64(3);
        let pool: Vec<CalibrationPoint> = (0..3000)
            .map(|_| CalibrationPoint::new(State::from(vec![0.0]), r.gen::<f64>(), 0.0))
            .collect();
        let rows = marginal_coverage(&pool, 100, 500, 100, &[0.1, 0.2], 1).unwrap();
        for row in rows {
            assert!((row.mean_coverage - row.target).abs() < 0.03, "{row:?}");
        }
        assert!(marginal_coverage(&pool, 3000, 1, 1, &[0.1], 1).is_err());
    }

    #[test]
    fn conditional_law_shape() {
        let s = conditional_coverage(19, 0.05, 300, 2).unwrap();
        assert_eq!((s.beta_a, s.beta_b), (19.0, 1.0));
        assert!((s.stated_mean - 19.0 / 21.0).abs() < 1e-15);
        assert!(s.ks_statistic < 0.15, "{s:?}");
    }
}
