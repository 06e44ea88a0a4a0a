//! Split conformal calibration of learned safety values.
//!
//! For a learned value `V` with greedy safe policy, the achieved safety
//! return `V*` from a state is obtained by rolling the safe policy forward
//! and folding the discounted safety recursion backward:
//!
//! ```text
//! V*(x_i) = (1 - gamma) h(x_i) + gamma * min(h(x_i), V*(x_{i+1}))
//! ```
//!
//! with `V*(x_k) = h(x_k)` at the first failing state and `V*(x_H) = V(x_H)`
//! at the horizon. The one-sided score `max(0, V - V*)` measures safety
//! overestimation; its conformal quantile `q` gives the lower bound
//! `V(x) - q` that covers `V*` with probability at least `1 - alpha`.
//!
//! The horizon bootstrap reuses the network being calibrated, so scores
//! are only as honest as `V` is at the states reached after `H` steps.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::learn::threshold_switch;
use crate::rng;
use crate::system::{ControlGrid, ControlSystem, Environment, State};
use crate::value::{greedy_index, ValueFunction};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPoint {
    pub state: State,
    pub v_theta: f64,
    pub v_star: f64,
    pub score: f64,
}

impl CalibrationPoint {
    pub fn new(state: State, v_theta: f64, v_star: f64) -> Self {
        Self {
            state,
            v_theta,
            v_star,
            score: nonconformity(v_theta, v_star),
        }
    }
}

/// `max(0, v_theta - v_star)`.
pub fn nonconformity(v_theta: f64, v_star: f64) -> f64 {
    (v_theta - v_star).max(0.0)
}

/// Achieved safety return of the greedy policy of `v` from `x`.
pub fn rollout_vstar<S, V>(
    sys: &S,
    controls: &ControlGrid,
    v: &V,
    x: &[f64],
    gamma: f64,
    horizon: usize,
) -> f64
where
    S: ControlSystem + ?Sized,
    V: ValueFunction + ?Sized,
{
    let mut margins = Vec::with_capacity(horizon.min(1024));
    let mut state = x.to_vec();
    let mut next = alloc::vec![0.0; sys.state_dim()];
    let boundary = loop {
        let h = sys.margin(&state);
        if h <= 0.0 {
            break h;
        }
        if margins.len() == horizon {
            break v.value(&state);
        }
        margins.push(h);
        let (i, _) = greedy_index(sys, controls, v, &state);
        sys.transition(&state, controls.get(i), &mut next);
        core::mem::swap(&mut state, &mut next);
    };
    margins
        .iter()
        .rev()
        .fold(boundary, |acc, &h| (1.0 - gamma) * h + gamma * h.min(acc))
}

/// One calibration point per trajectory: each trajectory is a rollout of
/// the threshold-zero switched policy from the environment's initial
/// distribution, one visited state is drawn uniformly (initial and terminal
/// states included), and its `V*` is computed by [`rollout_vstar`].
pub fn build_calibration_set<E, V>(
    env: &E,
    v: &V,
    n_traj: usize,
    gamma: f64,
    horizon: usize,
    seed: u64,
) -> Result<Vec<CalibrationPoint>>
where
    E: Environment + ?Sized,
    V: ValueFunction + ?Sized,
{
    if n_traj == 0 {
        return Err(Error::Config("calibration needs at least one trajectory".into()));
    }
    let controls = ControlGrid::for_system(env)?;
    let mut points = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut r = rng::stream(seed, i as u64);
        let traj = switched_trajectory(env, &controls, v, &mut r);
        let pick = r.gen_range(0..traj.len());
        let x = traj.into_iter().nth(pick).expect("index in range");
        let v_star = rollout_vstar(env, &controls, v, &x, gamma, horizon);
        let v_theta = v.value(&x);
        points.push(CalibrationPoint::new(x, v_theta, v_star));
    }
    Ok(points)
}

fn switched_trajectory<E, V, R>(env: &E, controls: &ControlGrid, v: &V, r: &mut R) -> Vec<State>
where
    E: Environment + ?Sized,
    V: ValueFunction + ?Sized,
    R: rand::RngCore,
{
    let mut x = env.sample_initial(r);
    let mut traj = alloc::vec![x.clone()];
    for _ in 0..env.horizon() {
        if env.margin(&x) <= 0.0 || env.goal_reached(&x) {
            break;
        }
        let u = threshold_switch(env, controls, v, &x);
        x = env.next_state(&x, &u);
        traj.push(x.clone());
    }
    traj
}

/// `ceil((n + 1)(1 - alpha))`, robust to representation error in `alpha`.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    libm::ceil(x - 1e-9 * x.abs().max(1.0)) as usize
}

/// Exact rank for a rational level `alpha = num / den`.
pub fn conformal_rank_exact(n: u64, num: u64, den: u64) -> u64 {
    let top = (n + 1) * (den - num);
    top.div_ceil(den)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// The `k`-th smallest of already sorted scores, `k = ceil((n + 1)(1 - alpha))`;
/// `+inf` when `k > n`.
pub fn quantile_sorted(sorted: &[f64], alpha: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    check_alpha(alpha)?;
    let k = conformal_rank(sorted.len(), alpha).max(1);
    Ok(if k > sorted.len() {
        f64::INFINITY
    } else {
        sorted[k - 1]
    })
}

pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, alpha)
}

/// A value function with its sorted calibration scores and cached quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedModel<V> {
    pub value: V,
    scores: Vec<f64>,
    quantiles: Vec<(f64, f64)>,
}

impl<V: ValueFunction> CalibratedModel<V> {
    pub fn new(value: V, mut scores: Vec<f64>, alphas: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("calibration scores"));
        }
        if scores.iter().any(|s| s.is_nan() || *s < 0.0) {
            return Err(Error::Config("scores must be non-negative numbers".into()));
        }
        scores.sort_by(f64::total_cmp);
        let quantiles = alphas
            .iter()
            .map(|&a| Ok((a, quantile_sorted(&scores, a)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            value,
            scores,
            quantiles,
        })
    }

    pub fn from_points(value: V, points: &[CalibrationPoint], alphas: &[f64]) -> Result<Self> {
        Self::new(value, points.iter().map(|p| p.score).collect(), alphas)
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Cached `(alpha, q)` pairs.
    pub fn quantiles(&self) -> &[(f64, f64)] {
        &self.quantiles
    }

    /// `q(alpha)`, from the cache when `alpha` was calibrated up front.
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        match self.quantiles.iter().find(|(a, _)| *a == alpha) {
            Some(&(_, q)) => Ok(q),
            None => quantile_sorted(&self.scores, alpha),
        }
    }

    /// `V(x) - q(alpha)`; `-inf` when the quantile is infinite.
    pub fn lower_bound(&self, x: &[f64], alpha: f64) -> Result<f64> {
        Ok(lower_bound_with(self.value.value(x), self.quantile(alpha)?))
    }
}

pub fn lower_bound_with(v: f64, q: f64) -> f64 {
    if q == f64::INFINITY {
        f64::NEG_INFINITY
    } else {
        v - q
    }
}

/// Law of the coverage conditional on one calibration set of size `n`:
/// `Beta(n + 1 - l, l)` with `l = floor((n + 1) alpha)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalCoverage {
    pub l: usize,
    pub a: f64,
    pub b: f64,
}

impl ConditionalCoverage {
    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

pub fn conditional_coverage_beta(n: usize, alpha: f64) -> Result<ConditionalCoverage> {
    if n == 0 {
        return Err(Error::Empty("calibration set"));
    }
    check_alpha(alpha)?;
    let x = (n as f64 + 1.0) * alpha;
    let l = libm::floor(x + 1e-9 * x.max(1.0)) as usize;
    if l == 0 {
        return Err(Error::CalibrationTooSmall { n, alpha });
    }
    Ok(ConditionalCoverage {
        l,
        a: (n + 1 - l) as f64,
        b: l as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Bounds;
    use crate::systems::DoubleIntegrator;
    use crate::value::Constant;
    use alloc::vec;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn quantile_examples() {
        assert_eq!(conformal_quantile(&[0.0; 10], 0.1).unwrap(), 0.0);
        let s: Vec<f64> = (1..=19).map(f64::from).collect();
        assert_eq!(conformal_rank(19, 0.05), 19);
        assert_eq!(conformal_quantile(&s, 0.05).unwrap(), 19.0);
        assert_eq!(conformal_rank(9, 0.05), 10);
        assert_eq!(conformal_quantile(&[1.0; 9], 0.05).unwrap(), f64::INFINITY);
        assert_eq!(conformal_rank(10, 0.1), 10);
    }

    #[test]
    fn quantile_errors() {
        assert!(conformal_quantile(&[], 0.1).is_err());
        assert!(conformal_quantile(&[1.0], 0.0).is_err());
        assert!(conformal_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn quantile_ignores_input_order() {
        let a = conformal_quantile(&[5.0, 1.0, 3.0, 2.0, 4.0, 0.5, 9.0, 7.0, 8.0, 6.0, 0.1], 0.2).unwrap();
        // k = ceil(12 * 0.8) = 10 -> tenth smallest
        assert_eq!(a, 8.0);
    }

    #[test]
    fn lower_bound_examples() {
        let m = CalibratedModel::new(Constant(2.0), vec![0.0; 20], &[0.1]).unwrap();
        assert_eq!(m.lower_bound(&[0.0], 0.1).unwrap(), 2.0);
        assert!((lower_bound_with(2.0, 1.61) - 0.39).abs() < 1e-12);
        assert_eq!(lower_bound_with(2.0, f64::INFINITY), f64::NEG_INFINITY);
        let small = CalibratedModel::new(Constant(2.0), vec![0.0; 5], &[]).unwrap();
        assert_eq!(small.lower_bound(&[0.0], 0.05).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn calibrated_model_rejects_bad_scores() {
        assert!(CalibratedModel::new(Constant(0.0), vec![], &[]).is_err());
        assert!(CalibratedModel::new(Constant(0.0), vec![-1.0], &[]).is_err());
        assert!(CalibratedModel::new(Constant(0.0), vec![f64::NAN], &[]).is_err());
    }

    #[test]
    fn cached_and_on_demand_quantiles_agree() {
        let scores: Vec<f64> = (0..50).map(|i| (i * 7 % 13) as f64).collect();
        let m = CalibratedModel::new(Constant(0.0), scores.clone(), &[0.1, 0.2]).unwrap();
        assert_eq!(m.quantile(0.1).unwrap(), conformal_quantile(&scores, 0.1).unwrap());
        assert_eq!(m.quantile(0.15).unwrap(), conformal_quantile(&scores, 0.15).unwrap());
        assert!(m.scores().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn conditional_coverage_examples() {
        let c = conditional_coverage_beta(99, 0.1).unwrap();
        assert_eq!((c.l, c.a, c.b), (10, 90.0, 10.0));
        let c = conditional_coverage_beta(19, 0.05).unwrap();
        assert_eq!((c.l, c.a, c.b), (1, 19.0, 1.0));
        let c = conditional_coverage_beta(9999, 0.1).unwrap();
        assert!((c.mean() - 0.9).abs() < 1e-3);
        assert!(matches!(
            conditional_coverage_beta(5, 0.1),
            Err(Error::CalibrationTooSmall { .. })
        ));
    }

    #[test]
    fn rollout_vstar_cases() {
        let di = DoubleIntegrator::default();
        let controls = ControlGrid::for_system(&di).unwrap();
        // already failing
        let v = rollout_vstar(&di, &controls, &Constant(5.0), &[1.3, 0.0], 0.9, 10);
        assert!((v + 0.3).abs() < 1e-12);
        // horizon zero bootstraps from the model
        let v = rollout_vstar(&di, &controls, &Constant(0.25), &[0.0, 0.0], 0.9, 0);
        assert_eq!(v, 0.25);
        // zero discount returns h
        let v = rollout_vstar(&di, &controls, &Constant(5.0), &[0.3, 0.0], 0.0, 10);
        assert!((v - 0.7).abs() < 1e-12);
    }

    /// Fixed two-step chain to exercise the backward fold by hand.
    struct Chain {
        bounds: [Bounds; 1],
        res: [usize; 1],
    }

    impl ControlSystem for Chain {
        fn name(&self) -> &str {
            "chain"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn control_bounds(&self) -> &[Bounds] {
            &self.bounds
        }
        fn control_resolution(&self) -> &[usize] {
            &self.res
        }
        fn dt(&self) -> f64 {
            1.0
        }
        fn transition(&self, x: &[f64], _u: &[f64], next: &mut [f64]) {
            next[0] = x[0] + 1.0;
        }
        fn margin(&self, x: &[f64]) -> f64 {
            match x[0] as i64 {
                0 => 1.0,
                1 => 0.5,
                _ => 3.0,
            }
        }
    }

    struct Boundary;
    impl ValueFunction for Boundary {
        fn value(&self, x: &[f64]) -> f64 {
            if x[0] >= 2.0 { 2.0 } else { 0.0 }
        }
    }

    #[test]
    fn two_step_fold_by_hand() {
        let sys = Chain {
            bounds: [Bounds::new(-1.0, 1.0)],
            res: [2],
        };
        let controls = ControlGrid::for_system(&sys).unwrap();
        let v = rollout_vstar(&sys, &controls, &Boundary, &[0.0], 0.5, 2);
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn constant_margin_fixed_point() {
        let sys = Chain {
            bounds: [Bounds::new(-1.0, 1.0)],
            res: [2],
        };
        let controls = ControlGrid::for_system(&sys).unwrap();
        // from x = 2 every margin is 3 and the bootstrap value is 3
        let v = rollout_vstar(&sys, &controls, &Constant(3.0), &[2.0], 0.9, 50);
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_set_counts_and_scores() {
        let di = DoubleIntegrator::default();
        let pts = build_calibration_set(&di, &Constant(0.3), 1, 0.99, 50, 1).unwrap();
        assert_eq!(pts.len(), 1);
        let pts = build_calibration_set(&di, &Constant(0.3), 40, 0.99, 50, 1).unwrap();
        assert_eq!(pts.len(), 40);
        for p in &pts {
            assert!(p.score >= 0.0);
            assert_eq!(p.score, (p.v_theta - p.v_star).max(0.0));
            if p.v_theta <= p.v_star {
                assert_eq!(p.score, 0.0);
            }
        }
        assert!(build_calibration_set(&di, &Constant(0.3), 0, 0.99, 50, 1).is_err());
        let again = build_calibration_set(&di, &Constant(0.3), 40, 0.99, 50, 1).unwrap();
        assert_eq!(pts, again);
    }

    proptest! {
        #[test]
        fn quantile_monotone_in_alpha(
            scores in proptest::collection::vec(0.0..10.0f64, 1..60),
            a1 in 0.01..0.99f64,
            a2 in 0.01..0.99f64,
        ) {
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let q_lo = conformal_quantile(&scores, lo).unwrap();
            let q_hi = conformal_quantile(&scores, hi).unwrap();
            prop_assert!(q_lo >= q_hi);
        }

        #[test]
        fn scores_non_negative(v in -5.0..5.0f64, s in -5.0..5.0f64) {
            let c = nonconformity(v, s);
            prop_assert!(c >= 0.0);
            if v <= s { prop_assert!(c == 0.0); }
        }
    }
}
