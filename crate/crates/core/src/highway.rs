//! Triple-vehicle highway takeover task.
//!
//! State layout `[x_f, y_f, v_f, x_e, y_e, v_e, theta_e, x_l, y_l, v_l]`: a
//! front vehicle driving up the road (+y), the ego unicycle, and a lateral
//! vehicle driving down the road (-y). Only the ego is controlled, with
//! `u = (acceleration, angular velocity)`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::RngCore;

use crate::error::{Error, Result};
use crate::rng;
use crate::system::{validate_bounds, validate_dt, Bounds, Control, ControlSystem, Environment, State};
use crate::systems::{sample_box, wrap_angle};

pub const STATE_DIM: usize = 10;

const XF: usize = 0;
const YF: usize = 1;
const VF: usize = 2;
const XE: usize = 3;
const YE: usize = 4;
const VE: usize = 5;
const TH: usize = 6;
const XL: usize = 7;
const YL: usize = 8;
const VL: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HighwayState {
    pub x_f: f64,
    pub y_f: f64,
    pub v_f: f64,
    pub x_e: f64,
    pub y_e: f64,
    pub v_e: f64,
    pub theta_e: f64,
    pub x_l: f64,
    pub y_l: f64,
    pub v_l: f64,
}

impl HighwayState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.x_f, self.y_f, self.v_f, self.x_e, self.y_e, self.v_e, self.theta_e, self.x_l,
            self.y_l, self.v_l,
        ]
    }

    pub fn to_state(&self) -> State {
        State(self.to_array().to_vec())
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        crate::error::check_len("highway state", STATE_DIM, x.len())?;
        Ok(Self {
            x_f: x[XF],
            y_f: x[YF],
            v_f: x[VF],
            x_e: x[XE],
            y_e: x[YE],
            v_e: x[VE],
            theta_e: wrap_angle(x[TH]),
            x_l: x[XL],
            y_l: x[YL],
            v_l: x[VL],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighwayConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub collision_radius: f64,
    pub success_y: f64,
    pub horizon: usize,
    pub init_lo: [f64; STATE_DIM],
    pub init_hi: [f64; STATE_DIM],
    pub h_scale: f64,
    pub dt: f64,
    /// Acceleration and angular-velocity bounds.
    pub control_bounds: [Bounds; 2],
    pub control_resolution: [usize; 2],
    /// Floor on the ego speed; `None` lets the ego reverse.
    pub min_speed: Option<f64>,
    pub target_speed: f64,
    pub target_x: f64,
    pub k_v: f64,
    pub k_theta: f64,
    pub k_x: f64,
}

impl Default for HighwayConfig {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 2.0,
            collision_radius: 0.5,
            success_y: 20.0,
            horizon: 200,
            init_lo: [0.0, 10.0, 0.5, 0.3, 0.0, 0.5, FRAC_PI_4, 1.6, 5.0, 0.5],
            init_hi: [1.0, 15.0, 2.0, 1.7, 5.0, 3.0, 3.0 * FRAC_PI_4, 2.0, 10.0, 1.5],
            h_scale: 10.0,
            dt: 0.1,
            control_bounds: [Bounds::new(-1.0, 1.0), Bounds::new(-1.0, 1.0)],
            control_resolution: [3, 3],
            min_speed: Some(0.0),
            target_speed: 2.0,
            target_x: 1.0,
            k_v: 1.0,
            k_theta: 1.0,
            k_x: 0.5,
        }
    }
}

impl HighwayConfig {
    pub fn validate(&self) -> Result<()> {
        validate_dt(self.dt)?;
        validate_bounds(&self.control_bounds)?;
        if !(self.x_min < self.x_max) {
            return Err(Error::Config(alloc::format!(
                "road bounds require x_min < x_max, got [{}, {}]",
                self.x_min,
                self.x_max
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.init_lo.iter().zip(&self.init_hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::Config("initial-state bounds require a <= b".into()));
        }
        if self.min_speed.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Config("min_speed must be finite".into()));
        }
        if self.control_resolution.iter().any(|&r| r < 2) {
            return Err(Error::Config("control grid resolution must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Highway {
    cfg: HighwayConfig,
}

impl Highway {
    pub fn new(cfg: HighwayConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &HighwayConfig {
        &self.cfg
    }

    /// `h_scale * min(d_front - r, d_lateral - r, x_e - x_min, x_max - x_e)`.
    pub fn h(&self, s: &HighwayState) -> f64 {
        self.margin(&s.to_array())
    }

    pub fn step_state(&self, s: &HighwayState, u: &[f64]) -> HighwayState {
        let mut u = [u[0], u[1]];
        self.clamp_control(&mut u);
        let mut next = [0.0; STATE_DIM];
        self.transition(&s.to_array(), &u, &mut next);
        HighwayState::from_slice(&next).expect("fixed-size state")
    }

    pub fn nominal(&self, s: &HighwayState) -> Control {
        self.nominal_control(&s.to_array())
    }

    /// Deterministic initial state for `seed`.
    pub fn sample_initial_seeded(&self, seed: u64) -> HighwayState {
        let mut r = rng::seeded(seed);
        let x = self.sample_initial(&mut r);
        HighwayState::from_slice(&x).expect("fixed-size state")
    }
}

impl Default for Highway {
    fn default() -> Self {
        Self {
            cfg: HighwayConfig::default(),
        }
    }
}

impl ControlSystem for Highway {
    fn name(&self) -> &str {
        "highway"
    }

    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn control_bounds(&self) -> &[Bounds] {
        &self.cfg.control_bounds
    }

    fn control_resolution(&self) -> &[usize] {
        &self.cfg.control_resolution
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn transition(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        let dt = self.cfg.dt;
        next.copy_from_slice(&x[..STATE_DIM]);
        next[YF] = x[YF] + x[VF] * dt;
        next[XE] = x[XE] + x[VE] * libm::cos(x[TH]) * dt;
        next[YE] = x[YE] + x[VE] * libm::sin(x[TH]) * dt;
        next[VE] = x[VE] + u[0] * dt;
        if let Some(lo) = self.cfg.min_speed {
            next[VE] = next[VE].max(lo);
        }
        next[TH] = wrap_angle(x[TH] + u[1] * dt);
        next[YL] = x[YL] - x[VL] * dt;
    }

    fn margin(&self, x: &[f64]) -> f64 {
        let c = &self.cfg;
        let front = libm::hypot(x[XE] - x[XF], x[YE] - x[YF]) - c.collision_radius;
        let lateral = libm::hypot(x[XE] - x[XL], x[YE] - x[YL]) - c.collision_radius;
        let left = x[XE] - c.x_min;
        let right = c.x_max - x[XE];
        c.h_scale * front.min(lateral).min(left).min(right)
    }
}

impl Environment for Highway {
    fn sample_initial(&self, rng: &mut dyn RngCore) -> State {
        let mut s = sample_box(rng, &self.cfg.init_lo, &self.cfg.init_hi);
        s[TH] = wrap_angle(s[TH]);
        s
    }

    /// Proportional tracking of speed, lane center and an upward heading.
    /// The heading reference tilts toward the lane center by `k_x` per unit
    /// of lateral error; the other vehicles are ignored.
    fn nominal_control(&self, x: &[f64]) -> Control {
        let c = &self.cfg;
        let accel = c.k_v * (c.target_speed - x[VE]);
        let heading_ref = FRAC_PI_2 - c.k_x * (c.target_x - x[XE]);
        let omega = c.k_theta * wrap_angle(heading_ref - x[TH]);
        Control(vec![
            c.control_bounds[0].clamp(accel),
            c.control_bounds[1].clamp(omega),
        ])
    }

    fn goal_reached(&self, x: &[f64]) -> bool {
        x[YE] >= self.cfg.success_y
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn state_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let center = vec![0.5, 25.0, 1.25, 1.0, 12.5, 1.75, FRAC_PI_2, 1.8, 0.0, 1.0];
        let half = vec![0.5, 25.0, 0.75, 1.0, 12.5, 1.75, PI / 2.0, 0.2, 15.0, 0.5];
        (center, half)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{classify, OutcomeKind};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn far_state() -> HighwayState {
        HighwayState {
            x_f: 0.0,
            y_f: 100.0,
            v_f: 1.0,
            x_e: 1.0,
            y_e: 0.0,
            v_e: 2.0,
            theta_e: FRAC_PI_2,
            x_l: 2.0,
            y_l: -100.0,
            v_l: 1.0,
        }
    }

    #[test]
    fn degenerate_initial_box_returns_lower_corner() {
        let mut cfg = HighwayConfig::default();
        cfg.init_hi = cfg.init_lo;
        let env = Highway::new(cfg.clone()).unwrap();
        let s = env.sample_initial_seeded(5);
        assert_eq!(s.to_array(), cfg.init_lo);
    }

    #[test]
    fn initial_heading_within_bounds() {
        let env = Highway::default();
        let mut r = rng::seeded(1);
        for _ in 0..10_000 {
            let s = env.sample_initial(&mut r);
            assert!(s[TH] >= FRAC_PI_4 && s[TH] <= 3.0 * FRAC_PI_4);
        }
    }

    #[test]
    fn initial_ego_x_mean() {
        let env = Highway::default();
        let mut r = rng::seeded(2);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| env.sample_initial(&mut r)[XE]).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn initial_samples_within_box() {
        let env = Highway::default();
        let cfg = env.config().clone();
        let mut r = rng::seeded(3);
        for _ in 0..1_000_000 {
            let s = env.sample_initial(&mut r);
            for i in 0..STATE_DIM {
                assert!(s[i] >= cfg.init_lo[i] && s[i] <= cfg.init_hi[i]);
            }
        }
    }

    #[test]
    fn margin_zero_at_collision_radius() {
        let env = Highway::default();
        let mut s = far_state();
        s.x_f = 1.0;
        s.y_f = 0.5;
        assert!(env.h(&s).abs() < 1e-12);
    }

    #[test]
    fn margin_zero_at_left_edge() {
        let env = Highway::default();
        let mut s = far_state();
        s.x_e = 0.0;
        assert_eq!(env.h(&s), 0.0);
    }

    #[test]
    fn margin_hand_value() {
        let env = Highway::default();
        let mut s = far_state();
        s.x_e = 1.0;
        s.x_f = 1.0;
        s.y_f = 1.5;
        s.x_l = 1.0;
        s.y_l = -1.5;
        assert!((env.h(&s) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_ego_drifting_traffic() {
        let env = Highway::default();
        let mut s = far_state();
        s.v_e = 0.0;
        let n = env.step_state(&s, &[0.0, 0.0]);
        assert_eq!((n.x_e, n.y_e), (s.x_e, s.y_e));
        assert!((n.y_f - (s.y_f + s.v_f * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn ego_moves_up_the_road() {
        let env = Highway::default();
        let mut s = far_state();
        s.v_e = 2.0;
        let n = env.step_state(&s, &[0.0, 0.0]);
        assert!((n.y_e - 0.2).abs() < 1e-12);
        assert!((n.x_e - s.x_e).abs() < 1e-12);
    }

    #[test]
    fn braking_stops_at_the_speed_floor() {
        let mut s = far_state();
        s.v_e = 0.05;
        let n = Highway::default().step_state(&s, &[-1.0, 0.0]);
        assert_eq!(n.v_e, 0.0);
        let reversing = Highway::new(HighwayConfig {
            min_speed: None,
            ..HighwayConfig::default()
        })
        .unwrap();
        assert!((reversing.step_state(&s, &[-1.0, 0.0]).v_e + 0.05).abs() < 1e-12);
    }

    #[test]
    fn lateral_vehicle_moves_down() {
        let env = Highway::default();
        let mut s = far_state();
        s.y_l = 5.0;
        s.v_l = 1.0;
        let n = env.step_state(&s, &[0.0, 0.0]);
        assert!((n.y_l - 4.9).abs() < 1e-12);
    }

    #[test]
    fn nominal_equilibrium() {
        let env = Highway::default();
        let u = env.nominal(&far_state());
        assert_eq!(u.0, vec![0.0, 0.0]);
    }

    #[test]
    fn nominal_accelerates_when_slow() {
        let env = Highway::default();
        let mut s = far_state();
        s.v_e = 1.0;
        assert!(env.nominal(&s)[0] > 0.0);
    }

    #[test]
    fn nominal_steers_toward_center() {
        let env = Highway::default();
        let mut s = far_state();
        s.x_e = 0.5;
        let u = env.nominal(&s);
        // heading drops below pi/2, so x velocity turns positive
        assert!(u[1] < 0.0);
        let mut x = s;
        for _ in 0..5 {
            x = env.step_state(&x, &env.nominal(&x));
        }
        assert!(x.theta_e < FRAC_PI_2);
        let y = env.step_state(&x, &env.nominal(&x));
        assert!(y.x_e > x.x_e);
    }

    #[test]
    fn classify_cases() {
        let env = Highway::default();
        let mut s = far_state();
        let mut traj = vec![s.to_state()];
        for _ in 0..5 {
            s = env.step_state(&s, &env.nominal(&s));
            traj.push(s.to_state());
        }
        let out = classify(&env, &traj).unwrap();
        assert_eq!(out.kind, OutcomeKind::Timeout);
        assert_eq!(out.terminal_step, 5);

        let mut goal = s;
        goal.y_e = 20.3;
        traj.push(goal.to_state());
        assert_eq!(classify(&env, &traj).unwrap().kind, OutcomeKind::Success);

        let mut crash = s;
        crash.x_e = -0.02;
        traj.push(crash.to_state());
        let out = classify(&env, &traj).unwrap();
        assert_eq!(out.kind, OutcomeKind::Violation);
        assert!((out.min_margin + 0.2).abs() < 1e-12);
    }

    #[test]
    fn non_ego_constants_preserved() {
        let env = Highway::default();
        let mut r = rng::seeded(4);
        for _ in 0..50 {
            let x0 = env.sample_initial(&mut r);
            let mut x = x0.clone();
            for _ in 0..200 {
                let u = [r.gen_range(-1.0..=1.0), r.gen_range(-1.0..=1.0)];
                x = env.next_state(&x, &u);
                for i in [XF, XL, VF, VL] {
                    assert_eq!(x[i], x0[i]);
                }
            }
        }
    }

    #[test]
    fn margin_lipschitz_in_vehicle_distance() {
        let env = Highway::default();
        let mut r = rng::seeded(5);
        let eps = 1e-6;
        for _ in 0..2000 {
            let x = env.sample_initial(&mut r);
            for i in [XF, YF, XE, YE, XL, YL] {
                let mut a = x.clone();
                let mut b = x.clone();
                a[i] += eps;
                b[i] -= eps;
                let slope = (env.margin(&a) - env.margin(&b)) / (2.0 * eps);
                assert!(slope.abs() <= 10.0 * (1.0 + 1e-6), "slope {slope}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = HighwayConfig::default();
        cfg.x_max = -1.0;
        assert!(Highway::new(cfg).is_err());
        let mut cfg = HighwayConfig::default();
        cfg.horizon = 0;
        assert!(Highway::new(cfg).is_err());
        let mut cfg = HighwayConfig::default();
        cfg.init_lo[0] = 5.0;
        assert!(Highway::new(cfg).is_err());
    }

    proptest! {
        #[test]
        fn heading_wrapped(theta in -20.0..20.0f64, w in -1.0..1.0f64) {
            let env = Highway::default();
            let mut s = far_state();
            s.theta_e = theta;
            let n = env.step_state(&s, &[0.0, w]);
            prop_assert!(n.theta_e > -PI && n.theta_e <= PI);
        }
    }
}
