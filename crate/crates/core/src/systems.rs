//! Built-in low-dimensional systems with dense grid oracles.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, RngCore};

use crate::error::Result;
use crate::system::{validate_bounds, validate_dt, Bounds, Control, ControlSystem, Environment, State};

pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let mut t = libm::fmod(theta + PI, 2.0 * PI);
    if t <= 0.0 {
        t += 2.0 * PI;
    }
    t - PI
}

pub(crate) fn sample_box(rng: &mut dyn RngCore, lo: &[f64], hi: &[f64]) -> State {
    State(
        lo.iter()
            .zip(hi)
            .map(|(&a, &b)| if a < b { rng.gen_range(a..=b) } else { a })
            .collect(),
    )
}

/// Point mass on a line, state `(p, v)`, control `u` (acceleration).
/// Safe band `|p| < band`, margin `h = band - |p|`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleIntegrator {
    pub dt: f64,
    pub band: f64,
    control_bounds: [Bounds; 1],
    resolution: [usize; 1],
    pub init_lo: [f64; 2],
    pub init_hi: [f64; 2],
    /// Position the nominal PD controller drives to; outside the band by default.
    pub nominal_target: f64,
    pub kp: f64,
    pub kd: f64,
    pub horizon: usize,
}

impl Default for DoubleIntegrator {
    fn default() -> Self {
        Self {
            dt: 0.1,
            band: 1.0,
            control_bounds: [Bounds::new(-1.0, 1.0)],
            resolution: [3],
            init_lo: [-1.2, -2.0],
            init_hi: [1.2, 2.0],
            nominal_target: 1.5,
            kp: 1.0,
            kd: 1.0,
            horizon: 200,
        }
    }
}

impl DoubleIntegrator {
    pub fn new(dt: f64, u_max: f64, resolution: usize) -> Result<Self> {
        validate_dt(dt)?;
        let bounds = [Bounds::new(-u_max, u_max)];
        validate_bounds(&bounds)?;
        Ok(Self {
            dt,
            control_bounds: bounds,
            resolution: [resolution],
            ..Self::default()
        })
    }
}

impl ControlSystem for DoubleIntegrator {
    fn name(&self) -> &str {
        "double_integrator"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn control_bounds(&self) -> &[Bounds] {
        &self.control_bounds
    }

    fn control_resolution(&self) -> &[usize] {
        &self.resolution
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn transition(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        next[0] = x[0] + x[1] * self.dt;
        next[1] = x[1] + u[0] * self.dt;
    }

    fn margin(&self, x: &[f64]) -> f64 {
        self.band - x[0].abs()
    }
}

impl Environment for DoubleIntegrator {
    fn sample_initial(&self, rng: &mut dyn RngCore) -> State {
        sample_box(rng, &self.init_lo, &self.init_hi)
    }

    fn nominal_control(&self, x: &[f64]) -> Control {
        let u = self.kp * (self.nominal_target - x[0]) - self.kd * x[1];
        Control(vec![self.control_bounds[0].clamp(u)])
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let center = (0..2).map(|i| 0.5 * (self.init_lo[i] + self.init_hi[i])).collect();
        let half = (0..2)
            .map(|i| (0.5 * (self.init_hi[i] - self.init_lo[i])).max(1e-6))
            .collect();
        (center, half)
    }
}

/// Constant-speed Dubins car, state `(x, y, theta)`, control `omega`.
/// Margin is the distance to a circular obstacle minus its radius.
#[derive(Debug, Clone, PartialEq)]
pub struct Dubins {
    pub dt: f64,
    pub speed: f64,
    pub obstacle: [f64; 2],
    pub radius: f64,
    control_bounds: [Bounds; 1],
    resolution: [usize; 1],
    pub init_lo: [f64; 3],
    pub init_hi: [f64; 3],
    /// The nominal controller heads for this point; the task is done once `x >= goal[0]`.
    pub goal: [f64; 2],
    pub k_heading: f64,
    pub horizon: usize,
}

impl Default for Dubins {
    fn default() -> Self {
        Self {
            dt: 0.1,
            speed: 1.0,
            obstacle: [1.5, 0.0],
            radius: 0.5,
            control_bounds: [Bounds::new(-1.0, 1.0)],
            resolution: [3],
            init_lo: [-1.0, -0.5, -PI / 4.0],
            init_hi: [0.0, 0.5, PI / 4.0],
            goal: [4.0, 0.0],
            k_heading: 2.0,
            horizon: 200,
        }
    }
}

impl Dubins {
    pub fn new(dt: f64, speed: f64, obstacle: [f64; 2], radius: f64) -> Result<Self> {
        validate_dt(dt)?;
        Ok(Self {
            dt,
            speed,
            obstacle,
            radius,
            ..Self::default()
        })
    }
}

impl ControlSystem for Dubins {
    fn name(&self) -> &str {
        "dubins"
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn control_bounds(&self) -> &[Bounds] {
        &self.control_bounds
    }

    fn control_resolution(&self) -> &[usize] {
        &self.resolution
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn transition(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        next[0] = x[0] + self.speed * libm::cos(x[2]) * self.dt;
        next[1] = x[1] + self.speed * libm::sin(x[2]) * self.dt;
        next[2] = wrap_angle(x[2] + u[0] * self.dt);
    }

    fn margin(&self, x: &[f64]) -> f64 {
        libm::hypot(x[0] - self.obstacle[0], x[1] - self.obstacle[1]) - self.radius
    }
}

impl Environment for Dubins {
    fn sample_initial(&self, rng: &mut dyn RngCore) -> State {
        sample_box(rng, &self.init_lo, &self.init_hi)
    }

    fn nominal_control(&self, x: &[f64]) -> Control {
        let bearing = libm::atan2(self.goal[1] - x[1], self.goal[0] - x[0]);
        let omega = self.k_heading * wrap_angle(bearing - x[2]);
        Control(vec![self.control_bounds[0].clamp(omega)])
    }

    fn goal_reached(&self, x: &[f64]) -> bool {
        x[0] >= self.goal[0]
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_scale(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![1.5, 0.0, 0.0], vec![2.5, 1.5, PI])
    }
}
