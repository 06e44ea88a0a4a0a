//! Discrete-time control-system contract.
//!
//! A system exposes a deterministic transition `x' = f(x, u)`, a failure
//! margin `h` whose non-positive sublevel set is the failure set, per-axis
//! control bounds and the resolution of the finite control grid used to
//! maximise over controls.

use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use rand::RngCore;

use crate::error::{check_len, Error, Result};

macro_rules! real_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Default)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn zeros(len: usize) -> Self {
                Self(alloc::vec![0.0; len])
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }

        impl From<&[f64]> for $name {
            fn from(values: &[f64]) -> Self {
                Self(values.to_vec())
            }
        }
    };
}

real_vector!(
    /// A point in the state space.
    State
);
real_vector!(
    /// A control input.
    Control
);

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

pub trait ControlSystem {
    fn name(&self) -> &str;

    fn state_dim(&self) -> usize;

    fn control_bounds(&self) -> &[Bounds];

    /// Number of grid points per control axis used by [`control_grid`].
    fn control_resolution(&self) -> &[usize];

    fn dt(&self) -> f64;

    /// Raw transition. `x`, `u` and `next` have the declared lengths and `u`
    /// is within bounds; [`step`] checks both before calling this.
    fn transition(&self, x: &[f64], u: &[f64], next: &mut [f64]);

    /// Failure margin `h(x)`; the failure set is `h <= 0`.
    fn margin(&self, x: &[f64]) -> f64;

    fn control_dim(&self) -> usize {
        self.control_bounds().len()
    }

    /// Allocating convenience wrapper around [`ControlSystem::transition`].
    fn next_state(&self, x: &[f64], u: &[f64]) -> State {
        let mut next = State::zeros(self.state_dim());
        self.transition(x, u, &mut next);
        next
    }

    fn clamp_control(&self, u: &mut [f64]) -> bool {
        let mut clamped = false;
        for (v, b) in u.iter_mut().zip(self.control_bounds()) {
            let c = b.clamp(*v);
            if c != *v {
                clamped = true;
                *v = c;
            }
        }
        clamped
    }
}

/// A system together with a task: initial-state distribution, a nominal
/// (safety-unaware) controller, a goal predicate and an episode horizon.
pub trait Environment: ControlSystem {
    fn sample_initial(&self, rng: &mut dyn RngCore) -> State;

    /// Nominal control at `x`, already within the control bounds.
    fn nominal_control(&self, x: &[f64]) -> Control;

    fn goal_reached(&self, _x: &[f64]) -> bool {
        false
    }

    fn horizon(&self) -> usize;

    /// Per-axis `(center, half_width)` used to normalise network inputs.
    fn state_scale(&self) -> (Vec<f64>, Vec<f64>);
}

/// Result of a checked [`step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Stepped {
    pub state: State,
    /// The control was outside its bounds and was clamped before stepping.
    pub clamped: bool,
}

pub fn step<S: ControlSystem + ?Sized>(sys: &S, x: &State, u: &Control) -> Result<Stepped> {
    check_len("state", sys.state_dim(), x.len())?;
    check_len("control", sys.control_dim(), u.len())?;
    let mut u = u.clone();
    let clamped = sys.clamp_control(&mut u);
    let state = sys.next_state(x, &u);
    Ok(Stepped { state, clamped })
}

pub fn failure_margin<S: ControlSystem + ?Sized>(sys: &S, x: &State) -> Result<f64> {
    check_len("state", sys.state_dim(), x.len())?;
    Ok(sys.margin(x))
}

/// Finite Cartesian grid of controls, stored flat in row-major order (last
/// axis varies fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    dim: usize,
    points: Vec<f64>,
}

impl ControlGrid {
    pub fn new(bounds: &[Bounds], resolution: &[usize]) -> Result<Self> {
        check_len("control resolution", bounds.len(), resolution.len())?;
        if bounds.is_empty() {
            return Err(Error::Empty("control bounds"));
        }
        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(bounds.len());
        for (b, &r) in bounds.iter().zip(resolution) {
            if r < 2 {
                return Err(Error::Config(alloc::format!(
                    "control grid resolution must be >= 2, got {r}"
                )));
            }
            if !(b.lo <= b.hi) {
                return Err(Error::Config(alloc::format!(
                    "control bounds [{}, {}] are inverted",
                    b.lo,
                    b.hi
                )));
            }
            let mut axis: Vec<f64> = (0..r)
                .map(|i| {
                    if i == r - 1 {
                        b.hi
                    } else {
                        b.lo + b.width() * i as f64 / (r - 1) as f64
                    }
                })
                .collect();
            axis.dedup();
            axes.push(axis);
        }
        let dim = axes.len();
        let count: usize = axes.iter().map(Vec::len).product();
        let mut points = Vec::with_capacity(count * dim);
        let mut idx = alloc::vec![0usize; dim];
        for _ in 0..count {
            points.extend(idx.iter().zip(&axes).map(|(&i, axis)| axis[i]));
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < axes[a].len() {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Self { dim, points })
    }

    pub fn for_system<S: ControlSystem + ?Sized>(sys: &S) -> Result<Self> {
        Self::new(sys.control_bounds(), sys.control_resolution())
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn to_controls(&self) -> Vec<Control> {
        self.iter().map(Control::from).collect()
    }
}

pub fn control_grid<S: ControlSystem + ?Sized>(sys: &S) -> Result<Vec<Control>> {
    Ok(ControlGrid::for_system(sys)?.to_controls())
}

pub(crate) fn validate_bounds(bounds: &[Bounds]) -> Result<()> {
    for b in bounds {
        if !(b.lo < b.hi) {
            return Err(Error::Config(alloc::format!(
                "control bounds require lo < hi, got [{}, {}]",
                b.lo,
                b.hi
            )));
        }
    }
    Ok(())
}

pub(crate) fn validate_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!("dt must be positive, got {dt}")))
    }
}
