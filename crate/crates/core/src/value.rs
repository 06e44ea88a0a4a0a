//! Scalar value functions and the greedy policy they induce.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::system::{Control, ControlGrid, ControlSystem};

pub trait ValueFunction {
    fn value(&self, x: &[f64]) -> f64;
}

impl<V: ValueFunction + ?Sized> ValueFunction for &V {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }
}

impl<V: ValueFunction + ?Sized> ValueFunction for Box<V> {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }
}

/// `V(x) = c` everywhere. `Constant(f64::INFINITY)` never triggers a switch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl ValueFunction for Constant {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

/// Index of `argmax_u V(f(x, u))` over the control grid and the maximum.
/// Ties go to the lowest index.
pub fn greedy_index<S, V>(sys: &S, controls: &ControlGrid, v: &V, x: &[f64]) -> (usize, f64)
where
    S: ControlSystem + ?Sized,
    V: ValueFunction + ?Sized,
{
    let mut next = alloc::vec![0.0; sys.state_dim()];
    let mut best = (0, f64::NEG_INFINITY);
    for (i, u) in controls.iter().enumerate() {
        sys.transition(x, u, &mut next);
        let q = v.value(&next);
        if i == 0 || q > best.1 {
            best = (i, q);
        }
    }
    best
}

pub fn greedy_control<S, V>(sys: &S, controls: &ControlGrid, v: &V, x: &[f64]) -> Control
where
    S: ControlSystem + ?Sized,
    V: ValueFunction + ?Sized,
{
    let (i, _) = greedy_index(sys, controls, v, x);
    Control::from(controls.get(i))
}

/// `max_u V(f(x, u))` over the grid.
pub fn max_next_value<S, V>(sys: &S, controls: &ControlGrid, v: &V, x: &[f64]) -> f64
where
    S: ControlSystem + ?Sized,
    V: ValueFunction + ?Sized,
{
    greedy_index(sys, controls, v, x).1
}

/// Evaluate `v` on a batch of states.
pub fn evaluate_all<V: ValueFunction + ?Sized>(v: &V, states: &[Vec<f64>]) -> Vec<f64> {
    states.iter().map(|x| v.value(x)).collect()
}
