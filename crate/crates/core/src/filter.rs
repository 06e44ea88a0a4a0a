//! Switched safety filters.
//!
//! At each step the filter predicts the nominal successor
//! `x_next = f(x, pi_nom(x))` and keeps the nominal control only while the
//! calibrated lower bound `V(x_next) - q(alpha)` is strictly positive.
//! Otherwise it applies a safe policy, evaluated at the current state `x`.
//! With an ensemble, the nominal controller is kept while any member's bound
//! is positive. Otherwise the member with the largest bound is chosen (lowest
//! index on ties). The `Single` strategy sticks with that member until the
//! nominal controller is trusted again, while `Multiple` re-selects every step.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;

use crate::conformal::CalibratedModel;
use crate::episode::{classify, EpisodeOutcome};
use crate::error::{check_len, Error, Result};
use crate::rng;
use crate::system::{Control, ControlGrid, Environment, State};
use crate::value::{greedy_control, ValueFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Single,
    Multiple,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Single => "single",
            Strategy::Multiple => "multiple",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Controller {
    Nominal,
    Safe,
}

/// What the filter saw and did at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: State,
    pub nominal_next: State,
    /// Per-member calibrated lower bounds at `nominal_next` (empty for the
    /// unfiltered nominal policy).
    pub lower_bounds: Vec<f64>,
    pub controller: Controller,
    /// Member whose safe policy was applied; `None` iff nominal.
    pub active: Option<usize>,
    pub control: Control,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterTrace {
    pub steps: Vec<StepRecord>,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Fraction of steps on the safe policy.
    pub fn safe_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        let safe = self
            .steps
            .iter()
            .filter(|s| s.controller == Controller::Safe)
            .count();
        safe as f64 / self.steps.len() as f64
    }
}

/// Policies that can be rolled out by [`run_episode`].
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a, V> {
    /// Nominal controller, no filter.
    Nominal,
    /// One calibrated model.
    Calibrated {
        model: &'a CalibratedModel<V>,
        alpha: f64,
    },
    /// Calibrated ensemble.
    Ensemble {
        models: &'a [CalibratedModel<V>],
        alpha: f64,
        strategy: Strategy,
    },
}

pub fn switched_step<E, V>(
    env: &E,
    controls: &ControlGrid,
    model: &CalibratedModel<V>,
    alpha: f64,
    x: &[f64],
) -> Result<(Control, StepRecord)>
where
    E: Environment + ?Sized,
    V: ValueFunction,
{
    let nominal = env.nominal_control(x);
    let nominal_next = env.next_state(x, &nominal);
    let bound = model.lower_bound(&nominal_next, alpha)?;
    let (control, controller, active) = if bound > 0.0 {
        (nominal, Controller::Nominal, None)
    } else {
        (greedy_control(env, controls, &model.value, x), Controller::Safe, Some(0))
    };
    let record = StepRecord {
        state: State::from(x),
        nominal_next,
        lower_bounds: vec![bound],
        controller,
        active,
        control: control.clone(),
    };
    Ok((control, record))
}

pub fn ensemble_step<E, V>(
    env: &E,
    controls: &ControlGrid,
    models: &[CalibratedModel<V>],
    alpha: f64,
    strategy: Strategy,
    x: &[f64],
    active: Option<usize>,
) -> Result<(Control, Option<usize>, StepRecord)>
where
    E: Environment + ?Sized,
    V: ValueFunction,
{
    if models.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let nominal = env.nominal_control(x);
    let nominal_next = env.next_state(x, &nominal);
    let bounds = models
        .iter()
        .map(|m| m.lower_bound(&nominal_next, alpha))
        .collect::<Result<Vec<_>>>()?;
    let (best, best_bound) = argmax(&bounds);
    let (control, controller, active) = if best_bound > 0.0 {
        (nominal, Controller::Nominal, None)
    } else {
        let j = match (strategy, active) {
            (Strategy::Single, Some(j)) if j < models.len() => j,
            _ => best,
        };
        let u = greedy_control(env, controls, &models[j].value, x);
        (u, Controller::Safe, Some(j))
    };
    let record = StepRecord {
        state: State::from(x),
        nominal_next,
        lower_bounds: bounds,
        controller,
        active,
        control: control.clone(),
    };
    Ok((control, active, record))
}

/// Index and value of the maximum, lowest index on ties.
fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trajectory: Vec<State>,
    pub trace: FilterTrace,
    pub outcome: EpisodeOutcome,
}

/// Roll `policy` from `x0` until a violation, the goal, or `horizon` steps.
pub fn run_episode<E, V>(env: &E, policy: &Policy<'_, V>, x0: State, horizon: usize) -> Result<Episode>
where
    E: Environment + ?Sized,
    V: ValueFunction,
{
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    check_len("initial state", env.state_dim(), x0.len())?;
    let controls = ControlGrid::for_system(env)?;
    let mut x = x0;
    let mut trajectory = vec![x.clone()];
    let mut trace = FilterTrace::default();
    let mut active = None;
    for _ in 0..horizon {
        if env.margin(&x) <= 0.0 || env.goal_reached(&x) {
            break;
        }
        let (u, record) = match policy {
            Policy::Nominal => {
                let u = env.nominal_control(&x);
                let nominal_next = env.next_state(&x, &u);
                let record = StepRecord {
                    state: x.clone(),
                    nominal_next,
                    lower_bounds: Vec::new(),
                    controller: Controller::Nominal,
                    active: None,
                    control: u.clone(),
                };
                (u, record)
            }
            Policy::Calibrated { model, alpha } => switched_step(env, &controls, model, *alpha, &x)?,
            Policy::Ensemble {
                models,
                alpha,
                strategy,
            } => {
                let (u, a, record) = ensemble_step(env, &controls, models, *alpha, *strategy, &x, active)?;
                active = a;
                (u, record)
            }
        };
        x = env.next_state(&x, &u);
        trajectory.push(x.clone());
        trace.steps.push(record);
    }
    let outcome = classify(env, &trajectory)?;
    Ok(Episode {
        trajectory,
        trace,
        outcome,
    })
}

/// Initial state drawn for trial `seed`; shared by every policy so that
/// comparisons are paired.
pub fn initial_state<E: Environment + ?Sized>(env: &E, seed: u64) -> State {
    let mut r = rng::Rng::seed_from_u64(seed);
    env.sample_initial(&mut r)
}

pub fn run_episode_seeded<E, V>(env: &E, policy: &Policy<'_, V>, horizon: usize, seed: u64) -> Result<Episode>
where
    E: Environment + ?Sized,
    V: ValueFunction,
{
    run_episode(env, policy, initial_state(env, seed), horizon)
}
