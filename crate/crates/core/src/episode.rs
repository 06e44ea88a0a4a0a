//! Episode outcomes.

use crate::error::{Error, Result};
use crate::system::{Environment, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutcomeKind {
    Success,
    Violation,
    Timeout,
}

impl OutcomeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutcomeKind::Success => "success",
            OutcomeKind::Violation => "violation",
            OutcomeKind::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub kind: OutcomeKind,
    /// Index of the last state in the trajectory.
    pub terminal_step: usize,
    /// Minimum failure margin over every visited state.
    pub min_margin: f64,
}

/// Violation if any state has `h <= 0`, otherwise success if the goal was
/// reached within the trajectory, otherwise timeout.
pub fn classify<E: Environment + ?Sized>(env: &E, trajectory: &[State]) -> Result<EpisodeOutcome> {
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let min_margin = trajectory
        .iter()
        .map(|x| env.margin(x))
        .fold(f64::INFINITY, f64::min);
    let kind = if min_margin <= 0.0 {
        OutcomeKind::Violation
    } else if trajectory.iter().any(|x| env.goal_reached(x)) {
        OutcomeKind::Success
    } else {
        OutcomeKind::Timeout
    };
    Ok(EpisodeOutcome {
        kind,
        terminal_step: trajectory.len() - 1,
        min_margin,
    })
}
