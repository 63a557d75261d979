//! Error backtrack and diagnosis. Given a failed step and the belief trace
//! (effect-set replay of everything attempted so far), classifies the failure,
//! localizes the corrupting timestep, and derives the repair window.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::ActionKb;
use crate::sdg::{ground, is_state_preparation, parse_grounded_variable, StateDependencyGraph};
use crate::sim::{ExecError, MidLevelAction, WorldState};

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("inconsistent trace: {0}")]
    InconsistentTrace(String),
    #[error(transparent)]
    Ground(#[from] crate::sdg::GroundError),
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Belief trace: `snapshots[0]` is the initial world and `snapshots[t]` the
/// believed state after step `t`. Timesteps are 1-indexed plan positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateTrace {
    pub snapshots: Vec<WorldState>,
}

impl StateTrace {
    pub fn value_at(&self, t: usize, variable: &str) -> Option<&str> {
        self.snapshots.get(t).and_then(|w| w.get(variable))
    }
}

/// One attempted plan step together with its real-environment outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedStep {
    pub step: MidLevelAction,
    pub succeeded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorClass {
    /// The belief state satisfies every dependency: the environment diverged
    /// from the model (perturbation), so local replanning applies.
    EnvironmentState,
    /// The violated state is produced solely by a state-preparation action;
    /// inserting that action at the error step suffices.
    PreconditionPrepOnly,
    /// The violated state was corrupted by an earlier step; a windowed
    /// reconstruction is required.
    PreconditionDeep,
}

/// Full diagnosis of one failure. For `PreconditionPrepOnly` and
/// `EnvironmentState` the window degenerates to `(t_error, t_error)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub class: ErrorClass,
    /// Grounded variable whose violated requirement is diagnosed.
    pub s_error: String,
    /// Value that variable must hold for the failed step.
    pub v_need: String,
    pub t_error: usize,
    pub t_source: usize,
    pub t_start: usize,
    pub t_end: usize,
    /// Objects implicated by the violated state, sorted.
    pub error_items: Vec<String>,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Replays effect sets over the initial world: steps that succeeded in the
/// real environment write their grounded effects, failed steps are no-ops.
/// Dependencies are not re-checked; this is the agent's belief, not physics.
pub fn simulate_trace(
    initial: &WorldState,
    prefix: &[ExecutedStep],
    kb: &ActionKb,
    universe: &[String],
) -> Result<StateTrace, DiagnosisError> {
    let mut snapshots = Vec::with_capacity(prefix.len() + 1);
    snapshots.push(initial.clone());
    for executed in prefix {
        let mut next = snapshots.last().expect("non-empty").clone();
        next.tick += 1;
        if executed.succeeded {
            let schema = kb.action(&executed.step.action).ok_or_else(|| {
                crate::sdg::GroundError::UnknownAction(executed.step.action.clone())
            })?;
            let grounded = ground(schema, &executed.step.object, universe)?;
            for eff in grounded.eff {
                next.assignments.insert(eff.variable, eff.value);
            }
        }
        snapshots.push(next);
    }
    Ok(StateTrace { snapshots })
}

/// Classifies a failure against the belief trace and picks the diagnosed
/// violated assignment: the lexicographically first dependency of the failed
/// step that is false in `snapshot[t_error - 1]`. When none is false the
/// mismatch lies in the environment, and the real violation is reported.
pub fn classify_error(
    trace: &StateTrace,
    error: &ExecError,
    t_error: usize,
    kb: &ActionKb,
    graph: &StateDependencyGraph,
    universe: &[String],
) -> Result<(ErrorClass, GroundedViolation), DiagnosisError> {
    if t_error == 0 || t_error > trace.snapshots.len() {
        return Err(DiagnosisError::InconsistentTrace(format!(
            "t_error {t_error} outside trace of {} snapshots",
            trace.snapshots.len()
        )));
    }
    let before = &trace.snapshots[t_error - 1];
    let schema = kb
        .action(&error.failed.action)
        .ok_or_else(|| crate::sdg::GroundError::UnknownAction(error.failed.action.clone()))?;
    let grounded = ground(schema, &error.failed.object, universe)?;
    let mut violated: Vec<_> = grounded
        .dep
        .iter()
        .filter(|d| !before.satisfies(d))
        .cloned()
        .collect();
    violated.sort();

    let Some(first) = violated.first() else {
        let mut real = error.violated.clone();
        real.sort();
        let first = real.first().ok_or_else(|| {
            DiagnosisError::InconsistentTrace("execution error lists no violation".into())
        })?;
        return Ok((
            ErrorClass::EnvironmentState,
            GroundedViolation {
                s_error: first.variable.clone(),
                v_need: first.value.clone(),
            },
        ));
    };

    let (ref_key, _) = parse_grounded_variable(&first.variable);
    let writers = graph.writers_of(ref_key);
    let prep_only = writers.len() == 1
        && kb
            .action(&writers[0].action)
            .map(|s| is_state_preparation(s, kb))
            .unwrap_or(false);
    let class = if prep_only {
        ErrorClass::PreconditionPrepOnly
    } else {
        ErrorClass::PreconditionDeep
    };
    Ok((
        class,
        GroundedViolation {
            s_error: first.variable.clone(),
            v_need: first.value.clone(),
        },
    ))
}

/// The diagnosed violated assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedViolation {
    pub s_error: String,
    pub v_need: String,
}

/// Corruption timesteps: every `t < t_error` where the violated variable left
/// the needed value. The source is the latest such flip, or 1 when the value
/// never held.
pub fn compute_source(
    trace: &StateTrace,
    violation: &GroundedViolation,
    t_error: usize,
) -> Result<(usize, Vec<usize>), DiagnosisError> {
    if t_error > trace.snapshots.len() {
        return Err(DiagnosisError::InconsistentTrace(format!(
            "t_error {t_error} outside trace of {} snapshots",
            trace.snapshots.len()
        )));
    }
    let series: Vec<Option<&str>> = (0..t_error)
        .map(|t| trace.value_at(t, &violation.s_error))
        .collect();
    if series.iter().any(Option::is_none) {
        return Err(DiagnosisError::InconsistentTrace(format!(
            "variable '{}' missing from trace",
            violation.s_error
        )));
    }
    let need = violation.v_need.as_str();
    let lambda: Vec<usize> = (1..t_error)
        .filter(|&t| series[t - 1] == Some(need) && series[t] != Some(need))
        .collect();
    let t_source = lambda.last().copied().unwrap_or(1);
    Ok((t_source, lambda))
}

/// Repair window.
/// `t_start`: smallest timestep such that every step in `[t_start, t_source)`
/// is a state-preparation action. `t_end`: largest timestep such that every
/// step object in `(t_error, t_end]` belongs to the implicated object set.
pub fn compute_window(
    plan: &[MidLevelAction],
    t_source: usize,
    t_error: usize,
    error_items: &BTreeSet<String>,
    kb: &ActionKb,
) -> (usize, usize) {
    let is_prep = |t: usize| {
        plan.get(t - 1)
            .and_then(|step| kb.action(&step.action))
            .map(|schema| is_state_preparation(schema, kb))
            .unwrap_or(false)
    };
    let mut t_start = t_source;
    while t_start > 1 && is_prep(t_start - 1) {
        t_start -= 1;
    }
    let mut t_end = t_error;
    while t_end < plan.len() && error_items.contains(&plan[t_end].object) {
        t_end += 1;
    }
    (t_start, t_end)
}

/// Objects implicated by the violated state: the failed step's object, any
/// object embedded in the grounded variable name, and the variable's value at
/// the corruption point when that value names an object.
pub fn error_items(
    violation: &GroundedViolation,
    value_at_source: Option<&str>,
    o_error: &str,
    universe: &[String],
) -> BTreeSet<String> {
    let mut items = BTreeSet::new();
    items.insert(o_error.to_string());
    if let (_, Some(embedded)) = parse_grounded_variable(&violation.s_error) {
        if universe.iter().any(|o| o == embedded) {
            items.insert(embedded.to_string());
        }
    }
    if let Some(value) = value_at_source {
        if universe.iter().any(|o| o == value) {
            items.insert(value.to_string());
        }
    }
    items
}

/// Runs the full pipeline: classify, localize, window. `escalate` forces the
/// deep path for an `EnvironmentState` result (used after repeated local
/// replans of the same step have failed).
#[allow(clippy::too_many_arguments)]
pub fn diagnose(
    trace: &StateTrace,
    error: &ExecError,
    t_error: usize,
    plan: &[MidLevelAction],
    kb: &ActionKb,
    graph: &StateDependencyGraph,
    universe: &[String],
    escalate: bool,
) -> Result<DiagnosisReport, DiagnosisError> {
    let (mut class, violation) = classify_error(trace, error, t_error, kb, graph, universe)?;
    if class == ErrorClass::EnvironmentState && escalate {
        class = ErrorClass::PreconditionDeep;
    }
    if class != ErrorClass::PreconditionDeep {
        let items = error_items(
            &violation,
            trace.value_at(t_error - 1, &violation.s_error),
            &error.failed.object,
            universe,
        );
        return Ok(DiagnosisReport {
            class,
            s_error: violation.s_error,
            v_need: violation.v_need,
            t_error,
            t_source: t_error,
            t_start: t_error,
            t_end: t_error,
            error_items: items.into_iter().collect(),
        });
    }

    let (t_source, _) = compute_source(trace, &violation, t_error)?;
    let value_at_source =
        trace.value_at(t_source.min(trace.snapshots.len() - 1), &violation.s_error);
    let items = error_items(&violation, value_at_source, &error.failed.object, universe);
    let (t_start, t_end) = compute_window(plan, t_source, t_error, &items, kb);
    Ok(DiagnosisReport {
        class: ErrorClass::PreconditionDeep,
        s_error: violation.s_error,
        v_need: violation.v_need,
        t_error,
        t_source,
        t_start,
        t_end,
        error_items: items.into_iter().collect(),
    })
}

// ---------------------------------------------------------------------------
