//! Deterministic symbolic environment simulator. A world is a total mapping
//! from grounded variables to symbolic values plus a tick counter; actions
//! execute under KB semantics (dependency check, then effect write) and
//! perturbations overwrite assignments between ticks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{ActionKb, SUBJECT};
use crate::sdg::{ground, parse_grounded_variable, GroundError, GroundedAssignment};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Ground(#[from] GroundError),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("goal set is empty")]
    EmptyGoal,
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// One plan step: a skill applied to an object, e.g. `(pick up, tomato)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MidLevelAction {
    pub action: String,
    pub object: String,
}

impl MidLevelAction {
    pub fn new(action: &str, object: &str) -> Self {
        Self {
            action: action.to_string(),
            object: object.to_string(),
        }
    }

    /// Parses the canonical `(action, object)` rendering. The split happens
    /// at the first comma, so actions may contain spaces but not commas.
    pub fn parse(text: &str) -> Option<Self> {
        let inner = text.trim().strip_prefix('(')?.strip_suffix(')')?;
        let (action, object) = inner.split_once(',')?;
        let action = action.trim();
        let object = object.trim();
        if action.is_empty() || object.is_empty() {
            return None;
        }
        Some(Self::new(action, object))
    }
}

impl std::fmt::Display for MidLevelAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.action, self.object)
    }
}

/// Total assignment of grounded variables to values, advanced one tick per
/// attempted action. Serialized form is sorted, so equal worlds serialize
/// bit-for-bit identically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub assignments: BTreeMap<String, String>,
    pub tick: u64,
}

impl WorldState {
    pub fn new(assignments: BTreeMap<String, String>) -> Self {
        Self {
            assignments,
            tick: 0,
        }
    }

    pub fn get(&self, variable: &str) -> Option<&str> {
        self.assignments.get(variable).map(|s| s.as_str())
    }

    /// True when the assignment holds. An undeclared variable never holds.
    pub fn satisfies(&self, a: &GroundedAssignment) -> bool {
        self.get(&a.variable) == Some(a.value.as_str())
    }
}

/// A scheduled environment event: after the action at `at_tick` completes,
/// every assignment in `set` is written over the world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub at_tick: u64,
    pub set: BTreeMap<String, String>,
}

/// Execution failure report: which step failed, which grounded dependency
/// assignments were false, and at which tick. `violated` is never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecError {
    pub failed: MidLevelAction,
    pub violated: Vec<GroundedAssignment>,
    pub tick: u64,
}

/// Result of one attempted action: the successor world (failed attempts keep
/// the assignments but still consume a tick) and the failure, if any.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub world: WorldState,
    pub error: Option<ExecError>,
}

impl StepOutcome {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Executes one grounded action. When every grounded dependency holds, the
/// grounded effects are written and the tick advances; otherwise the state is
/// left untouched, the tick still advances, and the violated dependency
/// assignments are reported in deterministic (sorted) order.
pub fn apply_action(
    world: &WorldState,
    step: &MidLevelAction,
    kb: &ActionKb,
    universe: &[String],
) -> Result<StepOutcome, SimError> {
    let schema = kb
        .action(&step.action)
        .ok_or_else(|| GroundError::UnknownAction(step.action.clone()))?;
    let grounded = ground(schema, &step.object, universe)?;

    let mut violated: Vec<GroundedAssignment> = grounded
        .dep
        .iter()
        .filter(|d| !world.satisfies(d))
        .cloned()
        .collect();
    violated.sort();

    let mut next = world.clone();
    next.tick += 1;
    if !violated.is_empty() {
        let error = ExecError {
            failed: step.clone(),
            violated,
            tick: next.tick,
        };
        return Ok(StepOutcome {
            world: next,
            error: Some(error),
        });
    }

    for eff in &grounded.eff {
        if !next.assignments.contains_key(&eff.variable) {
            return Err(SimError::Schema(format!(
                "effect writes undeclared variable '{}'",
                eff.variable
            )));
        }
        next.assignments
            .insert(eff.variable.clone(), eff.value.clone());
    }
    Ok(StepOutcome {
        world: next,
        error: None,
    })
}

/// The declared inverse of a step, applied to the same object. `None` when
/// the schema declares no reverse (self-superseding or irreversible actions).
pub fn reverse_action(step: &MidLevelAction, kb: &ActionKb) -> Option<MidLevelAction> {
    kb.action(&step.action)
        .and_then(|schema| schema.reversible_by.as_ref())
        .map(|rev| MidLevelAction::new(rev, &step.object))
}

/// Applies a perturbation, overwriting the listed assignments. Every target
/// variable must be declared and every value must lie in its domain.
pub fn inject(
    world: &WorldState,
    perturbation: &Perturbation,
    kb: &ActionKb,
    universe: &[String],
) -> Result<WorldState, SimError> {
    let mut next = world.clone();
    for (variable, value) in &perturbation.set {
        if !next.assignments.contains_key(variable) {
            return Err(SimError::Schema(format!(
                "perturbation targets undeclared variable '{variable}'"
            )));
        }
        check_domain(variable, value, kb, universe)?;
        next.assignments.insert(variable.clone(), value.clone());
    }
    Ok(next)
}

/// Fraction of goal assignments satisfied by the world.
pub fn goal_fraction(world: &WorldState, goals: &[GroundedAssignment]) -> Result<f64, SimError> {
    if goals.is_empty() {
        return Err(SimError::EmptyGoal);
    }
    for g in goals {
        if world.get(&g.variable).is_none() {
            return Err(SimError::Schema(format!(
                "goal references undeclared variable '{}'",
                g.variable
            )));
        }
    }
    let satisfied = goals.iter().filter(|g| world.satisfies(g)).count();
    Ok(satisfied as f64 / goals.len() as f64)
}

/// Validates `value` against the domain of `variable`'s template. A domain
/// containing `SUBJECT` admits any object of the universe.
pub fn check_domain(
    variable: &str,
    value: &str,
    kb: &ActionKb,
    universe: &[String],
) -> Result<(), SimError> {
    let (ref_key, _) = parse_grounded_variable(variable);
    let template = kb.template(ref_key).ok_or_else(|| {
        SimError::Schema(format!("variable '{variable}' has no template in the KB"))
    })?;
    let literal = template.values.iter().any(|v| v == value);
    let wildcard =
        template.values.iter().any(|v| v == SUBJECT) && universe.iter().any(|o| o == value);
    if literal || wildcard {
        Ok(())
    } else {
        Err(SimError::Schema(format!(
            "value '{value}' is outside the domain of '{variable}'"
        )))
    }
}

// ---------------------------------------------------------------------------
