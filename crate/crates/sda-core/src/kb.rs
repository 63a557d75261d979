//! Action knowledge base: state variable templates and per-skill action
//! schemas (effect and dependency sets), with JSON load/save and a
//! proposer-driven bootstrap for building a KB from a bare skill list.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proposer::{KbQuery, Proposer, ProposerError};

/// Placeholder value resolved to the action's object at grounding time.
pub const SUBJECT: &str = "SUBJECT";

#[derive(Debug, Error)]
pub enum KbError {
    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("schema error in action '{action}' ({field}): {message}")]
    Schema {
        action: String,
        field: String,
        message: String,
    },
    #[error("schema error in base states: {0}")]
    BaseState(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bootstrap failed for action '{action}': {message}")]
    Bootstrap { action: String, message: String },
    #[error(transparent)]
    Proposer(#[from] ProposerError),
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Whether a state variable describes the agent or an individual item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableScope {
    Agent,
    Item,
}

/// A named state variable with its symbolic value domain. Agent-scoped
/// templates ground to `agent.<name>`; item-scoped templates ground to
/// `<name>(<object>)`. A domain containing `SUBJECT` additionally admits any
/// object of the scenario universe as a value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateVariableTemplate {
    pub name: String,
    pub scope: VariableScope,
    pub values: Vec<String>,
}

impl StateVariableTemplate {
    /// Reference key used by effect/dependency entries: `agent.<name>` for
    /// agent-scoped templates, the bare name for item-scoped ones.
    pub fn ref_key(&self) -> String {
        match self.scope {
            VariableScope::Agent => format!("agent.{}", self.name),
            VariableScope::Item => self.name.clone(),
        }
    }
}

/// One skill's model: the state assignments it writes (`eff`) and the
/// assignments that must hold before it can run (`dep`). Entries are
/// `[template_ref, value]` pairs; `SUBJECT` stands for the action's object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSchema {
    pub name: String,
    pub eff: Vec<(String, String)>,
    pub dep: Vec<(String, String)>,
    #[serde(default)]
    pub reversible_by: Option<String>,
    #[serde(default)]
    pub irreversible: bool,
}

/// The full knowledge base: templates plus one schema per skill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionKb {
    pub base_states: Vec<StateVariableTemplate>,
    pub actions: Vec<ActionSchema>,
}

impl ActionKb {
    pub fn action(&self, name: &str) -> Option<&ActionSchema> {
        self.actions.iter().find(|a| a.name == name)
    }

    /// Looks a template up by its reference key (`agent.position`, `opened`).
    pub fn template(&self, ref_key: &str) -> Option<&StateVariableTemplate> {
        self.base_states.iter().find(|t| t.ref_key() == ref_key)
    }

    pub fn skill_names(&self) -> Vec<String> {
        self.actions.iter().map(|a| a.name.clone()).collect()
    }

    /// Checks structural invariants. Hard violations are errors; soft issues
    /// (dependencies no action produces, reverse actions missing from the
    /// skill set) are returned as warnings.
    pub fn validate(&self) -> Result<Vec<String>, KbError> {
        let mut seen = BTreeSet::new();
        for t in &self.base_states {
            if t.values.is_empty() {
                return Err(KbError::BaseState(format!(
                    "template '{}' has an empty value domain",
                    t.name
                )));
            }
            if !seen.insert(t.ref_key()) {
                return Err(KbError::BaseState(format!(
                    "duplicate template '{}'",
                    t.ref_key()
                )));
            }
        }

        let mut names = BTreeSet::new();
        for a in &self.actions {
            if !names.insert(a.name.clone()) {
                return Err(KbError::Schema {
                    action: a.name.clone(),
                    field: "name".into(),
                    message: "duplicate action name".into(),
                });
            }
            if a.eff.is_empty() {
                return Err(KbError::Schema {
                    action: a.name.clone(),
                    field: "eff".into(),
                    message: "effect set must be non-empty".into(),
                });
            }
            if a.reversible_by.is_some() && a.irreversible {
                return Err(KbError::Schema {
                    action: a.name.clone(),
                    field: "reversible_by".into(),
                    message: "reversible_by and irreversible are mutually exclusive".into(),
                });
            }
            for (field, entries) in [("eff", &a.eff), ("dep", &a.dep)] {
                let mut vars = BTreeSet::new();
                for (var, value) in entries {
                    if !vars.insert(var.clone()) {
                        return Err(KbError::Schema {
                            action: a.name.clone(),
                            field: field.into(),
                            message: format!("duplicate variable '{var}'"),
                        });
                    }
                    let template = self.template(var).ok_or_else(|| KbError::Schema {
                        action: a.name.clone(),
                        field: field.into(),
                        message: format!("unknown state variable '{var}'"),
                    })?;
                    if !template.values.iter().any(|v| v == value) {
                        return Err(KbError::Schema {
                            action: a.name.clone(),
                            field: field.into(),
                            message: format!("value '{value}' for '{var}' is outside its domain"),
                        });
                    }
                }
            }
        }

        // Soft checks: a dependency on an assignment no action can produce is
        // suspicious but legal (the world may simply start that way), and a
        // reverse action outside the skill set can still be emitted during
        // rollback (it just cannot be executed).
        let mut warnings = Vec::new();
        let produced: BTreeSet<(String, String)> = self
            .actions
            .iter()
            .flat_map(|a| a.eff.iter().cloned())
            .collect();
        for a in &self.actions {
            for (var, value) in &a.dep {
                if !produced.contains(&(var.clone(), value.clone())) {
                    warnings.push(format!(
                        "action '{}' depends on {var}={value}, which no action produces",
                        a.name
                    ));
                }
            }
            if let Some(rev) = &a.reversible_by {
                if self.action(rev).is_none() {
                    warnings.push(format!(
                        "action '{}' is reversible by '{rev}', which is not in the skill set",
                        a.name
                    ));
                }
            }
        }
        Ok(warnings)
    }

    /// Canonical ordering: templates by (scope, name), actions by name.
    /// Applied before saving so serialized KBs are stable.
    pub fn normalize(&mut self) {
        self.base_states
            .sort_by(|a, b| (a.scope, &a.name).cmp(&(b.scope, &b.name)));
        self.actions.sort_by(|a, b| a.name.cmp(&b.name));
    }
}

// ---------------------------------------------------------------------------
// Load / save
// ---------------------------------------------------------------------------

/// Parses and validates a KB file. Validation warnings are logged.
pub fn load_kb(path: &Path) -> Result<ActionKb, KbError> {
    let text = std::fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let kb: ActionKb = serde_json::from_str(&text).map_err(|source| KbError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    for warning in kb.validate()? {
        log::warn!("{}: {warning}", path.display());
    }
    Ok(kb)
}

/// Writes the KB in canonical form (sorted templates and actions, two-space
/// indentation, trailing newline).
pub fn save_kb(kb: &ActionKb, path: &Path) -> Result<(), KbError> {
    std::fs::write(path, to_canonical_json(kb)).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn to_canonical_json(kb: &ActionKb) -> String {
    let mut sorted = kb.clone();
    sorted.normalize();
    let mut text = serde_json::to_string_pretty(&sorted).expect("KB serialization");
    text.push('\n');
    text
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

/// Builds a KB from a skill list by querying the proposer once per action for
/// its effect set and once for its dependency set. Skills are processed in
/// lexicographic order; state variables discovered in responses are appended
/// to the state set before the dependency pass, so the state set only grows.
pub fn bootstrap_kb(
    skills: &[String],
    proposer: &dyn Proposer,
    base_states: &[StateVariableTemplate],
) -> Result<ActionKb, KbError> {
    let mut states: Vec<StateVariableTemplate> = base_states.to_vec();
    let mut ordered: Vec<String> = skills.to_vec();
    ordered.sort();
    ordered.dedup();

    let known = |states: &[StateVariableTemplate]| -> Vec<String> {
        let mut keys: Vec<String> = states.iter().map(|t| t.ref_key()).collect();
        keys.sort();
        keys
    };

    // Effect pass first: every skill must write something, and discovered
    // variables have to exist before dependencies may reference them.
    let mut effects: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for skill in &ordered {
        let pairs = crate::proposer::query_kb(proposer, KbQuery::Effects, skill, &known(&states))?;
        if pairs.is_empty() {
            return Err(KbError::Bootstrap {
                action: skill.clone(),
                message: "proposer returned an empty effect set".into(),
            });
        }
        for (var, value) in &pairs {
            absorb_state(&mut states, var, value);
        }
        effects.insert(skill.clone(), pairs);
    }

    let mut actions = Vec::new();
    for skill in &ordered {
        let dep =
            crate::proposer::query_kb(proposer, KbQuery::Dependencies, skill, &known(&states))?;
        for (var, value) in &dep {
            absorb_state(&mut states, var, value);
        }
        actions.push(ActionSchema {
            name: skill.clone(),
            eff: effects.remove(skill).unwrap_or_default(),
            dep,
            reversible_by: None,
            irreversible: false,
        });
    }

    let mut kb = ActionKb {
        base_states: states,
        actions,
    };
    kb.normalize();
    for warning in kb.validate()? {
        log::warn!("bootstrap: {warning}");
    }
    Ok(kb)
}

/// Registers a referenced variable, creating its template on first sight and
/// widening its value domain otherwise.
fn absorb_state(states: &mut Vec<StateVariableTemplate>, var: &str, value: &str) {
    let (scope, name) = match var.strip_prefix("agent.") {
        Some(rest) => (VariableScope::Agent, rest.to_string()),
        None => (VariableScope::Item, var.to_string()),
    };
    if let Some(existing) = states
        .iter_mut()
        .find(|t| t.scope == scope && t.name == name)
    {
        if !existing.values.iter().any(|v| v == value) {
            existing.values.push(value.to_string());
        }
    } else {
        states.push(StateVariableTemplate {
            name,
            scope,
            values: vec![value.to_string()],
        });
    }
}

// ---------------------------------------------------------------------------
