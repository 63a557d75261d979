//! State-dependency graph: a directed bipartite graph over action nodes and
//! state-variable nodes. Effect edges run action -> state (annotated with the
//! written value); dependency edges run state -> action (annotated with the
//! required value). Also hosts grounding of schemas onto concrete objects.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{ActionKb, ActionSchema, VariableScope, SUBJECT};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroundError {
    #[error("unknown object '{0}'")]
    UnknownObject(String),
    #[error("unknown action '{0}'")]
    UnknownAction(String),
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// Action -> state edge: `action` writes `value` into `state`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectEdge {
    pub action: String,
    pub state: String,
    pub value: String,
}

/// State -> action edge: `action` requires `state` to equal `value`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepEdge {
    pub state: String,
    pub value: String,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDependencyGraph {
    pub action_nodes: Vec<String>,
    pub state_nodes: Vec<String>,
    pub effect_edges: Vec<EffectEdge>,
    pub dep_edges: Vec<DepEdge>,
}

/// Builds the graph from a KB. Nodes and edges are emitted in lexicographic
/// order so the construction is deterministic; state nodes are the template
/// reference keys that occur in at least one effect or dependency entry.
pub fn build_graph(kb: &ActionKb) -> StateDependencyGraph {
    let mut action_nodes: Vec<String> = kb.actions.iter().map(|a| a.name.clone()).collect();
    action_nodes.sort();

    let mut state_nodes: BTreeSet<String> = BTreeSet::new();
    let mut effect_edges = Vec::new();
    let mut dep_edges = Vec::new();
    for a in &kb.actions {
        for (var, value) in &a.eff {
            state_nodes.insert(var.clone());
            effect_edges.push(EffectEdge {
                action: a.name.clone(),
                state: var.clone(),
                value: value.clone(),
            });
        }
        for (var, value) in &a.dep {
            state_nodes.insert(var.clone());
            dep_edges.push(DepEdge {
                state: var.clone(),
                value: value.clone(),
                action: a.name.clone(),
            });
        }
    }
    effect_edges.sort_by(|a, b| (&a.action, &a.state).cmp(&(&b.action, &b.state)));
    dep_edges.sort_by(|a, b| (&a.action, &a.state).cmp(&(&b.action, &b.state)));

    StateDependencyGraph {
        action_nodes,
        state_nodes: state_nodes.into_iter().collect(),
        effect_edges,
        dep_edges,
    }
}

impl StateDependencyGraph {
    /// Effect edges written by `action`.
    pub fn effects_of(&self, action: &str) -> Vec<&EffectEdge> {
        self.effect_edges
            .iter()
            .filter(|e| e.action == action)
            .collect()
    }

    /// Effect edges writing into `state`.
    pub fn writers_of(&self, state: &str) -> Vec<&EffectEdge> {
        self.effect_edges
            .iter()
            .filter(|e| e.state == state)
            .collect()
    }

    /// Graphviz rendering with stable node and edge order.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph sdg {\n  rankdir=LR;\n");
        for a in &self.action_nodes {
            let _ = writeln!(out, "  \"a:{a}\" [shape=box, label=\"{a}\"];");
        }
        for s in &self.state_nodes {
            let _ = writeln!(out, "  \"s:{s}\" [shape=ellipse, label=\"{s}\"];");
        }
        for e in &self.effect_edges {
            let _ = writeln!(
                out,
                "  \"a:{}\" -> \"s:{}\" [label=\"{}\"];",
                e.action, e.state, e.value
            );
        }
        for e in &self.dep_edges {
            let _ = writeln!(
                out,
                "  \"s:{}\" -> \"a:{}\" [label=\"{}\", style=dashed];",
                e.state, e.action, e.value
            );
        }
        out.push_str("}\n");
        out
    }
}

/// A state-preparation action establishes a single agent-scoped assignment
/// and requires nothing: exactly one effect edge, targeting an agent-scoped
/// template, and an empty dependency set.
pub fn is_state_preparation(schema: &ActionSchema, kb: &ActionKb) -> bool {
    if !schema.dep.is_empty() || schema.eff.len() != 1 {
        return false;
    }
    kb.template(&schema.eff[0].0)
        .map(|t| t.scope == VariableScope::Agent)
        .unwrap_or(false)
}

// ---------------------------------------------------------------------------
// Grounding
// ---------------------------------------------------------------------------

/// A concrete variable assignment, e.g. `agent.holding = tomato` or
/// `opened(fridge) = true`. Contains no unresolved `SUBJECT` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroundedAssignment {
    pub variable: String,
    pub value: String,
}

impl std::fmt::Display for GroundedAssignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}={}", self.variable, self.value)
    }
}

/// A schema grounded onto one object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedAction {
    pub action: String,
    pub object: String,
    pub eff: Vec<GroundedAssignment>,
    pub dep: Vec<GroundedAssignment>,
}

/// Renders a grounded variable name for a template reference key.
pub fn grounded_variable(ref_key: &str, object: &str) -> String {
    if ref_key.starts_with("agent.") {
        ref_key.to_string()
    } else {
        format!("{ref_key}({object})")
    }
}

/// Splits a grounded variable name back into its template reference key and
/// optional object: `opened(fridge)` -> (`opened`, Some(`fridge`)).
pub fn parse_grounded_variable(variable: &str) -> (&str, Option<&str>) {
    if let Some(open) = variable.find('(') {
        if let Some(stripped) = variable[open..]
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
        {
            return (&variable[..open], Some(stripped));
        }
    }
    (variable, None)
}

/// Instantiates a schema for `object`, resolving every `SUBJECT` placeholder
/// and rewriting item-scoped templates to `variable(object)` form. Pure: the
/// same inputs always produce the same grounded action.
pub fn ground(
    schema: &ActionSchema,
    object: &str,
    universe: &[String],
) -> Result<GroundedAction, GroundError> {
    if !universe.iter().any(|o| o == object) {
        return Err(GroundError::UnknownObject(object.to_string()));
    }
    let resolve = |entries: &[(String, String)]| {
        entries
            .iter()
            .map(|(var, value)| GroundedAssignment {
                variable: grounded_variable(var, object),
                value: if value == SUBJECT {
                    object.to_string()
                } else {
                    value.clone()
                },
            })
            .collect()
    };
    Ok(GroundedAction {
        action: schema.name.clone(),
        object: object.to_string(),
        eff: resolve(&schema.eff),
        dep: resolve(&schema.dep),
    })
}

// ---------------------------------------------------------------------------
