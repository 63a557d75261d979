//! Shared helpers for the integration suites: fixture paths, plus independent
//! reference implementations ("oracles") of failure diagnosis and repair
//! segment enumeration. The oracles work on plain string maps, follow the
//! documented rules literally, and share no logic with the engine, so the two
//! sides can be compared on randomized instances.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use sda_core::kb::{ActionKb, VariableScope, SUBJECT};
use sda_core::sim::MidLevelAction;

// ---------------------------------------------------------------------------
// Fixture paths
// ---------------------------------------------------------------------------

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture_kb() -> ActionKb {
    sda_core::kb::load_kb(&fixtures_dir().join("kb/alfred_kb.json")).expect("fixture kb")
}

// ---------------------------------------------------------------------------
// Oracle grounding
// ---------------------------------------------------------------------------

/// Plain-map world state used by the oracles.
pub type OracleState = BTreeMap<String, String>;

fn oracle_scope(kb: &ActionKb, ref_key: &str) -> Option<VariableScope> {
    kb.base_states.iter().find_map(|t| {
        let matches = match t.scope {
            VariableScope::Agent => ref_key == format!("agent.{}", t.name),
            VariableScope::Item => ref_key == t.name,
        };
        matches.then_some(t.scope)
    })
}

fn oracle_variable(kb: &ActionKb, ref_key: &str, object: &str) -> Option<String> {
    match oracle_scope(kb, ref_key)? {
        VariableScope::Agent => Some(ref_key.to_string()),
        VariableScope::Item => Some(format!("{ref_key}({object})")),
    }
}

fn oracle_value(value: &str, object: &str) -> String {
    if value == SUBJECT {
        object.to_string()
    } else {
        value.to_string()
    }
}

/// Grounded (variable, value) pairs of one entry list; `None` when the action
/// or a referenced template is unknown.
fn oracle_entries(
    kb: &ActionKb,
    entries: &[(String, String)],
    object: &str,
) -> Option<Vec<(String, String)>> {
    entries
        .iter()
        .map(|(ref_key, value)| {
            Some((
                oracle_variable(kb, ref_key, object)?,
                oracle_value(value, object),
            ))
        })
        .collect()
}

pub fn oracle_effects(kb: &ActionKb, step: &MidLevelAction) -> Option<Vec<(String, String)>> {
    let schema = kb.actions.iter().find(|a| a.name == step.action)?;
    oracle_entries(kb, &schema.eff, &step.object)
}

pub fn oracle_deps(kb: &ActionKb, step: &MidLevelAction) -> Option<Vec<(String, String)>> {
    let schema = kb.actions.iter().find(|a| a.name == step.action)?;
    oracle_entries(kb, &schema.dep, &step.object)
}

/// A state-preparation skill requires nothing and writes exactly one
/// agent-scoped variable.
pub fn oracle_is_prep(kb: &ActionKb, action: &str) -> bool {
    let Some(schema) = kb.actions.iter().find(|a| a.name == action) else {
        return false;
    };
    schema.dep.is_empty()
        && schema.eff.len() == 1
        && oracle_scope(kb, &schema.eff[0].0) == Some(VariableScope::Agent)
}

// ---------------------------------------------------------------------------
// Oracle belief trace and diagnosis
// ---------------------------------------------------------------------------

/// Belief snapshots: `belief[0]` is the initial state; each step that reported
/// success writes its grounded effects, failed steps change nothing.
pub fn oracle_belief(
    initial: &OracleState,
    executed: &[(MidLevelAction, bool)],
    kb: &ActionKb,
) -> Vec<OracleState> {
    let mut snapshots = vec![initial.clone()];
    for (step, succeeded) in executed {
        let mut next = snapshots.last().unwrap().clone();
        if *succeeded {
            for (variable, value) in oracle_effects(kb, step).expect("known action") {
                next.insert(variable, value);
            }
        }
        snapshots.push(next);
    }
    snapshots
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleDiagnosis {
    pub class: &'static str,
    pub s_error: String,
    pub v_need: String,
    pub t_source: usize,
    pub t_start: usize,
    pub t_end: usize,
    pub items: BTreeSet<String>,
}

/// Reference diagnosis. `real_violated` lists the violated assignments the
/// environment reported for the failed step (sorted or not).
pub fn oracle_diagnose(
    belief: &[OracleState],
    plan: &[MidLevelAction],
    failed: &MidLevelAction,
    real_violated: &[(String, String)],
    t_error: usize,
    kb: &ActionKb,
    universe: &[String],
) -> OracleDiagnosis {
    let before = &belief[t_error - 1];

    // The diagnosed violation is the lexicographically first dependency of the
    // failed step that is false in the belief state before the failure.
    let mut deps = oracle_deps(kb, failed).expect("known action");
    deps.sort();
    let model_violated = deps
        .iter()
        .find(|(variable, value)| before.get(variable) != Some(value))
        .cloned();

    let (s_error, v_need) = match model_violated {
        None => {
            // Belief satisfies everything: the environment diverged.
            let mut real = real_violated.to_vec();
            real.sort();
            let (variable, value) = real.first().expect("real violation").clone();
            return OracleDiagnosis {
                class: "env",
                s_error: variable,
                v_need: value,
                t_source: t_error,
                t_start: t_error,
                t_end: t_error,
                items: BTreeSet::new(),
            };
        }
        Some(pair) => pair,
    };

    // A violation writable only by a single state-preparation skill is fixed
    // by inserting that skill; no window is needed.
    let ref_key = s_error.split('(').next().unwrap_or(&s_error).to_string();
    let writers: Vec<&str> = kb
        .actions
        .iter()
        .filter(|a| a.eff.iter().any(|(r, _)| *r == ref_key))
        .map(|a| a.name.as_str())
        .collect();
    if writers.len() == 1 && oracle_is_prep(kb, writers[0]) {
        return OracleDiagnosis {
            class: "prep",
            s_error,
            v_need,
            t_source: t_error,
            t_start: t_error,
            t_end: t_error,
            items: BTreeSet::new(),
        };
    }

    // Corruption point: the latest step before the failure at which the
    // variable left the needed value; 1 when the value never held.
    let lambda: Vec<usize> = (1..t_error)
        .filter(|&t| {
            belief[t - 1].get(&s_error) == Some(&v_need) && belief[t].get(&s_error) != Some(&v_need)
        })
        .collect();
    let t_source = lambda.last().copied().unwrap_or(1);

    // Implicated objects: the failed step's object, the object embedded in the
    // violated variable, and the value the variable took at the corruption
    // point when that value names an object.
    let mut items = BTreeSet::new();
    items.insert(failed.object.clone());
    if let Some(embedded) = embedded_object(&s_error) {
        if universe.contains(&embedded) {
            items.insert(embedded);
        }
    }
    let at_source = belief[t_source.min(belief.len() - 1)].get(&s_error);
    if let Some(value) = at_source {
        if universe.contains(value) {
            items.insert(value.clone());
        }
    }

    // Window: extend down over state-preparation steps, up over steps whose
    // object is implicated.
    let mut t_start = t_source;
    while t_start > 1 {
        let step = &plan[t_start - 2];
        if oracle_is_prep(kb, &step.action) {
            t_start -= 1;
        } else {
            break;
        }
    }
    let mut t_end = t_error;
    while t_end < plan.len() && items.contains(&plan[t_end].object) {
        t_end += 1;
    }

    OracleDiagnosis {
        class: "deep",
        s_error,
        v_need,
        t_source,
        t_start,
        t_end,
        items,
    }
}

fn embedded_object(variable: &str) -> Option<String> {
    let open = variable.find('(')?;
    let close = variable.rfind(')')?;
    (close > open).then(|| variable[open + 1..close].to_string())
}

// ---------------------------------------------------------------------------
// Oracle repair enumeration
// ---------------------------------------------------------------------------

struct OracleCandidate {
    step: MidLevelAction,
    eff: Vec<(String, String)>,
    dep: Vec<(String, String)>,
    chain_next: Option<usize>,
    entry: bool,
}

/// Exhaustively enumerates every repair segment the search contract admits:
/// stepwise executable from the root, each step changing the state, no step
/// fully overwriting its predecessor's effects, window routines entered at
/// their head and run to completion, each candidate used at most once, ending
/// (outside a routine) with the violated variable restored and the plan suffix
/// executable. Paths are returned as rendered step lists.
#[allow(clippy::too_many_arguments)]
pub fn oracle_enumerate(
    root: &OracleState,
    window: &[MidLevelAction],
    suggestions: &[MidLevelAction],
    items: &BTreeSet<String>,
    s_error: &str,
    v_need: &str,
    suffix: &[MidLevelAction],
    depth_limit: usize,
    kb: &ActionKb,
) -> BTreeSet<Vec<String>> {
    // Candidate pool: window steps in order, then suggestions, deduplicated,
    // dropping steps that are unknown or touch variables absent from the root.
    let mut pool: Vec<OracleCandidate> = Vec::new();
    let mut slot: Vec<Option<usize>> = vec![None; window.len()];
    let admit = |step: &MidLevelAction, pool: &mut Vec<OracleCandidate>| -> Option<usize> {
        if let Some(existing) = pool.iter().position(|c| c.step == *step) {
            return Some(existing);
        }
        let eff = oracle_effects(kb, step)?;
        let dep = oracle_deps(kb, step)?;
        if eff
            .iter()
            .chain(dep.iter())
            .any(|(variable, _)| !root.contains_key(variable))
        {
            return None;
        }
        pool.push(OracleCandidate {
            step: step.clone(),
            eff,
            dep,
            chain_next: None,
            entry: true,
        });
        Some(pool.len() - 1)
    };
    for (pos, step) in window.iter().enumerate() {
        slot[pos] = admit(step, &mut pool);
    }
    for step in suggestions {
        admit(step, &mut pool);
    }

    // Routines: maximal runs (length >= 2) of window steps on one object
    // outside the implicated set.
    let mut run_start = 0;
    while run_start < window.len() {
        let object = &window[run_start].object;
        let mut run_end = run_start + 1;
        while run_end < window.len() && window[run_end].object == *object {
            run_end += 1;
        }
        if run_end - run_start >= 2 && !items.contains(object) {
            for pos in run_start..run_end - 1 {
                if let (Some(here), Some(next)) = (slot[pos], slot[pos + 1]) {
                    if here != next {
                        pool[here].chain_next = Some(next);
                        pool[next].entry = false;
                    }
                }
            }
        }
        run_start = run_end;
    }

    let suffix_ok = |state: &OracleState| -> bool {
        let mut world = state.clone();
        for step in suffix {
            let (Some(eff), Some(dep)) = (oracle_effects(kb, step), oracle_deps(kb, step)) else {
                return false;
            };
            if dep
                .iter()
                .any(|(variable, value)| world.get(variable) != Some(value))
            {
                return false;
            }
            for (variable, value) in eff {
                world.insert(variable, value);
            }
        }
        true
    };

    // One frame per unexplored node: (state, used candidates, last expanded
    // candidate, forced next candidate, rendered path so far).
    type Frame = (
        OracleState,
        Vec<bool>,
        Option<usize>,
        Option<usize>,
        Vec<String>,
    );
    let mut found: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut stack: Vec<Frame> = vec![(
        root.clone(),
        vec![false; pool.len()],
        None,
        None,
        Vec::new(),
    )];
    while let Some((state, used, last, forced, path)) = stack.pop() {
        if forced.is_none() && state.get(s_error) == Some(&v_need.to_string()) && suffix_ok(&state)
        {
            found.insert(path.clone());
        }
        if path.len() == depth_limit {
            continue;
        }
        for (ci, candidate) in pool.iter().enumerate() {
            match forced {
                Some(required) if ci != required => continue,
                None if !candidate.entry => continue,
                _ => {}
            }
            if used[ci] {
                continue;
            }
            if candidate
                .dep
                .iter()
                .any(|(variable, value)| state.get(variable) != Some(value))
            {
                continue;
            }
            if candidate
                .eff
                .iter()
                .all(|(variable, value)| state.get(variable) == Some(value))
            {
                continue;
            }
            if let Some(li) = last {
                let parent: &OracleCandidate = &pool[li];
                let covered = parent
                    .eff
                    .iter()
                    .all(|(variable, _)| candidate.eff.iter().any(|(cv, _)| cv == variable));
                if covered {
                    continue;
                }
            }
            let mut next_state = state.clone();
            for (variable, value) in &candidate.eff {
                next_state.insert(variable.clone(), value.clone());
            }
            let mut next_used = used.clone();
            next_used[ci] = true;
            let mut next_path = path.clone();
            next_path.push(candidate.step.to_string());
            stack.push((
                next_state,
                next_used,
                Some(ci),
                candidate.chain_next,
                next_path,
            ));
        }
    }
    found
}

/// Rendering used when comparing engine paths against the oracle set.
pub fn render_steps(steps: &[MidLevelAction]) -> Vec<String> {
    steps.iter().map(|s| s.to_string()).collect()
}
