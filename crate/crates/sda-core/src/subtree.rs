//! Repair search tree. Candidate actions (the replaced plan segment plus
//! proposer suggestions) are grown breadth-first from the pre-window belief
//! state; children must be dependency-satisfied, state-changing, and must not
//! overwrite everything their parent wrote. Accepted paths restore the
//! violated state and leave the plan suffix executable.

use std::collections::BTreeSet;
use std::collections::VecDeque;

use thiserror::Error;

use crate::kb::ActionKb;
use crate::proposer::{choose, render_path, Proposer};
use crate::sdg::{ground, GroundedAction};
use crate::sim::{apply_action, MidLevelAction, SimError, WorldState};

#[derive(Debug, Error)]
pub enum SubtreeError {
    #[error("no executable repair path restores {s_error}={v_need}")]
    NoValidPath { s_error: String, v_need: String },
    #[error("repair search supports at most {max} candidates, got {got}")]
    TooManyCandidates { max: usize, got: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

// ---------------------------------------------------------------------------
// Candidates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateOrigin {
    /// Step taken from the replaced plan segment.
    Original,
    /// Step suggested by the proposer for this failure.
    Suggested,
}

/// One admissible repair action. Consecutive original steps on the same
/// object outside the implicated set form a routine: only its head may be
/// entered, and each member forces the next, so routines run to completion.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub step: MidLevelAction,
    pub origin: CandidateOrigin,
    pub grounded: GroundedAction,
    /// Candidate that must immediately follow this one, if any.
    pub chain_next: Option<usize>,
    /// Whether the search may start this candidate directly.
    pub entry: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn references_undeclared(grounded: &GroundedAction, root: &WorldState) -> Option<String> {
    grounded
        .eff
        .iter()
        .chain(grounded.dep.iter())
        .map(|a| a.variable.clone())
        .find(|v| root.get(v).is_none())
}

/// Builds the candidate pool: the replaced segment's steps in order, then
/// suggestions, deduplicated on (action, object) with originals taking
/// precedence. Steps that cannot be grounded or that touch variables absent
/// from the scene are dropped with a warning.
pub fn build_candidates(
    window_steps: &[MidLevelAction],
    suggestions: &[MidLevelAction],
    error_items: &BTreeSet<String>,
    root: &WorldState,
    kb: &ActionKb,
    universe: &[String],
) -> CandidateSet {
    let mut candidates: Vec<Candidate> = Vec::new();
    // Window position -> candidate index, for chain wiring below.
    let mut slot: Vec<Option<usize>> = vec![None; window_steps.len()];

    let admit = |step: &MidLevelAction, origin: CandidateOrigin, list: &mut Vec<Candidate>| {
        if let Some(existing) = list.iter().position(|c| c.step == *step) {
            return Some(existing);
        }
        let schema = match kb.action(&step.action) {
            Some(s) => s,
            None => {
                log::warn!("dropping candidate {step}: unknown action");
                return None;
            }
        };
        let grounded = match ground(schema, &step.object, universe) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("dropping candidate {step}: {e}");
                return None;
            }
        };
        if let Some(variable) = references_undeclared(&grounded, root) {
            log::warn!("dropping candidate {step}: variable '{variable}' not in scene");
            return None;
        }
        list.push(Candidate {
            step: step.clone(),
            origin,
            grounded,
            chain_next: None,
            entry: true,
        });
        Some(list.len() - 1)
    };

    for (pos, step) in window_steps.iter().enumerate() {
        slot[pos] = admit(step, CandidateOrigin::Original, &mut candidates);
    }
    for step in suggestions {
        admit(step, CandidateOrigin::Suggested, &mut candidates);
    }

    // Maximal runs of consecutive original steps on one object outside the
    // implicated set become forced routines.
    let mut run_start = 0;
    while run_start < window_steps.len() {
        let object = &window_steps[run_start].object;
        let mut run_end = run_start + 1;
        while run_end < window_steps.len() && window_steps[run_end].object == *object {
            run_end += 1;
        }
        if run_end - run_start >= 2 && !error_items.contains(object) {
            for pos in run_start..run_end - 1 {
                if let (Some(here), Some(next)) = (slot[pos], slot[pos + 1]) {
                    if here != next {
                        candidates[here].chain_next = Some(next);
                        candidates[next].entry = false;
                    }
                }
            }
        }
        run_start = run_end;
    }

    CandidateSet { candidates }
}

// ---------------------------------------------------------------------------
// Tree
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TreeNode {
    /// Candidate applied to reach this node; `None` for the root.
    pub candidate: Option<usize>,
    pub parent: Option<usize>,
    pub state: WorldState,
    pub depth: usize,
    /// Candidates already used along the path to this node.
    used: u128,
    /// Candidate that must be this node's only child (routine in progress).
    forced: Option<usize>,
}

#[derive(Debug)]
pub struct SearchTree {
    pub nodes: Vec<TreeNode>,
}

impl SearchTree {
    pub fn new(root: WorldState) -> Self {
        SearchTree {
            nodes: vec![TreeNode {
                candidate: None,
                parent: None,
                state: root,
                depth: 0,
                used: 0,
                forced: None,
            }],
        }
    }

    /// Steps along the path from the root to `node`, in order.
    pub fn path(&self, node: usize, candidates: &CandidateSet) -> Vec<MidLevelAction> {
        let mut steps = Vec::new();
        let mut cursor = Some(node);
        while let Some(idx) = cursor {
            if let Some(ci) = self.nodes[idx].candidate {
                steps.push(candidates.candidates[ci].step.clone());
            }
            cursor = self.nodes[idx].parent;
        }
        steps.reverse();
        steps
    }
}

/// True when some grounded variable written by the parent action is left
/// untouched by the child: a child that overwrites everything its parent
/// wrote makes the parent pointless, so that branch is pruned.
pub fn not_covered(parent: &GroundedAction, child: &GroundedAction) -> bool {
    parent
        .eff
        .iter()
        .any(|p| !child.eff.iter().any(|c| c.variable == p.variable))
}

fn applies_change(state: &WorldState, grounded: &GroundedAction) -> bool {
    grounded
        .eff
        .iter()
        .any(|e| state.get(&e.variable) != Some(e.value.as_str()))
}

fn deps_satisfied(state: &WorldState, grounded: &GroundedAction) -> bool {
    grounded.dep.iter().all(|d| state.satisfies(d))
}

/// Grows the admissible children of one node. A child must satisfy its
/// dependencies in the node's state, change that state, be unused on the
/// path, and (except under the effect-free root) leave some parent effect
/// uncovered. A node inside a routine admits only the forced successor.
pub fn expand_children(
    tree: &mut SearchTree,
    node: usize,
    candidates: &CandidateSet,
) -> Vec<usize> {
    let parent_state = tree.nodes[node].state.clone();
    let parent_used = tree.nodes[node].used;
    let parent_depth = tree.nodes[node].depth;
    let parent_candidate = tree.nodes[node].candidate;
    let forced = tree.nodes[node].forced;

    let mut created = Vec::new();
    for (ci, candidate) in candidates.candidates.iter().enumerate() {
        match forced {
            Some(required) if ci != required => continue,
            None if !candidate.entry => continue,
            _ => {}
        }
        if parent_used & (1u128 << ci) != 0 {
            continue;
        }
        if !deps_satisfied(&parent_state, &candidate.grounded) {
            continue;
        }
        if !applies_change(&parent_state, &candidate.grounded) {
            continue;
        }
        if let Some(pi) = parent_candidate {
            if !not_covered(&candidates.candidates[pi].grounded, &candidate.grounded) {
                continue;
            }
        }
        let mut state = parent_state.clone();
        for eff in &candidate.grounded.eff {
            state
                .assignments
                .insert(eff.variable.clone(), eff.value.clone());
        }
        tree.nodes.push(TreeNode {
            candidate: Some(ci),
            parent: Some(node),
            state,
            depth: parent_depth + 1,
            used: parent_used | (1u128 << ci),
            forced: candidate.chain_next,
        });
        created.push(tree.nodes.len() - 1);
    }
    created
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Maximum accepted paths returned, shortest first.
    pub max_paths: usize,
    /// Extra depth allowed beyond the replaced segment's length.
    pub extra_depth: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_paths: 5,
            extra_depth: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RepairPaths {
    /// Accepted repair segments in breadth-first (shortest-first) order.
    pub paths: Vec<Vec<MidLevelAction>>,
    /// Number of tree nodes materialized during the search.
    pub expanded: usize,
}

fn suffix_executable(
    state: &WorldState,
    suffix: &[MidLevelAction],
    kb: &ActionKb,
    universe: &[String],
) -> Result<bool, SimError> {
    let mut world = state.clone();
    for step in suffix {
        let outcome = apply_action(&world, step, kb, universe)?;
        if !outcome.succeeded() {
            return Ok(false);
        }
        world = outcome.world;
    }
    Ok(true)
}

/// Breadth-first extraction of executable repair segments. A node is accepted
/// when it is not mid-routine, its state restores `s_error = v_need`, and the
/// remaining plan suffix simulates cleanly from that state. The root itself is
/// tested first, so "change nothing" is offered whenever rollback already
/// restored the state.
#[allow(clippy::too_many_arguments)]
pub fn extract_subsequences(
    root: WorldState,
    candidates: &CandidateSet,
    s_error: &str,
    v_need: &str,
    suffix: &[MidLevelAction],
    replaced_len: usize,
    config: &SearchConfig,
    kb: &ActionKb,
    universe: &[String],
) -> Result<RepairPaths, SubtreeError> {
    if candidates.len() > 128 {
        return Err(SubtreeError::TooManyCandidates {
            max: 128,
            got: candidates.len(),
        });
    }
    let depth_limit = replaced_len + config.extra_depth;
    let mut tree = SearchTree::new(root);
    let mut queue: VecDeque<usize> = VecDeque::new();
    queue.push_back(0);
    let mut paths = Vec::new();

    while let Some(node) = queue.pop_front() {
        let mid_routine = tree.nodes[node].forced.is_some();
        if !mid_routine
            && tree.nodes[node].state.get(s_error) == Some(v_need)
            && suffix_executable(&tree.nodes[node].state, suffix, kb, universe)?
        {
            paths.push(tree.path(node, candidates));
            if paths.len() == config.max_paths {
                break;
            }
        }
        if tree.nodes[node].depth < depth_limit {
            for child in expand_children(&mut tree, node, candidates) {
                queue.push_back(child);
            }
        }
    }

    if paths.is_empty() {
        return Err(SubtreeError::NoValidPath {
            s_error: s_error.to_string(),
            v_need: v_need.to_string(),
        });
    }
    Ok(RepairPaths {
        paths,
        expanded: tree.nodes.len(),
    })
}

/// Lets the proposer pick among accepted segments. A single candidate is
/// returned directly; a malformed or failed choice falls back to the first
/// (shortest) segment with a warning.
pub fn select_plan(
    proposer: &dyn Proposer,
    instruction: &str,
    paths: &[Vec<MidLevelAction>],
) -> usize {
    if paths.len() <= 1 {
        return 0;
    }
    let rendered: Vec<String> = paths.iter().map(|p| render_path(p)).collect();
    match choose(proposer, instruction, &rendered) {
        Ok(index) => index,
        Err(err) => {
            log::warn!("candidate choice failed ({err}); falling back to shortest");
            0
        }
    }
}

// ---------------------------------------------------------------------------
