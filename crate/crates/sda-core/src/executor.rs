//! Closed-loop episode executor. Runs a plan against the simulator, routes
//! failures into diagnosis, performs reverse/fake execution, applies the
//! configured recovery strategy, and emits a structured event log.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bench::Scenario;
use crate::diagnosis::{
    diagnose, simulate_trace, DiagnosisError, DiagnosisReport, ErrorClass, ExecutedStep, StateTrace,
};
use crate::kb::{ActionKb, SUBJECT};
use crate::proposer::{self, render_path, Proposer, ProposerError};
use crate::sdg::parse_grounded_variable;
use crate::sim::{
    apply_action, goal_fraction, inject, reverse_action, ExecError, MidLevelAction, SimError,
    WorldState,
};
use crate::subtree::{
    build_candidates, extract_subsequences, select_plan, SearchConfig, SubtreeError,
};

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error(transparent)]
    Proposer(#[from] ProposerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Diagnosis(#[from] DiagnosisError),
    #[error(transparent)]
    Subtree(#[from] SubtreeError),
    #[error("plan is empty after validation")]
    EmptyPlan,
    #[error("cannot insert preparation step: {0}")]
    PrepInsertion(String),
}

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Skip the failed step and continue.
    None,
    /// Regenerate the remainder of the plan from the failed step.
    Local,
    /// Reset the world to its initial state and regenerate the whole plan.
    Global,
    /// Diagnosis plus windowed reconstruction with rollback.
    Sda,
    /// Diagnosis plus direct splice of unverified suggestions.
    SdaNoTree,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::Local,
        Strategy::Global,
        Strategy::Sda,
        Strategy::SdaNoTree,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Local => "local",
            Strategy::Global => "global",
            Strategy::Sda => "sda",
            Strategy::SdaNoTree => "sda_no_tree",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Strategy::None),
            "local" => Ok(Strategy::Local),
            "global" => Ok(Strategy::Global),
            "sda" => Ok(Strategy::Sda),
            "sda_no_tree" => Ok(Strategy::SdaNoTree),
            other => Err(format!(
                "unknown strategy '{other}' (expected none|local|global|sda|sda_no_tree)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    Repaired,
    InsertedPrep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step: MidLevelAction,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    /// Maximum simulator applications per episode (plan steps and reversals).
    pub step_budget: u64,
    /// Maximum recovery invocations per episode.
    pub repair_budget: u32,
    /// Consecutive environment-side failures of one step tolerated before the
    /// failure is escalated to a windowed reconstruction.
    pub max_local_replans: u32,
    pub search: SearchConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            step_budget: 50,
            repair_budget: 5,
            max_local_replans: 2,
            search: SearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub tick: u64,
    pub event: String,
    pub payload: Value,
}

impl LogEvent {
    /// Line-delimited JSON rendering.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("serializable event")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario_id: String,
    pub strategy: Strategy,
    pub success: bool,
    pub goal_fraction: f64,
    pub corrections: u32,
    pub ticks: u64,
    /// Reason the episode stopped early, if it did.
    pub abort: Option<String>,
    /// Final plan with provenance markers.
    pub plan: Vec<PlanStep>,
    /// Belief trace over the executed prefix of the final plan.
    pub trace: StateTrace,
    pub events: Vec<LogEvent>,
}

// ---------------------------------------------------------------------------
// Rollback
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RollbackOutcome {
    pub world: WorldState,
    /// Reverse actions executed, in reverse-chronological order of the
    /// steps they undo.
    pub reversed: Vec<MidLevelAction>,
    /// Reverse actions whose own dependencies failed; recorded, not fatal.
    pub reverse_failed: Vec<MidLevelAction>,
    /// Irreversible executed steps; identical upcoming steps are skipped.
    pub fake: Vec<MidLevelAction>,
    /// Simulator applications consumed.
    pub ticks: u64,
}

/// Reverse execution over the window interior `[t_start, t_error)`: executed
/// steps are undone last-first via their declared reverses; steps without a
/// reverse that are marked irreversible enter the fake-execution set. A
/// failing reverse is recorded and skipped (best effort).
pub fn rollback(
    world: &WorldState,
    executed: &[ExecutedStep],
    t_start: usize,
    t_error: usize,
    kb: &ActionKb,
    universe: &[String],
) -> Result<RollbackOutcome, SimError> {
    let mut outcome = RollbackOutcome {
        world: world.clone(),
        reversed: Vec::new(),
        reverse_failed: Vec::new(),
        fake: Vec::new(),
        ticks: 0,
    };
    for t in (t_start..t_error).rev() {
        let Some(entry) = executed.get(t - 1) else {
            continue;
        };
        if !entry.succeeded {
            continue;
        }
        match reverse_action(&entry.step, kb) {
            Some(reverse) if kb.action(&reverse.action).is_none() => {
                // Declared reverse without a schema of its own: it cannot be
                // executed, only reported.
                log::warn!("reverse {reverse} is not an executable skill");
                outcome.reverse_failed.push(reverse);
            }
            Some(reverse) => {
                let step = apply_action(&outcome.world, &reverse, kb, universe)?;
                outcome.ticks += 1;
                outcome.world = step.world;
                if step.error.is_some() {
                    outcome.reverse_failed.push(reverse);
                } else {
                    outcome.reversed.push(reverse);
                }
            }
            None => {
                let irreversible = kb
                    .action(&entry.step.action)
                    .map(|s| s.irreversible)
                    .unwrap_or(false);
                if irreversible {
                    outcome.fake.push(entry.step.clone());
                }
            }
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Episode runner
// ---------------------------------------------------------------------------

struct Runner<'a> {
    scenario: &'a Scenario,
    strategy: Strategy,
    proposer: &'a dyn Proposer,
    config: &'a EpisodeConfig,
    world: WorldState,
    plan: Vec<PlanStep>,
    /// Outcomes for plan positions `1..=history.len()` of the current plan.
    history: Vec<ExecutedStep>,
    /// Zero-based index of the next plan step.
    ptr: usize,
    ticks: u64,
    corrections: u32,
    fake: Vec<MidLevelAction>,
    events: Vec<LogEvent>,
    /// Consecutive environment-side failures of one step.
    env_streak: Option<(MidLevelAction, u32)>,
    fired: Vec<bool>,
    no_valid_path_fallback_used: bool,
    abort: Option<String>,
}

impl<'a> Runner<'a> {
    fn emit(&mut self, event: &str, payload: Value) {
        self.events.push(LogEvent {
            tick: self.ticks,
            event: event.to_string(),
            payload,
        });
    }

    fn plan_actions(&self) -> Vec<MidLevelAction> {
        self.plan.iter().map(|p| p.step.clone()).collect()
    }

    fn rendered_plan(&self) -> Vec<String> {
        self.plan.iter().map(|p| p.step.to_string()).collect()
    }

    /// Drops steps naming unknown actions or objects; the engine never
    /// executes an unvalidated action.
    fn sanitize(&self, steps: Vec<MidLevelAction>) -> Vec<MidLevelAction> {
        steps
            .into_iter()
            .filter(|step| {
                if self.scenario.kb.action(&step.action).is_none() {
                    log::warn!("dropping plan step {step}: unknown action");
                    return false;
                }
                if !self.scenario.objects.iter().any(|o| o == &step.object) {
                    log::warn!("dropping plan step {step}: unknown object");
                    return false;
                }
                true
            })
            .collect()
    }

    /// Applies every not-yet-fired perturbation scheduled at or before the
    /// current tick.
    fn fire_perturbations(&mut self) -> Result<(), SimError> {
        for (i, p) in self.scenario.perturbations.iter().enumerate() {
            if !self.fired[i] && p.at_tick <= self.ticks {
                self.world = inject(&self.world, p, &self.scenario.kb, &self.scenario.objects)?;
                self.fired[i] = true;
                log::info!(
                    "scenario {}: perturbation at tick {} applied",
                    self.scenario.id,
                    p.at_tick
                );
            }
        }
        Ok(())
    }

    fn apply_real(&mut self, step: &MidLevelAction) -> Result<Option<ExecError>, SimError> {
        let outcome = apply_action(&self.world, step, &self.scenario.kb, &self.scenario.objects)?;
        self.world = outcome.world;
        self.ticks += 1;
        self.fire_perturbations()?;
        Ok(outcome.error)
    }

    fn repair_allowed(&mut self) -> bool {
        if self.corrections >= self.config.repair_budget {
            self.abort = Some("repair_budget".to_string());
            return false;
        }
        true
    }

    /// Replaces the remainder of the plan (failed step onward) with a
    /// proposer-regenerated continuation.
    fn do_local(&mut self, failed: &MidLevelAction) -> Result<(), ExecutorError> {
        let segment = self.sanitize(proposer::local_replan(
            self.proposer,
            failed,
            &self.scenario.instruction,
            &self.scenario.objects,
        )?);
        if segment.is_empty() {
            return Err(ExecutorError::EmptyPlan);
        }
        self.plan.truncate(self.ptr);
        self.plan.extend(segment.iter().map(|s| PlanStep {
            step: s.clone(),
            provenance: Provenance::Repaired,
        }));
        self.history.truncate(self.ptr);
        self.corrections += 1;
        let rendered: Vec<String> = segment.iter().map(|s| s.to_string()).collect();
        self.emit("repair", json!({"kind": "local", "segment": rendered}));
        Ok(())
    }

    /// Resets the simulator to the initial world and regenerates the plan.
    fn do_global(&mut self) -> Result<(), ExecutorError> {
        let segment = self.sanitize(proposer::global_replan(
            self.proposer,
            &self.scenario.instruction,
            &self.scenario.objects,
        )?);
        if segment.is_empty() {
            return Err(ExecutorError::EmptyPlan);
        }
        self.world = self.scenario.initial.clone();
        self.plan = segment
            .iter()
            .map(|s| PlanStep {
                step: s.clone(),
                provenance: Provenance::Repaired,
            })
            .collect();
        self.history.clear();
        self.fake.clear();
        self.ptr = 0;
        self.corrections += 1;
        let rendered: Vec<String> = segment.iter().map(|s| s.to_string()).collect();
        self.emit("repair", json!({"kind": "global", "segment": rendered}));
        Ok(())
    }

    /// Inserts the single preparation step that produces the violated state.
    fn do_insert_prep(&mut self, report: &DiagnosisReport) -> Result<(), ExecutorError> {
        let (ref_key, _) = parse_grounded_variable(&report.s_error);
        let graph = &self.scenario.graph;
        let writer = graph
            .writers_of(ref_key)
            .first()
            .cloned()
            .cloned()
            .ok_or_else(|| ExecutorError::PrepInsertion(format!("no producer for '{ref_key}'")))?;
        let object = if writer.value == SUBJECT {
            report.v_need.clone()
        } else {
            // Literal-valued producer: apply it to the failing step's object.
            self.plan[self.ptr].step.object.clone()
        };
        if !self.scenario.objects.iter().any(|o| o == &object) {
            return Err(ExecutorError::PrepInsertion(format!(
                "target '{object}' is not an object of the scene"
            )));
        }
        let step = MidLevelAction::new(&writer.action, &object);
        self.plan.insert(
            self.ptr,
            PlanStep {
                step: step.clone(),
                provenance: Provenance::InsertedPrep,
            },
        );
        self.corrections += 1;
        self.emit(
            "repair",
            json!({"kind": "insert_prep", "segment": [step.to_string()]}),
        );
        Ok(())
    }

    /// Windowed reconstruction: rollback, candidate search (or a direct
    /// unverified splice for the no-tree variant), and plan surgery.
    fn do_windowed(
        &mut self,
        report: &DiagnosisReport,
        error: &ExecError,
        trace: &StateTrace,
    ) -> Result<(), ExecutorError> {
        let scenario = self.scenario;
        let outcome = rollback(
            &self.world,
            &self.history,
            report.t_start,
            report.t_error,
            &scenario.kb,
            &scenario.objects,
        )?;
        self.world = outcome.world.clone();
        self.ticks += outcome.ticks;
        self.fire_perturbations()?;
        self.fake.extend(outcome.fake.iter().cloned());
        self.emit(
            "rollback",
            json!({
                "reversed": outcome.reversed.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                "reverse_failed": outcome.reverse_failed.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
                "fake": outcome.fake.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            }),
        );

        let actions = self.plan_actions();
        let window: Vec<MidLevelAction> = actions[report.t_start - 1..report.t_end].to_vec();
        let suffix: Vec<MidLevelAction> = actions[report.t_end..].to_vec();
        let root = trace.snapshots[report.t_start - 1].clone();

        let suggestions = proposer::suggest_corrections(
            self.proposer,
            &error.failed,
            &scenario.instruction,
            &report.s_error,
            &report.v_need,
            &window,
            &scenario.kb,
            &scenario.objects,
        )?;

        let segment: Vec<MidLevelAction> = if self.strategy == Strategy::SdaNoTree {
            if suggestions.is_empty() {
                log::warn!("no usable suggestions; falling back to a local replan");
                return self.do_local(&error.failed);
            }
            let rendered: Vec<String> = suggestions.iter().map(|s| s.to_string()).collect();
            self.emit(
                "repair",
                json!({"kind": "windowed_unverified", "segment": rendered,
                       "window": [report.t_start, report.t_end]}),
            );
            suggestions
        } else {
            let error_items: BTreeSet<String> = report.error_items.iter().cloned().collect();
            let candidates = build_candidates(
                &window,
                &suggestions,
                &error_items,
                &root,
                &scenario.kb,
                &scenario.objects,
            );
            let found = extract_subsequences(
                root,
                &candidates,
                &report.s_error,
                &report.v_need,
                &suffix,
                window.len(),
                &self.config.search,
                &scenario.kb,
                &scenario.objects,
            );
            match found {
                Ok(result) => {
                    let chosen = select_plan(self.proposer, &scenario.instruction, &result.paths);
                    let rendered: Vec<String> =
                        result.paths.iter().map(|p| render_path(p)).collect();
                    self.emit(
                        "repair",
                        json!({"kind": "windowed", "options": rendered, "chosen": chosen,
                               "window": [report.t_start, report.t_end],
                               "segment": render_path(&result.paths[chosen])}),
                    );
                    result.paths[chosen].clone()
                }
                Err(SubtreeError::NoValidPath { .. }) => {
                    // The search found nothing executable: fall back to one
                    // local replan, then give up if it happens again.
                    if self.no_valid_path_fallback_used {
                        self.abort = Some("no_valid_path".to_string());
                        return Ok(());
                    }
                    self.no_valid_path_fallback_used = true;
                    log::warn!("no valid repair path; falling back to a local replan");
                    return self.do_local(&error.failed);
                }
                Err(other) => return Err(other.into()),
            }
        };

        let tail: Vec<PlanStep> = self.plan[report.t_end..].to_vec();
        self.plan.truncate(report.t_start - 1);
        self.plan.extend(segment.iter().map(|s| PlanStep {
            step: s.clone(),
            provenance: Provenance::Repaired,
        }));
        self.plan.extend(tail);
        self.history.truncate(report.t_start - 1);
        self.ptr = report.t_start - 1;
        self.corrections += 1;
        Ok(())
    }

    /// Diagnosis-driven recovery for the sda strategies.
    fn do_sda(&mut self, error: &ExecError) -> Result<(), ExecutorError> {
        let scenario = self.scenario;
        let t_error = self.ptr + 1;
        let trace = simulate_trace(
            &scenario.initial,
            &self.history,
            &scenario.kb,
            &scenario.objects,
        )?;
        let actions = self.plan_actions();
        let mut report = diagnose(
            &trace,
            error,
            t_error,
            &actions,
            &scenario.kb,
            &scenario.graph,
            &scenario.objects,
            false,
        )?;

        if report.class == ErrorClass::EnvironmentState {
            let streak = match &self.env_streak {
                Some((step, count)) if *step == error.failed => count + 1,
                _ => 1,
            };
            self.env_streak = Some((error.failed.clone(), streak));
            if streak > self.config.max_local_replans {
                // Persistent mismatch: treat the live violation as the
                // diagnosed state and reconstruct the window.
                report = diagnose(
                    &trace,
                    error,
                    t_error,
                    &actions,
                    &scenario.kb,
                    &scenario.graph,
                    &scenario.objects,
                    true,
                )?;
            }
        } else {
            self.env_streak = None;
        }

        self.emit(
            "diagnosis",
            serde_json::to_value(&report).expect("serializable report"),
        );
        match report.class {
            ErrorClass::EnvironmentState => self.do_local(&error.failed),
            ErrorClass::PreconditionPrepOnly => self.do_insert_prep(&report),
            ErrorClass::PreconditionDeep => self.do_windowed(&report, error, &trace),
        }
    }

    fn run(&mut self) -> Result<EpisodeResult, ExecutorError> {
        // Plan acquisition.
        let (steps, source) = match &self.scenario.fixed_plan {
            Some(fixed) => (fixed.clone(), "fixed"),
            None => (
                proposer::decompose(
                    self.proposer,
                    &self.scenario.instruction,
                    &self.scenario.objects,
                    &self.scenario.kb.skill_names(),
                )?,
                "proposer",
            ),
        };
        let steps = self.sanitize(steps);
        if steps.is_empty() {
            return Err(ExecutorError::EmptyPlan);
        }
        self.plan = steps
            .into_iter()
            .map(|step| PlanStep {
                step,
                provenance: Provenance::Initial,
            })
            .collect();
        let rendered = self.rendered_plan();
        self.emit("decompose", json!({"plan": rendered, "source": source}));
        self.fire_perturbations()?;

        // Step loop.
        while self.ptr < self.plan.len() && self.abort.is_none() {
            if self.ticks >= self.config.step_budget {
                self.abort = Some("step_budget".to_string());
                break;
            }
            let step = self.plan[self.ptr].step.clone();
            if let Some(found) = self.fake.iter().position(|f| *f == step) {
                self.fake.remove(found);
                self.emit(
                    "skip_fake",
                    json!({"t": self.ptr + 1, "step": step.to_string()}),
                );
                self.history.push(ExecutedStep {
                    step,
                    succeeded: true,
                });
                self.ptr += 1;
                continue;
            }
            match self.apply_real(&step)? {
                None => {
                    self.emit(
                        "step_ok",
                        json!({"t": self.ptr + 1, "step": step.to_string()}),
                    );
                    // A success of the very step that kept failing ends its
                    // streak; successes elsewhere leave it untouched.
                    if matches!(&self.env_streak, Some((s, _)) if *s == step) {
                        self.env_streak = None;
                    }
                    self.history.push(ExecutedStep {
                        step,
                        succeeded: true,
                    });
                    self.ptr += 1;
                }
                Some(error) => {
                    let violated: Vec<String> =
                        error.violated.iter().map(|v| v.to_string()).collect();
                    self.emit(
                        "step_fail",
                        json!({"t": self.ptr + 1, "step": step.to_string(), "violated": violated}),
                    );
                    match self.strategy {
                        Strategy::None => {
                            self.history.push(ExecutedStep {
                                step,
                                succeeded: false,
                            });
                            self.ptr += 1;
                        }
                        Strategy::Local => {
                            if self.repair_allowed() {
                                self.do_local(&error.failed)?;
                            }
                        }
                        Strategy::Global => {
                            if self.repair_allowed() {
                                self.do_global()?;
                            }
                        }
                        Strategy::Sda | Strategy::SdaNoTree => {
                            if self.repair_allowed() {
                                self.do_sda(&error)?;
                            }
                        }
                    }
                }
            }
        }

        // Goal evaluation.
        let fraction = goal_fraction(&self.world, &self.scenario.goals)?;
        let success = self.abort.is_none() && fraction == 1.0;
        self.emit(
            "episode_end",
            json!({
                "success": success,
                "goal_fraction": fraction,
                "corrections": self.corrections,
                "ticks": self.ticks,
                "abort": self.abort,
            }),
        );
        let trace = simulate_trace(
            &self.scenario.initial,
            &self.history,
            &self.scenario.kb,
            &self.scenario.objects,
        )?;
        Ok(EpisodeResult {
            scenario_id: self.scenario.id.clone(),
            strategy: self.strategy,
            success,
            goal_fraction: fraction,
            corrections: self.corrections,
            ticks: self.ticks,
            abort: self.abort.clone(),
            plan: self.plan.clone(),
            trace,
            events: std::mem::take(&mut self.events),
        })
    }
}

/// Runs one episode of `scenario` under `strategy`.
pub fn run_episode(
    scenario: &Scenario,
    strategy: Strategy,
    proposer: &dyn Proposer,
    config: &EpisodeConfig,
) -> Result<EpisodeResult, ExecutorError> {
    let mut runner = Runner {
        scenario,
        strategy,
        proposer,
        config,
        world: scenario.initial.clone(),
        plan: Vec::new(),
        history: Vec::new(),
        ptr: 0,
        ticks: 0,
        corrections: 0,
        fake: Vec::new(),
        events: Vec::new(),
        env_streak: None,
        fired: vec![false; scenario.perturbations.len()],
        no_valid_path_fallback_used: false,
        abort: None,
    };
    runner.run()
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Scenario;
    use crate::kb::load_kb;
    use crate::proposer::{ScriptedEntry, ScriptedProposer, ScriptedTable};
    use crate::sdg::{build_graph, GroundedAssignment};
    use crate::sim::Perturbation;
    use std::collections::BTreeMap;

    fn fixture_kb() -> ActionKb {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures/kb/alfred_kb.json");
        load_kb(&path).unwrap()
    }

    fn scenario(
        objects: &[&str],
        initial: &[(&str, &str)],
        plan: &[(&str, &str)],
        goals: &[(&str, &str)],
        perturbations: Vec<Perturbation>,
    ) -> Scenario {
        let kb = fixture_kb();
        let graph = build_graph(&kb);
        let mut assignments = BTreeMap::new();
        for (k, v) in initial {
            assignments.insert(k.to_string(), v.to_string());
        }
        Scenario {
            id: "test".to_string(),
            kb,
            graph,
            objects: objects.iter().map(|s| s.to_string()).collect(),
            instruction: "carry out the kitchen task".to_string(),
            initial: WorldState::new(assignments),
            fixed_plan: Some(
                plan.iter()
                    .map(|(a, o)| MidLevelAction::new(a, o))
                    .collect(),
            ),
            goals: goals
                .iter()
                .map(|(k, v)| GroundedAssignment {
                    variable: k.to_string(),
                    value: v.to_string(),
                })
                .collect(),
            perturbations,
            table: ScriptedTable::default(),
            tags: Vec::new(),
        }
    }

    /// Kitchen plan with a latent flaw: the tomato is grabbed while the pan
    /// is still in hand.
    fn kitchen_scenario() -> Scenario {
        scenario(
            &["stove", "pan", "fridge", "tomato"],
            &[
                ("agent.position", "stove"),
                ("agent.holding", "nothing"),
                ("opened(fridge)", "false"),
                ("powered(stove)", "off"),
                ("sliced(tomato)", "false"),
            ],
            &[
                ("turn on", "stove"),
                ("find", "pan"),
                ("pick up", "pan"),
                ("find", "fridge"),
                ("open", "fridge"),
                ("find", "tomato"),
                ("pick up", "tomato"),
                ("put down", "tomato"),
                ("close", "fridge"),
            ],
            &[
                ("powered(stove)", "on"),
                ("opened(fridge)", "false"),
                ("agent.holding", "nothing"),
            ],
            vec![],
        )
    }

    fn scripted(entries: Vec<(&str, Value, &str)>) -> ScriptedProposer {
        ScriptedProposer::new(ScriptedTable::from_entries(
            entries
                .into_iter()
                .map(|(kind, payload, response)| ScriptedEntry {
                    kind: kind.to_string(),
                    payload,
                    response: response.to_string(),
                })
                .collect(),
        ))
    }

    fn event_names(result: &EpisodeResult) -> Vec<&str> {
        result.events.iter().map(|e| e.event.as_str()).collect()
    }

    #[test]
    fn clean_plan_runs_to_success_without_proposer() {
        let mut s = kitchen_scenario();
        s.fixed_plan = Some(
            [
                ("turn on", "stove"),
                ("find", "pan"),
                ("pick up", "pan"),
                ("find", "fridge"),
                ("open", "fridge"),
                ("put down", "pan"),
                ("close", "fridge"),
                ("find", "tomato"),
                ("pick up", "tomato"),
            ]
            .iter()
            .map(|(a, o)| MidLevelAction::new(a, o))
            .collect(),
        );
        s.goals = vec![
            GroundedAssignment {
                variable: "powered(stove)".into(),
                value: "on".into(),
            },
            GroundedAssignment {
                variable: "opened(fridge)".into(),
                value: "false".into(),
            },
            GroundedAssignment {
                variable: "agent.holding".into(),
                value: "tomato".into(),
            },
        ];
        let proposer = ScriptedProposer::default();
        let result = run_episode(&s, Strategy::Sda, &proposer, &EpisodeConfig::default()).unwrap();
        assert!(result.success);
        assert_eq!(result.goal_fraction, 1.0);
        assert_eq!(result.corrections, 0);
        assert_eq!(result.ticks, 9);
        assert!(result.abort.is_none());
        assert_eq!(event_names(&result).first(), Some(&"decompose"));
        assert_eq!(event_names(&result).last(), Some(&"episode_end"));
    }

    #[test]
    fn none_skips_failures_and_continues() {
        let s = kitchen_scenario();
        let proposer = ScriptedProposer::default();
        let result = run_episode(&s, Strategy::None, &proposer, &EpisodeConfig::default()).unwrap();
        assert!(!result.success);
        // Both tomato steps fail and are skipped; stove and fridge goals hold.
        assert_eq!(result.goal_fraction, 2.0 / 3.0);
        assert_eq!(result.corrections, 0);
        assert_eq!(result.ticks, 9);
        let fails = result
            .events
            .iter()
            .filter(|e| e.event == "step_fail")
            .count();
        assert_eq!(fails, 2);
        // No repair events, and the episode was not aborted.
        assert!(result.events.iter().all(|e| e.event != "repair"));
        assert!(result.abort.is_none());
    }

    #[test]
    fn windowed_repair_recovers_the_kitchen_scenario() {
        let s = kitchen_scenario();
        let proposer = scripted(vec![
            (
                "suggest",
                json!({
                    "failed": "(pick up, tomato)",
                    "instruction": "carry out the kitchen task",
                    "s_error": "agent.holding",
                    "v_need": "nothing",
                    "window": [
                        "(find, pan)", "(pick up, pan)", "(find, fridge)",
                        "(open, fridge)", "(find, tomato)", "(pick up, tomato)",
                        "(put down, tomato)"
                    ],
                }),
                "0. (put down, pan)",
            ),
            (
                "choose",
                json!({
                    "instruction": "carry out the kitchen task",
                    "options": [
                        "(find, fridge); (open, fridge)",
                        "(find, fridge); (open, fridge); (find, pan)",
                        "(find, fridge); (open, fridge); (find, tomato)",
                        "(find, pan); (pick up, pan); (find, fridge); (open, fridge); (put down, pan)",
                        "(find, tomato); (pick up, tomato); (find, fridge); (open, fridge); (put down, tomato)"
                    ],
                }),
                "0",
            ),
        ]);
        let result = run_episode(&s, Strategy::Sda, &proposer, &EpisodeConfig::default()).unwrap();
        assert!(result.success, "events: {:#?}", result.events);
        assert_eq!(result.corrections, 1);

        let diagnosis = result
            .events
            .iter()
            .find(|e| e.event == "diagnosis")
            .expect("diagnosis event");
        assert_eq!(diagnosis.payload["class"], json!("PreconditionDeep"));
        assert_eq!(diagnosis.payload["t_error"], json!(7));
        assert_eq!(diagnosis.payload["t_source"], json!(3));
        assert_eq!(diagnosis.payload["t_start"], json!(2));
        assert_eq!(diagnosis.payload["t_end"], json!(8));
        assert_eq!(diagnosis.payload["error_items"], json!(["pan", "tomato"]));

        let rollback_event = result
            .events
            .iter()
            .find(|e| e.event == "rollback")
            .expect("rollback event");
        assert_eq!(
            rollback_event.payload["reversed"],
            json!(["(close, fridge)", "(put down, pan)"])
        );
        assert_eq!(rollback_event.payload["reverse_failed"], json!([]));

        // Final plan: original head, repaired middle, original tail.
        let provenances: Vec<Provenance> = result.plan.iter().map(|p| p.provenance).collect();
        assert_eq!(
            provenances,
            vec![
                Provenance::Initial,
                Provenance::Repaired,
                Provenance::Repaired,
                Provenance::Initial
            ]
        );
        // Corrections equal the repair events logged.
        let repairs = result.events.iter().filter(|e| e.event == "repair").count();
        assert_eq!(repairs as u32, result.corrections);
    }

    #[test]
    fn position_failure_inserts_a_single_find() {
        let s = scenario(
            &["tomato", "plate"],
            &[
                ("agent.position", "plate"),
                ("agent.holding", "nothing"),
                ("sliced(tomato)", "false"),
            ],
            &[
                ("pick up", "tomato"),
                ("slice", "tomato"),
                ("put down", "tomato"),
            ],
            &[("sliced(tomato)", "true"), ("agent.holding", "nothing")],
            vec![],
        );
        let proposer = ScriptedProposer::default();
        let result = run_episode(&s, Strategy::Sda, &proposer, &EpisodeConfig::default()).unwrap();
        assert!(result.success);
        assert_eq!(result.corrections, 1);
        assert_eq!(result.plan.len(), 4);
        assert_eq!(result.plan[0].step, MidLevelAction::new("find", "tomato"));
        assert_eq!(result.plan[0].provenance, Provenance::InsertedPrep);
        let diagnosis = result
            .events
            .iter()
            .find(|e| e.event == "diagnosis")
            .unwrap();
        assert_eq!(diagnosis.payload["class"], json!("PreconditionPrepOnly"));
        assert_eq!(diagnosis.payload["t_start"], json!(1));
        assert_eq!(diagnosis.payload["t_end"], json!(1));
    }

    #[test]
    fn irreversible_steps_are_faked_not_repeated() {
        let s = scenario(
            &["tomato", "bowl"],
            &[
                ("agent.position", "counter"),
                ("agent.holding", "nothing"),
                ("sliced(tomato)", "false"),
            ],
            &[
                ("find", "tomato"),
                ("pick up", "tomato"),
                ("slice", "tomato"),
                ("find", "bowl"),
                ("pick up", "bowl"),
                ("put down", "tomato"),
            ],
            &[("sliced(tomato)", "true"), ("agent.holding", "nothing")],
            vec![],
        );
        let proposer = scripted(vec![
            (
                "suggest",
                json!({
                    "failed": "(pick up, bowl)",
                    "instruction": "carry out the kitchen task",
                    "s_error": "agent.holding",
                    "v_need": "nothing",
                    "window": [
                        "(find, tomato)", "(pick up, tomato)", "(slice, tomato)",
                        "(find, bowl)", "(pick up, bowl)", "(put down, tomato)"
                    ],
                }),
                "0. (put down, tomato)",
            ),
            (
                "choose",
                json!({
                    "instruction": "carry out the kitchen task",
                    "options": [
                        "(empty)",
                        "(find, tomato)",
                        "(find, bowl)",
                        "(find, tomato); (pick up, tomato); (slice, tomato); (put down, tomato)",
                        "(find, tomato); (pick up, tomato); (find, bowl); (put down, tomato)"
                    ],
                }),
                "3",
            ),
        ]);
        let result = run_episode(&s, Strategy::Sda, &proposer, &EpisodeConfig::default()).unwrap();
        assert!(result.success, "events: {:#?}", result.events);
        let rollback_event = result
            .events
            .iter()
            .find(|e| e.event == "rollback")
            .unwrap();
        assert_eq!(rollback_event.payload["fake"], json!(["(slice, tomato)"]));
        assert_eq!(
            rollback_event.payload["reversed"],
            json!(["(put down, tomato)"])
        );
        let skip = result
            .events
            .iter()
            .find(|e| e.event == "skip_fake")
            .expect("skip_fake event");
        assert_eq!(skip.payload["step"], json!("(slice, tomato)"));
        // The slice step was executed exactly once for real.
        let slice_runs = result
            .events
            .iter()
            .filter(|e| e.event == "step_ok" && e.payload["step"] == json!("(slice, tomato)"))
            .count();
        assert_eq!(slice_runs, 1);
    }

    #[test]
    fn persistent_perturbation_escalates_to_windowed_repair() {
        // A disturbance keeps dropping the agent back onto the floor right
        // after every move toward the soap.
        let mut s = scenario(
            &["soap", "rack", "floor"],
            &[("agent.position", "floor"), ("agent.holding", "nothing")],
            &[
                ("find", "soap"),
                ("pick up", "soap"),
                ("find", "rack"),
                ("put down", "soap"),
            ],
            &[("agent.position", "rack"), ("agent.holding", "nothing")],
            vec![
                Perturbation {
                    at_tick: 1,
                    set: [("agent.position".to_string(), "floor".to_string())]
                        .into_iter()
                        .collect(),
                },
                Perturbation {
                    at_tick: 3,
                    set: [("agent.position".to_string(), "floor".to_string())]
                        .into_iter()
                        .collect(),
                },
                Perturbation {
                    at_tick: 5,
                    set: [("agent.position".to_string(), "floor".to_string())]
                        .into_iter()
                        .collect(),
                },
            ],
        );
        s.instruction = "put the soap on the rack".to_string();
        let proposer = scripted(vec![
            (
                "local_replan",
                json!({
                    "failed": "(pick up, soap)",
                    "instruction": "put the soap on the rack",
                    "objects": ["soap", "rack", "floor"],
                }),
                "0. (find, soap)\n1. (pick up, soap)\n2. (find, rack)\n3. (put down, soap)",
            ),
            (
                "suggest",
                json!({
                    "failed": "(pick up, soap)",
                    "instruction": "put the soap on the rack",
                    "s_error": "agent.position",
                    "v_need": "soap",
                    "window": [
                        "(find, soap)", "(find, soap)", "(find, soap)", "(pick up, soap)"
                    ],
                }),
                "none",
            ),
        ]);
        let result = run_episode(&s, Strategy::Sda, &proposer, &EpisodeConfig::default()).unwrap();
        assert!(result.success, "events: {:#?}", result.events);
        // Two tolerated local replans, then the windowed escalation.
        assert_eq!(result.corrections, 3);
        let classes: Vec<&Value> = result
            .events
            .iter()
            .filter(|e| e.event == "diagnosis")
            .map(|e| &e.payload["class"])
            .collect();
        assert_eq!(
            classes,
            vec![
                &json!("EnvironmentState"),
                &json!("EnvironmentState"),
                &json!("PreconditionDeep")
            ]
        );
    }

    #[test]
    fn local_strategy_replaces_the_remainder() {
        let s = scenario(
            &["tomato"],
            &[
                ("agent.position", "counter"),
                ("agent.holding", "nothing"),
                ("sliced(tomato)", "false"),
            ],
            &[
                ("pick up", "tomato"),
                ("slice", "tomato"),
                ("put down", "tomato"),
            ],
            &[("sliced(tomato)", "true"), ("agent.holding", "nothing")],
            vec![],
        );
        let proposer = scripted(vec![(
            "local_replan",
            json!({
                "failed": "(pick up, tomato)",
                "instruction": "carry out the kitchen task",
                "objects": ["tomato"],
            }),
            "0. (find, tomato)\n1. (pick up, tomato)\n2. (slice, tomato)\n3. (put down, tomato)",
        )]);
        let result =
            run_episode(&s, Strategy::Local, &proposer, &EpisodeConfig::default()).unwrap();
        assert!(result.success);
        assert_eq!(result.corrections, 1);
        assert!(result
            .plan
            .iter()
            .all(|p| p.provenance == Provenance::Repaired));
    }

    #[test]
    fn repeated_local_failures_exhaust_the_repair_budget() {
        let s = scenario(
            &["tomato", "pan"],
            &[
                ("agent.position", "counter"),
                ("agent.holding", "pan"),
                ("sliced(tomato)", "false"),
            ],
            &[("find", "tomato"), ("pick up", "tomato")],
            &[("agent.holding", "tomato")],
            vec![],
        );
        // The canned continuation never unloads the pan, so it can never work.
        let proposer = scripted(vec![(
            "local_replan",
            json!({
                "failed": "(pick up, tomato)",
                "instruction": "carry out the kitchen task",
                "objects": ["tomato", "pan"],
            }),
            "0. (find, tomato)\n1. (pick up, tomato)",
        )]);
        let result =
            run_episode(&s, Strategy::Local, &proposer, &EpisodeConfig::default()).unwrap();
        assert!(!result.success);
        assert_eq!(result.corrections, 5);
        assert_eq!(result.abort.as_deref(), Some("repair_budget"));
    }

    #[test]
    fn global_strategy_resets_the_world() {
        // The flawed first attempt turns the stove on; after a global reset
        // the stove must be off again or the fresh plan's first step fails.
        let s = {
            let mut s = kitchen_scenario();
            s.fixed_plan = Some(
                [
                    ("turn on", "stove"),
                    ("find", "tomato"),
                    ("pick up", "tomato"),
                    ("slice", "tomato"),
                ]
                .iter()
                .map(|(a, o)| MidLevelAction::new(a, o))
                .collect(),
            );
            s.goals = vec![
                GroundedAssignment {
                    variable: "powered(stove)".into(),
                    value: "on".into(),
                },
                GroundedAssignment {
                    variable: "sliced(tomato)".into(),
                    value: "true".into(),
                },
            ];
            s.initial
                .assignments
                .insert("agent.holding".into(), "pan".into());
            s
        };
        let proposer = scripted(vec![(
            "global_replan",
            json!({
                "instruction": "carry out the kitchen task",
                "objects": ["stove", "pan", "fridge", "tomato"],
            }),
            "0. (put down, pan)\n1. (turn on, stove)\n2. (find, tomato)\n3. (pick up, tomato)\n4. (slice, tomato)",
        )]);
        let result =
            run_episode(&s, Strategy::Global, &proposer, &EpisodeConfig::default()).unwrap();
        assert!(result.success, "events: {:#?}", result.events);
        assert_eq!(result.corrections, 1);
    }

    #[test]
    fn unverified_splice_uses_suggestions_directly() {
        // The agent starts with a pan already in hand, so grabbing the
        // tomato needs an unplanned put-down first.
        let s = scenario(
            &["tomato", "pan"],
            &[
                ("agent.position", "pan"),
                ("agent.holding", "pan"),
                ("sliced(tomato)", "false"),
            ],
            &[("find", "pan"), ("find", "tomato"), ("pick up", "tomato")],
            &[("agent.holding", "tomato")],
            vec![],
        );
        let proposer = scripted(vec![(
            "suggest",
            json!({
                "failed": "(pick up, tomato)",
                "instruction": "carry out the kitchen task",
                "s_error": "agent.holding",
                "v_need": "nothing",
                "window": ["(find, pan)", "(find, tomato)", "(pick up, tomato)"],
            }),
            "0. (put down, pan)\n1. (find, tomato)\n2. (pick up, tomato)",
        )]);
        let result = run_episode(
            &s,
            Strategy::SdaNoTree,
            &proposer,
            &EpisodeConfig::default(),
        )
        .unwrap();
        assert!(result.success, "events: {:#?}", result.events);
        let repair = result.events.iter().find(|e| e.event == "repair").unwrap();
        assert_eq!(repair.payload["kind"], json!("windowed_unverified"));
    }

    #[test]
    fn event_log_lines_are_json() {
        let s = kitchen_scenario();
        let proposer = ScriptedProposer::default();
        let result = run_episode(&s, Strategy::None, &proposer, &EpisodeConfig::default()).unwrap();
        for event in &result.events {
            let line = event.to_line();
            let parsed: Value = serde_json::from_str(&line).unwrap();
            assert_eq!(parsed["event"], json!(event.event));
        }
    }

    #[test]
    fn rollback_restores_reversible_window() {
        let kb = fixture_kb();
        let universe: Vec<String> = ["tomato", "fridge"].iter().map(|s| s.to_string()).collect();
        let mut assignments = BTreeMap::new();
        assignments.insert("agent.position".into(), "tomato".into());
        assignments.insert("agent.holding".into(), "nothing".into());
        assignments.insert("opened(fridge)".into(), "false".into());
        let start = WorldState::new(assignments);

        // Execute two reversible steps, then roll both back.
        let steps = vec![
            MidLevelAction::new("pick up", "tomato"),
            MidLevelAction::new("open", "fridge"),
        ];
        let mut world = start.clone();
        let mut executed = Vec::new();
        for step in &steps {
            let out = apply_action(&world, step, &kb, &universe).unwrap();
            world = out.world;
            // open requires position=fridge; relocate silently for the test.
            world
                .assignments
                .insert("agent.position".into(), "fridge".into());
            executed.push(ExecutedStep {
                step: step.clone(),
                succeeded: true,
            });
        }
        let outcome = rollback(&world, &executed, 1, 3, &kb, &universe).unwrap();
        assert_eq!(
            outcome.reversed,
            vec![
                MidLevelAction::new("close", "fridge"),
                MidLevelAction::new("put down", "tomato"),
            ]
        );
        // Variables touched by the window match the pre-window snapshot.
        assert_eq!(outcome.world.get("agent.holding"), Some("nothing"));
        assert_eq!(outcome.world.get("opened(fridge)"), Some("false"));
        assert!(outcome.fake.is_empty());
        assert!(outcome.reverse_failed.is_empty());
    }

    #[test]
    fn failed_reverse_is_recorded_best_effort() {
        let kb = fixture_kb();
        let universe: Vec<String> = ["card", "drawer"].iter().map(|s| s.to_string()).collect();
        let mut assignments = BTreeMap::new();
        assignments.insert("agent.position".into(), "drawer".into());
        assignments.insert("agent.holding".into(), "nothing".into());
        let world = WorldState::new(assignments);
        // History claims a put down happened; its reverse (pick up) needs
        // position=card, which no longer holds.
        let executed = vec![ExecutedStep {
            step: MidLevelAction::new("put down", "card"),
            succeeded: true,
        }];
        let outcome = rollback(&world, &executed, 1, 2, &kb, &universe).unwrap();
        assert!(outcome.reversed.is_empty());
        assert_eq!(
            outcome.reverse_failed,
            vec![MidLevelAction::new("pick up", "card")]
        );
    }
}
