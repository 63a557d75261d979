//! Scenario ingestion, batch evaluation, metric computation, and report
//! emission. A scenario is one JSON document; a directory of them is a suite.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::executor::{run_episode, EpisodeConfig, Strategy};
use crate::kb::{load_kb, ActionKb, KbError, VariableScope};
use crate::proposer::{ProposerError, ScriptedProposer, ScriptedTable};
use crate::sdg::{build_graph, grounded_variable, GroundedAssignment, StateDependencyGraph};
use crate::sim::{check_domain, MidLevelAction, Perturbation, WorldState};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Proposer(#[from] ProposerError),
    #[error("scenario '{id}' is invalid:\n{}", problems.join("\n"))]
    Invalid { id: String, problems: Vec<String> },
    #[error("no valid scenario file found in {dir}")]
    NoScenarios { dir: String },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

// ---------------------------------------------------------------------------
// Scenario files
// ---------------------------------------------------------------------------

/// On-disk scenario shape. Plans and tables are kept in their text form so
/// fixtures stay diff-friendly; `load_scenario` resolves them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    id: String,
    /// Path to the action model, relative to this scenario file.
    kb: String,
    objects: Vec<String>,
    instruction: String,
    initial: BTreeMap<String, String>,
    #[serde(default)]
    fixed_plan: Option<Vec<String>>,
    goals: BTreeMap<String, String>,
    #[serde(default)]
    perturbations: Vec<Perturbation>,
    /// Either an inline entry array or a path (string) relative to this file.
    #[serde(default)]
    scripted_table: Option<Value>,
    #[serde(default)]
    tags: Vec<String>,
}

/// A fully resolved benchmark task: world, instruction, goals, scheduled
/// disturbances, and the canned proposer replies that drive it offline.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: String,
    pub kb: ActionKb,
    pub graph: StateDependencyGraph,
    pub objects: Vec<String>,
    pub instruction: String,
    pub initial: WorldState,
    pub fixed_plan: Option<Vec<MidLevelAction>>,
    pub goals: Vec<GroundedAssignment>,
    pub perturbations: Vec<Perturbation>,
    pub table: ScriptedTable,
    pub tags: Vec<String>,
}

fn read_to_string(path: &Path) -> Result<String, BenchError> {
    fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads and validates one scenario file. The KB (and a path-valued scripted
/// table) are resolved relative to the scenario's own directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, BenchError> {
    let text = read_to_string(path)?;
    let file: ScenarioFile = serde_json::from_str(&text).map_err(|source| BenchError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    let kb = load_kb(&dir.join(&file.kb))?;
    let graph = build_graph(&kb);

    let mut problems = Vec::new();
    let fixed_plan = match &file.fixed_plan {
        None => None,
        Some(lines) => {
            let mut steps = Vec::new();
            for line in lines {
                match MidLevelAction::parse(line) {
                    Some(step) => steps.push(step),
                    None => problems.push(format!(
                        "fixed_plan entry '{line}' is not '(action, object)'"
                    )),
                }
            }
            Some(steps)
        }
    };

    let table = match &file.scripted_table {
        None => ScriptedTable::default(),
        Some(Value::String(rel)) => ScriptedTable::from_path(&dir.join(rel))?,
        Some(inline) => ScriptedTable::from_value(inline.clone())?,
    };

    let scenario = Scenario {
        id: file.id.clone(),
        kb,
        graph,
        objects: file.objects.clone(),
        instruction: file.instruction.clone(),
        initial: WorldState::new(file.initial.clone()),
        fixed_plan,
        goals: file
            .goals
            .iter()
            .map(|(variable, value)| GroundedAssignment {
                variable: variable.clone(),
                value: value.clone(),
            })
            .collect(),
        perturbations: file.perturbations.clone(),
        table,
        tags: file.tags.clone(),
    };
    problems.extend(validate_scenario(&scenario));
    if problems.is_empty() {
        Ok(scenario)
    } else {
        Err(BenchError::Invalid {
            id: file.id,
            problems,
        })
    }
}

/// Structural checks: non-empty goals, a total and domain-valid initial
/// assignment, and well-formed plans and perturbations.
pub fn validate_scenario(scenario: &Scenario) -> Vec<String> {
    let mut problems = Vec::new();
    let kb = &scenario.kb;
    let universe = &scenario.objects;

    if scenario.id.trim().is_empty() {
        problems.push("id must not be empty".to_string());
    }
    if universe.is_empty() {
        problems.push("objects must not be empty".to_string());
    }
    for (i, object) in universe.iter().enumerate() {
        if universe[..i].contains(object) {
            problems.push(format!("object '{object}' is listed twice"));
        }
    }
    if scenario.instruction.trim().is_empty() {
        problems.push("instruction must not be empty".to_string());
    }
    if scenario.goals.is_empty() {
        problems.push("goals must not be empty".to_string());
    }

    // The initial assignment must cover every grounded variable exactly once.
    let mut expected = Vec::new();
    for template in &kb.base_states {
        match template.scope {
            VariableScope::Agent => expected.push(template.ref_key()),
            VariableScope::Item => {
                for object in universe {
                    expected.push(grounded_variable(&template.ref_key(), object));
                }
            }
        }
    }
    for variable in &expected {
        if scenario.initial.get(variable).is_none() {
            problems.push(format!("initial assignment for '{variable}' is missing"));
        }
    }
    for (variable, value) in &scenario.initial.assignments {
        if !expected.iter().any(|e| e == variable) {
            problems.push(format!(
                "initial variable '{variable}' is not part of this scene"
            ));
        } else if let Err(err) = check_domain(variable, value, kb, universe) {
            problems.push(format!(
                "initial value {variable}={value} is invalid: {err}"
            ));
        }
    }

    for goal in &scenario.goals {
        if !expected.iter().any(|e| e == &goal.variable) {
            problems.push(format!(
                "goal variable '{}' is not part of this scene",
                goal.variable
            ));
        } else if let Err(err) = check_domain(&goal.variable, &goal.value, kb, universe) {
            problems.push(format!("goal {goal} is invalid: {err}"));
        }
    }

    if let Some(plan) = &scenario.fixed_plan {
        for step in plan {
            if kb.action(&step.action).is_none() {
                problems.push(format!("fixed_plan step {step}: unknown action"));
            }
            if !universe.iter().any(|o| o == &step.object) {
                problems.push(format!("fixed_plan step {step}: unknown object"));
            }
        }
    }

    for (i, p) in scenario.perturbations.iter().enumerate() {
        if p.set.is_empty() {
            problems.push(format!("perturbation {i} sets nothing"));
        }
        for (variable, value) in &p.set {
            if let Err(err) = check_domain(variable, value, kb, universe) {
                problems.push(format!(
                    "perturbation {i} write {variable}={value} is invalid: {err}"
                ));
            }
        }
    }

    problems
}

/// Loads every `*.json` scenario in `dir` in path order. Files that fail to
/// load or validate become report entries; the rest of the suite proceeds.
pub fn load_dir(dir: &Path) -> Result<(Vec<Scenario>, Vec<String>), BenchError> {
    let entries = fs::read_dir(dir).map_err(|source| BenchError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
        .collect();
    paths.sort();

    let mut scenarios = Vec::new();
    let mut errors = Vec::new();
    for path in paths {
        match load_scenario(&path) {
            Ok(scenario) => scenarios.push(scenario),
            Err(err) => errors.push(format!("{}: {err}", path.display())),
        }
    }
    Ok((scenarios, errors))
}

// ---------------------------------------------------------------------------
// Batch evaluation
// ---------------------------------------------------------------------------

/// One line of the persisted per-episode record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scenario_id: String,
    pub strategy: Strategy,
    pub success: bool,
    pub goal_fraction: f64,
    pub corrections: u32,
    pub ticks: u64,
    pub abort: Option<String>,
    /// Engine error message, when the episode did not run to completion.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: Strategy,
    /// Fraction of episodes whose every goal condition held at the end.
    pub sr: f64,
    /// Mean fraction of goal conditions satisfied per episode.
    pub gc: f64,
    /// Mean number of plan corrections per episode (failures included).
    pub no_ec: f64,
    pub n: usize,
    /// Wall-clock seconds; omitted from persisted reports so repeated runs
    /// stay byte-identical.
    pub time_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

/// Full benchmark output: per-episode records, the aggregate table, and any
/// scenario-level loading problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub episodes: Vec<EpisodeRecord>,
    pub table: MetricsTable,
    pub errors: Vec<String>,
}

impl BenchReport {
    /// True when some scenario failed to load or some episode hit an engine
    /// error. Task failures are data, not errors.
    pub fn has_errors(&self) -> bool {
        !self.errors.is_empty() || self.episodes.iter().any(|e| e.error.is_some())
    }
}

fn run_one(scenario: &Scenario, strategy: Strategy, config: &EpisodeConfig) -> EpisodeRecord {
    let proposer = ScriptedProposer::new(scenario.table.clone());
    match run_episode(scenario, strategy, &proposer, config) {
        Ok(result) => EpisodeRecord {
            scenario_id: scenario.id.clone(),
            strategy,
            success: result.success,
            goal_fraction: result.goal_fraction,
            corrections: result.corrections,
            ticks: result.ticks,
            abort: result.abort,
            error: None,
        },
        Err(err) => EpisodeRecord {
            scenario_id: scenario.id.clone(),
            strategy,
            success: false,
            goal_fraction: 0.0,
            corrections: 0,
            ticks: 0,
            abort: None,
            error: Some(err.to_string()),
        },
    }
}

/// Aggregates per-episode records into one row per strategy, keeping the
/// requested strategy order.
pub fn compute_metrics(records: &[EpisodeRecord], strategies: &[Strategy]) -> MetricsTable {
    let rows = strategies
        .iter()
        .map(|&strategy| {
            let picked: Vec<&EpisodeRecord> =
                records.iter().filter(|r| r.strategy == strategy).collect();
            let n = picked.len();
            let (sr, gc, no_ec) = if n == 0 {
                (0.0, 0.0, 0.0)
            } else {
                let successes = picked.iter().filter(|r| r.success).count();
                let fraction_sum: f64 = picked.iter().map(|r| r.goal_fraction).sum();
                let correction_sum: f64 = picked.iter().map(|r| f64::from(r.corrections)).sum();
                (
                    successes as f64 / n as f64,
                    fraction_sum / n as f64,
                    correction_sum / n as f64,
                )
            };
            MetricsRow {
                strategy,
                sr,
                gc,
                no_ec,
                n,
                time_secs: None,
            }
        })
        .collect();
    MetricsTable { rows }
}

/// Runs every (scenario, strategy) pair of a suite directory on a worker pool
/// of `jobs` threads (0 = one per core). Records are merged in (scenario id,
/// strategy) order, so the output does not depend on the parallelism degree.
pub fn run_batch(
    scenario_dir: &Path,
    strategies: &[Strategy],
    config: &EpisodeConfig,
    jobs: usize,
) -> Result<BenchReport, BenchError> {
    let (scenarios, errors) = load_dir(scenario_dir)?;
    if scenarios.is_empty() {
        return Err(BenchError::NoScenarios {
            dir: scenario_dir.display().to_string(),
        });
    }

    let pairs: Vec<(&Scenario, Strategy)> = scenarios
        .iter()
        .flat_map(|s| strategies.iter().map(move |&strategy| (s, strategy)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    let mut episodes: Vec<EpisodeRecord> = pool.install(|| {
        pairs
            .par_iter()
            .map(|(scenario, strategy)| run_one(scenario, *strategy, config))
            .collect()
    });
    episodes.sort_by(|a, b| {
        (a.scenario_id.as_str(), a.strategy.name())
            .cmp(&(b.scenario_id.as_str(), b.strategy.name()))
    });

    let table = compute_metrics(&episodes, strategies);
    Ok(BenchReport {
        episodes,
        table,
        errors,
    })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!(
                "unknown format '{other}' (expected table|json|csv)"
            )),
        }
    }
}

fn format_cell(value: f64) -> String {
    format!("{value:.4}")
}

/// Aligned plain-text rendering with the stable column set.
pub fn render_table(table: &MetricsTable) -> String {
    let headers = ["Strategy", "SR", "GC", "No.EC", "N", "Time"];
    let mut rows: Vec<[String; 6]> = Vec::new();
    for row in &table.rows {
        rows.push([
            row.strategy.name().to_string(),
            format_cell(row.sr),
            format_cell(row.gc),
            format_cell(row.no_ec),
            row.n.to_string(),
            row.time_secs
                .map(|t| format!("{t:.2}s"))
                .unwrap_or_else(|| "-".to_string()),
        ]);
    }
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let render_line = |cells: &[String]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:<width$}", c, width = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    out.push_str(&render_line(
        &headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
    ));
    out.push('\n');
    for row in &rows {
        out.push_str(&render_line(row));
        out.push('\n');
    }
    out
}

/// Stable-order JSON of the full report; reparsing yields an equal value.
pub fn render_json(report: &BenchReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("serializable report");
    text.push('\n');
    text
}

/// CSV of the aggregate table. A batch with zero episodes yields only the
/// header row (plus a warning in the log).
pub fn render_csv(table: &MetricsTable) -> String {
    let mut out = String::from("strategy,sr,gc,no_ec,n,time_secs\n");
    let total: usize = table.rows.iter().map(|r| r.n).sum();
    if total == 0 {
        log::warn!("benchmark report contains no episodes; emitting a header-only csv");
        return out;
    }
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.strategy.name(),
            row.sr,
            row.gc,
            row.no_ec,
            row.n,
            row.time_secs.map(|t| t.to_string()).unwrap_or_default(),
        ));
    }
    out
}

/// Writes the report to `path` in the chosen format.
pub fn emit_report(
    report: &BenchReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), BenchError> {
    let text = match format {
        ReportFormat::Table => render_table(&report.table),
        ReportFormat::Json => render_json(report),
        ReportFormat::Csv => render_csv(&report.table),
    };
    fs::write(path, text).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
