//! Command-line front end for the plan-repair engine.
//!
//! Subcommands cover the whole workflow: run one scenario episode (`run`),
//! benchmark a directory of scenarios across recovery strategies (`bench`),
//! check scenario files for structural problems (`validate`), export the
//! state-dependency graph of a knowledge base (`graph export`), and replay a
//! recorded failure offline (`diagnose`, `repair`, `sim step`).
//!
//! The process exits non-zero only on internal errors (unreadable files,
//! malformed input, engine faults). An episode that fails its task is a
//! result, not an error, and exits zero.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sda_core::bench::{
    emit_report, load_dir, load_scenario, render_table, run_batch, ReportFormat,
};
use sda_core::diagnosis::{diagnose, simulate_trace, DiagnosisReport, ErrorClass, ExecutedStep};
use sda_core::executor::{run_episode, EpisodeConfig, Strategy};
use sda_core::kb::{load_kb, ActionKb};
use sda_core::proposer::{HttpProposer, HttpProposerConfig, Proposer, ScriptedProposer};
use sda_core::sdg::{build_graph, GroundedAssignment};
use sda_core::sim::{apply_action, ExecError, MidLevelAction, WorldState};
use sda_core::subtree::{build_candidates, extract_subsequences, SearchConfig};
use serde::Deserialize;
use serde_json::json;

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "sda",
    version,
    about = "Plan repair with dependency-guided diagnosis and windowed reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario episode and print the result as JSON.
    Run(RunArgs),
    /// Run every scenario in a directory across strategies and print metrics.
    Bench(BenchArgs),
    /// Check every scenario file in a directory for structural problems.
    Validate(ValidateArgs),
    /// Inspect a knowledge base's state-dependency graph.
    Graph(GraphArgs),
    /// Classify a recorded execution failure.
    Diagnose(DiagnoseArgs),
    /// Search for repair segments for a recorded execution failure.
    Repair(RepairArgs),
    /// Poke the symbolic simulator directly.
    Sim(SimArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file.
    scenario: PathBuf,
    /// Recovery strategy: none, local, global, sda, or sda_no_tree.
    #[arg(long, default_value = "sda")]
    strategy: String,
    /// Proposer backend: scripted (scenario's table) or http.
    #[arg(long, default_value = "scripted")]
    proposer: String,
    /// Sampling seed forwarded to the http proposer.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Print a one-line summary instead of the full result document.
    #[arg(long)]
    summary: bool,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory of scenario files.
    dir: PathBuf,
    /// Comma-separated strategies to compare.
    #[arg(long, default_value = "none,local,sda")]
    strategies: String,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Report file to write.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Report file format: json, csv, or table.
    #[arg(long, default_value = "json")]
    format: String,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Args)]
struct BudgetArgs {
    /// Maximum simulator applications per episode.
    #[arg(long, default_value_t = EpisodeConfig::default().step_budget)]
    step_budget: u64,
    /// Maximum recovery invocations per episode.
    #[arg(long, default_value_t = EpisodeConfig::default().repair_budget)]
    repair_budget: u32,
    /// Environment-side failures of one step tolerated before escalation.
    #[arg(long, default_value_t = EpisodeConfig::default().max_local_replans)]
    max_local_replans: u32,
    /// Maximum accepted repair segments per search.
    #[arg(long, default_value_t = SearchConfig::default().max_paths)]
    max_paths: usize,
    /// Search depth allowed beyond the replaced segment's length.
    #[arg(long, default_value_t = SearchConfig::default().extra_depth)]
    extra_depth: usize,
}

impl BudgetArgs {
    fn to_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            step_budget: self.step_budget,
            repair_budget: self.repair_budget,
            max_local_replans: self.max_local_replans,
            search: SearchConfig {
                max_paths: self.max_paths,
                extra_depth: self.extra_depth,
            },
        }
    }
}

#[derive(Args)]
struct ValidateArgs {
    /// Directory of scenario files.
    dir: PathBuf,
}

#[derive(Args)]
struct GraphArgs {
    #[command(subcommand)]
    command: GraphCommand,
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Print the graph in Graphviz dot or JSON form.
    Export(GraphExportArgs),
}

#[derive(Args)]
struct GraphExportArgs {
    /// Knowledge base file.
    #[arg(long, default_value = "fixtures/kb/alfred_kb.json")]
    kb: PathBuf,
    /// Output format: dot or json.
    #[arg(long, default_value = "dot")]
    format: String,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Recorded failure document (see `FailureDoc` in the README).
    input: PathBuf,
    /// Force the deep reconstruction path for environment-side failures.
    #[arg(long)]
    escalate: bool,
}

#[derive(Args)]
struct RepairArgs {
    /// Recorded failure document (see `FailureDoc` in the README).
    input: PathBuf,
    /// Maximum accepted repair segments.
    #[arg(long, default_value_t = SearchConfig::default().max_paths)]
    max_paths: usize,
    /// Search depth allowed beyond the replaced segment's length.
    #[arg(long, default_value_t = SearchConfig::default().extra_depth)]
    extra_depth: usize,
}

#[derive(Args)]
struct SimArgs {
    #[command(subcommand)]
    command: SimCommand,
}

#[derive(Subcommand)]
enum SimCommand {
    /// Apply one action to a world state and print the outcome.
    Step(SimStepArgs),
}

#[derive(Args)]
struct SimStepArgs {
    /// Knowledge base file.
    #[arg(long)]
    kb: PathBuf,
    /// Comma-separated scene objects.
    #[arg(long)]
    objects: String,
    /// JSON file holding the current grounded assignment map.
    #[arg(long)]
    state: PathBuf,
    /// Step to apply, written as "(action, object)".
    #[arg(long)]
    action: String,
}

// ---------------------------------------------------------------------------
// Offline failure documents
// ---------------------------------------------------------------------------

/// Self-contained record of an execution failure, used by `diagnose` and
/// `repair`. Paths are resolved relative to the document's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FailureDoc {
    /// Knowledge base path.
    kb: String,
    /// Scene objects.
    objects: Vec<String>,
    /// Initial grounded assignments.
    initial: BTreeMap<String, String>,
    /// Full plan, as "(action, object)" strings.
    plan: Vec<String>,
    /// Outcomes of the steps attempted before the failure.
    executed: Vec<ExecutedStepDoc>,
    /// The step that failed.
    failed: String,
    /// Violated grounded assignments: variable -> required value.
    violated: BTreeMap<String, String>,
    /// Optional extra repair candidates, as "(action, object)" strings.
    #[serde(default)]
    suggestions: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ExecutedStepDoc {
    step: String,
    succeeded: bool,
}

struct LoadedFailure {
    kb: ActionKb,
    objects: Vec<String>,
    initial: WorldState,
    plan: Vec<MidLevelAction>,
    executed: Vec<ExecutedStep>,
    error: ExecError,
    t_error: usize,
    suggestions: Vec<MidLevelAction>,
}

fn parse_step(text: &str) -> Result<MidLevelAction> {
    MidLevelAction::parse(text)
        .with_context(|| format!("'{text}' is not of the form \"(action, object)\""))
}

fn load_failure(path: &Path) -> Result<LoadedFailure> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: FailureDoc =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    let kb = load_kb(&dir.join(&doc.kb))?;
    let plan = doc
        .plan
        .iter()
        .map(|s| parse_step(s))
        .collect::<Result<Vec<_>>>()?;
    let executed = doc
        .executed
        .iter()
        .map(|e| {
            Ok(ExecutedStep {
                step: parse_step(&e.step)?,
                succeeded: e.succeeded,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let t_error = executed.len() + 1;
    if t_error > plan.len() {
        bail!(
            "{} executed steps leave no plan step to fail (plan has {})",
            executed.len(),
            plan.len()
        );
    }
    if doc.violated.is_empty() {
        bail!("'violated' must name at least one grounded assignment");
    }
    let error = ExecError {
        failed: parse_step(&doc.failed)?,
        violated: doc
            .violated
            .iter()
            .map(|(variable, value)| GroundedAssignment {
                variable: variable.clone(),
                value: value.clone(),
            })
            .collect(),
        tick: t_error as u64,
    };
    let suggestions = doc
        .suggestions
        .iter()
        .map(|s| parse_step(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedFailure {
        kb,
        objects: doc.objects,
        initial: WorldState::new(doc.initial),
        plan,
        executed,
        error,
        t_error,
        suggestions,
    })
}

fn diagnose_failure(failure: &LoadedFailure, escalate: bool) -> Result<DiagnosisReport> {
    let graph = build_graph(&failure.kb);
    let trace = simulate_trace(
        &failure.initial,
        &failure.executed,
        &failure.kb,
        &failure.objects,
    )?;
    Ok(diagnose(
        &trace,
        &failure.error,
        failure.t_error,
        &failure.plan,
        &failure.kb,
        &graph,
        &failure.objects,
        escalate,
    )?)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn parse_strategy(name: &str) -> Result<Strategy> {
    name.parse::<Strategy>().map_err(anyhow::Error::msg)
}

fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    let strategies = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_strategy)
        .collect::<Result<Vec<_>>>()?;
    if strategies.is_empty() {
        bail!("no strategies requested");
    }
    Ok(strategies)
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let strategy = parse_strategy(&args.strategy)?;
    let scenario = load_scenario(&args.scenario)?;
    let config = args.budget.to_config();
    let proposer: Box<dyn Proposer> = match args.proposer.as_str() {
        "scripted" => Box::new(ScriptedProposer::new(scenario.table.clone())),
        "http" => Box::new(http_proposer(args.seed)?),
        other => bail!("unknown proposer '{other}' (expected scripted or http)"),
    };
    let result = run_episode(&scenario, strategy, proposer.as_ref(), &config)?;
    if args.summary {
        println!(
            "{} strategy={} success={} goal_fraction={:.3} corrections={} ticks={}{}",
            result.scenario_id,
            result.strategy.name(),
            result.success,
            result.goal_fraction,
            result.corrections,
            result.ticks,
            result
                .abort
                .as_deref()
                .map(|a| format!(" abort={a}"))
                .unwrap_or_default(),
        );
    } else {
        println!("{}", serde_json::to_string_pretty(&result)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn http_proposer(seed: u64) -> Result<HttpProposer> {
    let endpoint = std::env::var("SDA_PROPOSER_ENDPOINT").unwrap_or_default();
    let model = std::env::var("SDA_PROPOSER_MODEL").unwrap_or_else(|_| "default".to_string());
    let mut config = HttpProposerConfig::new(endpoint, model);
    config.seed = seed;
    Ok(HttpProposer::new(config)?)
}

fn cmd_bench(args: &BenchArgs) -> Result<ExitCode> {
    let strategies = parse_strategies(&args.strategies)?;
    let format = args
        .format
        .parse::<ReportFormat>()
        .map_err(anyhow::Error::msg)?;
    let config = args.budget.to_config();
    let report = run_batch(&args.dir, &strategies, &config, args.jobs)?;
    print!("{}", render_table(&report.table));
    emit_report(&report, format, &args.out)?;
    println!("report written to {}", args.out.display());
    for problem in &report.errors {
        eprintln!("scenario error: {problem}");
    }
    for episode in &report.episodes {
        if let Some(error) = &episode.error {
            eprintln!(
                "episode error: {} under {}: {error}",
                episode.scenario_id,
                episode.strategy.name()
            );
        }
    }
    if report.has_errors() {
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(args: &ValidateArgs) -> Result<ExitCode> {
    let (scenarios, errors) = load_dir(&args.dir)?;
    for scenario in &scenarios {
        println!("ok: {}", scenario.id);
    }
    for problem in &errors {
        eprintln!("problem: {problem}");
    }
    println!(
        "{} scenario(s) valid, {} problem(s)",
        scenarios.len(),
        errors.len()
    );
    if errors.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_graph_export(args: &GraphExportArgs) -> Result<ExitCode> {
    let kb = load_kb(&args.kb)?;
    let graph = build_graph(&kb);
    let text = match args.format.as_str() {
        "dot" => graph.to_dot(),
        "json" => serde_json::to_string_pretty(&graph)? + "\n",
        other => bail!("unknown graph format '{other}' (expected dot or json)"),
    };
    match &args.out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<ExitCode> {
    let failure = load_failure(&args.input)?;
    let report = diagnose_failure(&failure, args.escalate)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_repair(args: &RepairArgs) -> Result<ExitCode> {
    let failure = load_failure(&args.input)?;
    let report = diagnose_failure(&failure, false)?;
    if report.class != ErrorClass::PreconditionDeep {
        let document = json!({
            "report": report,
            "paths": [],
            "note": "failure class does not call for a windowed reconstruction",
        });
        println!("{}", serde_json::to_string_pretty(&document)?);
        return Ok(ExitCode::SUCCESS);
    }

    let trace = simulate_trace(
        &failure.initial,
        &failure.executed,
        &failure.kb,
        &failure.objects,
    )?;
    let root = trace.snapshots[report.t_start - 1].clone();
    let window = &failure.plan[report.t_start - 1..report.t_end];
    let suffix = &failure.plan[report.t_end..];
    let items: BTreeSet<String> = report.error_items.iter().cloned().collect();
    let candidates = build_candidates(
        window,
        &failure.suggestions,
        &items,
        &root,
        &failure.kb,
        &failure.objects,
    );
    let search = SearchConfig {
        max_paths: args.max_paths,
        extra_depth: args.extra_depth,
    };
    let found = extract_subsequences(
        root,
        &candidates,
        &report.s_error,
        &report.v_need,
        suffix,
        window.len(),
        &search,
        &failure.kb,
        &failure.objects,
    )?;
    let rendered: Vec<Vec<String>> = found
        .paths
        .iter()
        .map(|p| p.iter().map(|s| s.to_string()).collect())
        .collect();
    let document = json!({
        "report": report,
        "paths": rendered,
        "expanded": found.expanded,
    });
    println!("{}", serde_json::to_string_pretty(&document)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_sim_step(args: &SimStepArgs) -> Result<ExitCode> {
    let kb = load_kb(&args.kb)?;
    let objects: Vec<String> = args
        .objects
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let text = std::fs::read_to_string(&args.state)
        .with_context(|| format!("reading {}", args.state.display()))?;
    let assignments: BTreeMap<String, String> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.state.display()))?;
    let step = parse_step(&args.action)?;
    let outcome = apply_action(&WorldState::new(assignments), &step, &kb, &objects)?;
    let document = json!({
        "succeeded": outcome.succeeded(),
        "violated": outcome.error.as_ref().map(|e| &e.violated),
        "world": outcome.world,
    });
    println!("{}", serde_json::to_string_pretty(&document)?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Graph(args) => match &args.command {
            GraphCommand::Export(export) => cmd_graph_export(export),
        },
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Repair(args) => cmd_repair(args),
        Command::Sim(args) => match &args.command {
            SimCommand::Step(step) => cmd_sim_step(step),
        },
    };
    match outcome {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}
