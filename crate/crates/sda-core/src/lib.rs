//! Plan-repair engine for mid-level action plans: an explicit action model
//! (effects and dependencies per skill), a bipartite state-dependency graph,
//! a deterministic symbolic simulator, execution-failure diagnosis with
//! source backtracking, windowed plan reconstruction under a candidate
//! search tree, and a benchmark harness that evaluates recovery strategies
//! over scenario suites.
//!
//! Module map:
//! - [`kb`] — state-variable templates and per-skill action schemas.
//! - [`sdg`] — the action/state dependency graph and grounding helpers.
//! - [`sim`] — the symbolic world simulator and perturbation injection.
//! - [`diagnosis`] — failure classification, source step search, and the
//!   reconstruction window.
//! - [`subtree`] — candidate generation and breadth-first extraction of
//!   executable repair segments.
//! - [`executor`] — closed-loop episode runner with recovery strategies.
//! - [`proposer`] — the plan/correction proposer abstraction (scripted and
//!   HTTP-backed implementations).
//! - [`bench`] — scenario files, batch evaluation, metrics, and reports.

pub mod bench;
pub mod diagnosis;
pub mod executor;
pub mod kb;
pub mod proposer;
pub mod sdg;
pub mod sim;
pub mod subtree;

pub use bench::{run_batch, BenchReport, MetricsTable, Scenario};
pub use diagnosis::{diagnose, DiagnosisReport, ErrorClass};
pub use executor::{run_episode, EpisodeConfig, EpisodeResult, Strategy};
pub use kb::{load_kb, ActionKb, SUBJECT};
pub use sdg::{build_graph, StateDependencyGraph};
pub use sim::{MidLevelAction, WorldState};
pub use subtree::{build_candidates, extract_subsequences, SearchConfig};
