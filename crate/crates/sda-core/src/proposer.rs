//! Proposer interface. Every open-ended decision (decomposing instructions,
//! suggesting corrective actions, choosing among verified repairs, replanning,
//! and action-model bootstrapping) funnels through one request type so runs
//! can be replayed from a scripted table or delegated to a live HTTP model.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::ActionKb;
use crate::sim::MidLevelAction;

#[derive(Debug, Error)]
pub enum ProposerError {
    #[error("failed to read scripted table {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid scripted table: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no scripted response for request kind '{kind}' with payload {payload}")]
    Miss { kind: String, payload: String },
    #[error("http proposer: {0}")]
    Http(String),
    #[error("bad '{kind}' response: {message}")]
    BadResponse { kind: String, message: String },
    #[error("instruction must not be empty")]
    EmptyInstruction,
    #[error("http proposer endpoint not configured")]
    MissingEndpoint,
}

// ---------------------------------------------------------------------------
// Requests
// ---------------------------------------------------------------------------

pub mod kind {
    pub const DECOMPOSE: &str = "decompose";
    pub const LOCAL_REPLAN: &str = "local_replan";
    pub const GLOBAL_REPLAN: &str = "global_replan";
    pub const SUGGEST: &str = "suggest";
    pub const CHOOSE: &str = "choose";
    pub const KB_EFFECTS: &str = "kb_eff";
    pub const KB_DEPENDENCIES: &str = "kb_dep";
}

/// A single proposer call: a request kind plus a structured payload. The
/// payload, not the rendered prompt, is the identity of the request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposerRequest {
    pub kind: String,
    pub payload: Value,
}

/// Stable digest of a request: sha-256 over the kind and the payload's
/// canonical JSON (object keys are stored sorted, so serialization is
/// order-independent).
pub fn fingerprint(kind: &str, payload: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_bytes());
    hasher.update(b"\n");
    hasher.update(serde_json::to_string(payload).expect("serializable value"));
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub trait Proposer {
    fn respond(&self, request: &ProposerRequest) -> Result<String, ProposerError>;
}

// ---------------------------------------------------------------------------
// Scripted proposer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEntry {
    pub kind: String,
    pub payload: Value,
    pub response: String,
}

/// Exact-match replay table. A lookup miss is an error whose message carries
/// the full request, so the missing entry can be pasted into the table.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTable {
    responses: BTreeMap<String, String>,
}

impl ScriptedTable {
    pub fn from_entries(entries: Vec<ScriptedEntry>) -> Self {
        let mut responses = BTreeMap::new();
        for entry in entries {
            responses.insert(fingerprint(&entry.kind, &entry.payload), entry.response);
        }
        ScriptedTable { responses }
    }

    pub fn from_value(value: Value) -> Result<Self, ProposerError> {
        let entries: Vec<ScriptedEntry> = serde_json::from_value(value)?;
        Ok(Self::from_entries(entries))
    }

    pub fn from_path(path: &Path) -> Result<Self, ProposerError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProposerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let entries: Vec<ScriptedEntry> = serde_json::from_str(&text)?;
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedProposer {
    table: ScriptedTable,
}

impl ScriptedProposer {
    pub fn new(table: ScriptedTable) -> Self {
        ScriptedProposer { table }
    }
}

impl Proposer for ScriptedProposer {
    fn respond(&self, request: &ProposerRequest) -> Result<String, ProposerError> {
        let key = fingerprint(&request.kind, &request.payload);
        match self.table.responses.get(&key) {
            Some(response) => Ok(response.clone()),
            None => Err(ProposerError::Miss {
                kind: request.kind.clone(),
                payload: serde_json::to_string(&request.payload).expect("serializable value"),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP proposer
// ---------------------------------------------------------------------------

pub const ENDPOINT_VAR: &str = "SDA_PROPOSER_ENDPOINT";
pub const MODEL_VAR: &str = "SDA_PROPOSER_MODEL";
pub const TOKEN_VAR: &str = "SDA_PROPOSER_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProposerConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_seed() -> u64 {
    1
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_retries() -> u32 {
    2
}

impl HttpProposerConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpProposerConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 0.0,
            seed: default_seed(),
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
        }
    }
}

/// Live proposer speaking a minimal chat protocol. The bearer credential is
/// read from the environment, held privately, and omitted from diagnostics.
pub struct HttpProposer {
    config: HttpProposerConfig,
    credential: Option<String>,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpProposer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpProposer")
            .field("config", &self.config)
            .field(
                "credential",
                &self.credential.as_ref().map(|_| "<redacted>"),
            )
            .finish()
    }
}

#[derive(Debug, Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

impl HttpProposer {
    pub fn new(config: HttpProposerConfig) -> Result<Self, ProposerError> {
        if config.endpoint.is_empty() {
            return Err(ProposerError::MissingEndpoint);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProposerError::Http(e.to_string()))?;
        Ok(HttpProposer {
            config,
            credential: std::env::var(TOKEN_VAR).ok().filter(|t| !t.is_empty()),
            client,
        })
    }

    /// Builds a proposer from `SDA_PROPOSER_ENDPOINT`, `SDA_PROPOSER_MODEL`,
    /// and (optionally) `SDA_PROPOSER_TOKEN`.
    pub fn from_env() -> Result<Self, ProposerError> {
        let endpoint = std::env::var(ENDPOINT_VAR).unwrap_or_default();
        if endpoint.is_empty() {
            return Err(ProposerError::MissingEndpoint);
        }
        let model = std::env::var(MODEL_VAR).unwrap_or_else(|_| "default".to_string());
        Self::new(HttpProposerConfig::new(endpoint, model))
    }

    fn post_once(&self, prompt: &str) -> Result<String, ProposerError> {
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "seed": self.config.seed,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(token) = &self.credential {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| ProposerError::Http(e.without_url().to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(ProposerError::Http(format!("status {status}")));
        }
        let reply: ChatReply = response
            .json()
            .map_err(|e| ProposerError::Http(e.without_url().to_string()))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ProposerError::Http("reply carries no choices".into()))
    }
}

impl Proposer for HttpProposer {
    fn respond(&self, request: &ProposerRequest) -> Result<String, ProposerError> {
        let prompt = render_prompt(request)?;
        let attempts = self.config.retries + 1;
        let mut last_err = ProposerError::Http("no attempt made".into());
        for attempt in 0..attempts {
            match self.post_once(&prompt) {
                Ok(content) => return Ok(content),
                Err(err) => {
                    log::warn!(
                        "proposer request '{}' attempt {}/{} failed: {}",
                        request.kind,
                        attempt + 1,
                        attempts,
                        err
                    );
                    last_err = err;
                }
            }
        }
        Err(last_err)
    }
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

const DECOMPOSE_TEMPLATE: &str = include_str!("../prompts/decompose.txt");
const LOCAL_REPLAN_TEMPLATE: &str = include_str!("../prompts/local_replan.txt");
const GLOBAL_REPLAN_TEMPLATE: &str = include_str!("../prompts/global_replan.txt");
const SUGGEST_TEMPLATE: &str = include_str!("../prompts/suggest.txt");
const CHOOSE_TEMPLATE: &str = include_str!("../prompts/choose.txt");
const KB_EFF_TEMPLATE: &str = include_str!("../prompts/kb_eff.txt");
const KB_DEP_TEMPLATE: &str = include_str!("../prompts/kb_dep.txt");

fn template_for(kind_name: &str) -> Result<&'static str, ProposerError> {
    match kind_name {
        kind::DECOMPOSE => Ok(DECOMPOSE_TEMPLATE),
        kind::LOCAL_REPLAN => Ok(LOCAL_REPLAN_TEMPLATE),
        kind::GLOBAL_REPLAN => Ok(GLOBAL_REPLAN_TEMPLATE),
        kind::SUGGEST => Ok(SUGGEST_TEMPLATE),
        kind::CHOOSE => Ok(CHOOSE_TEMPLATE),
        kind::KB_EFFECTS => Ok(KB_EFF_TEMPLATE),
        kind::KB_DEPENDENCIES => Ok(KB_DEP_TEMPLATE),
        other => Err(ProposerError::BadResponse {
            kind: other.to_string(),
            message: "unknown request kind".into(),
        }),
    }
}

fn render_value(key: &str, value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Array(items) => {
            let rendered: Vec<String> = items
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    let text = render_value(key, item);
                    if key == "options" {
                        format!("{i}. {text}")
                    } else {
                        format!("- {text}")
                    }
                })
                .collect();
            rendered.join("\n")
        }
        other => other.to_string(),
    }
}

/// Fills the template for the request kind with the payload's fields:
/// `{field}` is replaced, strings verbatim, arrays as one line per element
/// (numbered for candidate options, bulleted otherwise).
pub fn render_prompt(request: &ProposerRequest) -> Result<String, ProposerError> {
    let template = template_for(&request.kind)?;
    let Value::Object(fields) = &request.payload else {
        return Err(ProposerError::BadResponse {
            kind: request.kind.clone(),
            message: "payload must be a JSON object".into(),
        });
    };
    let mut prompt = template.to_string();
    for (key, value) in fields {
        prompt = prompt.replace(&format!("{{{key}}}"), &render_value(key, value));
    }
    Ok(prompt)
}

/// One-line rendering of an action sequence, used in payloads and reports.
pub fn render_path(steps: &[MidLevelAction]) -> String {
    if steps.is_empty() {
        return "(empty)".to_string();
    }
    steps
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

/// Parses a numbered plan: one `N. (action, object)` per line. A bare
/// `(action, object)` line is also accepted; blank lines are skipped.
pub fn parse_numbered_plan(
    kind_name: &str,
    text: &str,
) -> Result<Vec<MidLevelAction>, ProposerError> {
    let mut steps = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let body = match line.split_once('.') {
            Some((prefix, rest))
                if prefix.chars().all(|c| c.is_ascii_digit()) && !prefix.is_empty() =>
            {
                rest.trim()
            }
            _ => line,
        };
        let step = MidLevelAction::parse(body).ok_or_else(|| ProposerError::BadResponse {
            kind: kind_name.to_string(),
            message: format!("unparseable step '{line}'"),
        })?;
        steps.push(step);
    }
    if steps.is_empty() {
        return Err(ProposerError::BadResponse {
            kind: kind_name.to_string(),
            message: "response contains no steps".into(),
        });
    }
    Ok(steps)
}

/// Parses `(state, value)` pairs, one per line; the single word `none` (any
/// case) means an empty list.
fn parse_pairs(kind_name: &str, text: &str) -> Result<Vec<(String, String)>, ProposerError> {
    let trimmed = text.trim();
    if trimmed.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let mut pairs = Vec::new();
    for line in trimmed.lines() {
        let line = line.trim().trim_start_matches('-').trim();
        if line.is_empty() {
            continue;
        }
        let inner = line
            .strip_prefix('(')
            .and_then(|rest| rest.strip_suffix(')'))
            .ok_or_else(|| ProposerError::BadResponse {
                kind: kind_name.to_string(),
                message: format!("line '{line}' is not of the form (state, value)"),
            })?;
        let (state, value) = inner
            .split_once(',')
            .ok_or_else(|| ProposerError::BadResponse {
                kind: kind_name.to_string(),
                message: format!("line '{line}' is missing a comma"),
            })?;
        let state = state.trim();
        let value = value.trim();
        if state.is_empty() || value.is_empty() {
            return Err(ProposerError::BadResponse {
                kind: kind_name.to_string(),
                message: format!("line '{line}' has an empty state or value"),
            });
        }
        pairs.push((state.to_string(), value.to_string()));
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Typed operations
// ---------------------------------------------------------------------------

/// Decomposes an instruction into a mid-level plan.
pub fn decompose(
    proposer: &dyn Proposer,
    instruction: &str,
    objects: &[String],
    skills: &[String],
) -> Result<Vec<MidLevelAction>, ProposerError> {
    if instruction.trim().is_empty() {
        return Err(ProposerError::EmptyInstruction);
    }
    let request = ProposerRequest {
        kind: kind::DECOMPOSE.to_string(),
        payload: json!({
            "instruction": instruction,
            "objects": objects,
            "skills": skills,
        }),
    };
    let response = proposer.respond(&request)?;
    parse_numbered_plan(kind::DECOMPOSE, &response)
}

/// Requests a recovery plan for a step that failed against the live scene.
pub fn local_replan(
    proposer: &dyn Proposer,
    failed: &MidLevelAction,
    instruction: &str,
    objects: &[String],
) -> Result<Vec<MidLevelAction>, ProposerError> {
    let request = ProposerRequest {
        kind: kind::LOCAL_REPLAN.to_string(),
        payload: json!({
            "failed": failed.to_string(),
            "instruction": instruction,
            "objects": objects,
        }),
    };
    let response = proposer.respond(&request)?;
    parse_numbered_plan(kind::LOCAL_REPLAN, &response)
}

/// Requests a fresh full plan for the instruction.
pub fn global_replan(
    proposer: &dyn Proposer,
    instruction: &str,
    objects: &[String],
) -> Result<Vec<MidLevelAction>, ProposerError> {
    let request = ProposerRequest {
        kind: kind::GLOBAL_REPLAN.to_string(),
        payload: json!({
            "instruction": instruction,
            "objects": objects,
        }),
    };
    let response = proposer.respond(&request)?;
    parse_numbered_plan(kind::GLOBAL_REPLAN, &response)
}

/// Asks for corrective action candidates targeted at the diagnosed violation.
/// Steps naming unknown actions or objects are dropped with a warning rather
/// than failing the repair.
#[allow(clippy::too_many_arguments)]
pub fn suggest_corrections(
    proposer: &dyn Proposer,
    failed: &MidLevelAction,
    instruction: &str,
    s_error: &str,
    v_need: &str,
    window: &[MidLevelAction],
    kb: &ActionKb,
    universe: &[String],
) -> Result<Vec<MidLevelAction>, ProposerError> {
    let window_rendered: Vec<String> = window.iter().map(|s| s.to_string()).collect();
    let request = ProposerRequest {
        kind: kind::SUGGEST.to_string(),
        payload: json!({
            "failed": failed.to_string(),
            "instruction": instruction,
            "s_error": s_error,
            "v_need": v_need,
            "window": window_rendered,
        }),
    };
    let response = proposer.respond(&request)?;
    if response.trim().eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let steps = parse_numbered_plan(kind::SUGGEST, &response)?;
    let mut kept = Vec::new();
    for step in steps {
        if kb.action(&step.action).is_none() {
            log::warn!("dropping suggestion {step}: unknown action");
            continue;
        }
        if !universe.iter().any(|o| o == &step.object) {
            log::warn!("dropping suggestion {step}: unknown object");
            continue;
        }
        kept.push(step);
    }
    Ok(kept)
}

/// Asks the proposer to pick among rendered candidate sequences; candidates
/// are numbered from 0 and the reply must be one of those numbers.
pub fn choose(
    proposer: &dyn Proposer,
    instruction: &str,
    options: &[String],
) -> Result<usize, ProposerError> {
    let request = ProposerRequest {
        kind: kind::CHOOSE.to_string(),
        payload: json!({
            "instruction": instruction,
            "options": options,
        }),
    };
    let response = proposer.respond(&request)?;
    let picked: usize =
        response
            .trim()
            .trim_end_matches('.')
            .parse()
            .map_err(|_| ProposerError::BadResponse {
                kind: kind::CHOOSE.to_string(),
                message: format!("reply '{}' is not a candidate number", response.trim()),
            })?;
    if picked >= options.len() {
        return Err(ProposerError::BadResponse {
            kind: kind::CHOOSE.to_string(),
            message: format!(
                "candidate number {picked} out of range 0..{}",
                options.len()
            ),
        });
    }
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KbQuery {
    Effects,
    Dependencies,
}

/// Queries the action model for an action's effects or dependencies during
/// bootstrapping. Replies are `(state, value)` lines with `SUBJECT` standing
/// for the action's object, or `none`.
pub fn query_kb(
    proposer: &dyn Proposer,
    query: KbQuery,
    action: &str,
    known_states: &[String],
) -> Result<Vec<(String, String)>, ProposerError> {
    let kind_name = match query {
        KbQuery::Effects => kind::KB_EFFECTS,
        KbQuery::Dependencies => kind::KB_DEPENDENCIES,
    };
    let request = ProposerRequest {
        kind: kind_name.to_string(),
        payload: json!({
            "action": action,
            "known_states": known_states,
        }),
    };
    let response = proposer.respond(&request)?;
    parse_pairs(kind_name, &response)
}

// ---------------------------------------------------------------------------
