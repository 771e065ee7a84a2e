//! Stage 2: remediation.
//!
//! The RCA report becomes a retrieval query; several retrieval routes run
//! concurrently and are merged with reciprocal rank fusion; a reranker
//! reorders the fused list; the top chunks fill a solution prompt; the
//! model's tool calls are validated and executed, dry-run by default.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::config::{RetrievalConfig, RunConfig};
use crate::eval::CostRecord;
use crate::ingest::{split_tokens, truncate_to_tokens, Tokenizer};
use crate::knowledge::{Hit, KnowledgeStore};
use crate::llm::{self, ChatMessage, LlmBackend, LlmError, KNOWLEDGE_CLOSE, KNOWLEDGE_OPEN, SOLUTION_TASK_TAG};
use crate::pruner::Excerpt;
use crate::rca::{strip_fences, RcaReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    /// Root causes, joined.
    pub summary: String,
    /// Deduplicated log lines quoted by the report.
    pub trace: String,
    pub rendered: String,
}

fn token_bag(text: &str) -> BTreeMap<&str, usize> {
    let mut bag = BTreeMap::new();
    for t in split_tokens(text) {
        *bag.entry(t).or_default() += 1;
    }
    bag
}

/// `|shared token multiset| / |smaller line's multiset|`.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let (ba, bb) = (token_bag(a), token_bag(b));
    let (na, nb): (usize, usize) = (ba.values().sum(), bb.values().sum());
    let smaller = na.min(nb);
    if smaller == 0 {
        return 0.0;
    }
    let shared: usize = ba
        .iter()
        .map(|(t, &c)| c.min(bb.get(t).copied().unwrap_or(0)))
        .sum();
    shared as f64 / smaller as f64
}

fn render_query(summary: &str, lines: &[&str]) -> String {
    let mut out = format!("Root cause: {summary}\nTrace:\n");
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    out
}

/// Combines the root causes with the quoted log lines. Near-duplicate
/// lines are dropped, keeping the first; the trace is then cut from the
/// end until the rendering fits `cfg.query_token_limit`.
pub fn build_query(
    report: &RcaReport,
    excerpt: &Excerpt,
    cfg: &RetrievalConfig,
    tok: &dyn Tokenizer,
) -> RetrievalQuery {
    let limit = cfg.query_token_limit;
    let mut summary = report.root_cause.join("; ");
    let overhead = tok.count(&render_query("", &[]));
    if tok.count(&summary) + overhead > limit {
        summary = truncate_to_tokens(&summary, limit.saturating_sub(overhead)).to_string();
    }
    while !summary.is_empty() && tok.count(&render_query(&summary, &[])) > limit {
        let n = tok.count(&summary).saturating_sub(1);
        summary = truncate_to_tokens(&summary, n).to_string();
    }

    let mut seen = BTreeSet::new();
    let mut kept: Vec<&str> = Vec::new();
    for n in report.ranges().flat_map(|r| r.lines()) {
        if !seen.insert(n) {
            continue;
        }
        let Some(text) = excerpt.line(n) else { continue };
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        if kept.iter().any(|k| token_overlap(k, text) >= cfg.overlap_threshold) {
            continue;
        }
        kept.push(text);
    }

    let mut total = tok.count(&render_query(&summary, &kept));
    while total > limit && !kept.is_empty() {
        kept.pop();
        total = tok.count(&render_query(&summary, &kept));
    }
    RetrievalQuery {
        trace: kept.join("\n"),
        rendered: render_query(&summary, &kept),
        summary,
    }
}

/// Retrieval strategy slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKind {
    SparseSummary,
    SparseTrace,
    DenseSummary,
    DenseTrace,
    QueryRewrite,
    Hyde,
    Relational,
    DocumentTree,
}

impl RouteKind {
    pub const DEFAULT: [RouteKind; 4] = [
        RouteKind::SparseSummary,
        RouteKind::SparseTrace,
        RouteKind::DenseSummary,
        RouteKind::DenseTrace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RouteKind::SparseSummary => "sparse_summary",
            RouteKind::SparseTrace => "sparse_trace",
            RouteKind::DenseSummary => "dense_summary",
            RouteKind::DenseTrace => "dense_trace",
            RouteKind::QueryRewrite => "query_rewrite",
            RouteKind::Hyde => "hyde",
            RouteKind::Relational => "relational",
            RouteKind::DocumentTree => "document_tree",
        }
    }
}

pub trait Route: Send + Sync {
    fn name(&self) -> &str;
    fn search(&self, query: &RetrievalQuery, store: &KnowledgeStore, cap: usize) -> Result<Vec<Hit<f64>>, String>;
}

/// The built-in strategy for a slot. Slots without an implementation
/// return nothing.
pub struct BuiltinRoute(pub RouteKind);

impl Route for BuiltinRoute {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn search(&self, q: &RetrievalQuery, store: &KnowledgeStore, cap: usize) -> Result<Vec<Hit<f64>>, String> {
        Ok(match self.0 {
            RouteKind::SparseSummary => store.sparse_search(&q.summary, cap),
            RouteKind::SparseTrace => store.sparse_search(&q.trace, cap),
            RouteKind::DenseSummary => store.dense_search(&q.summary, cap),
            RouteKind::DenseTrace => store.dense_search(&q.trace, cap),
            RouteKind::QueryRewrite | RouteKind::Hyde | RouteKind::Relational | RouteKind::DocumentTree => Vec::new(),
        })
    }
}

pub fn routes_for(kinds: &[RouteKind]) -> Vec<Box<dyn Route>> {
    kinds.iter().map(|&k| Box::new(BuiltinRoute(k)) as Box<dyn Route>).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteHit {
    pub route: String,
    /// 1-based rank within the route.
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalCandidate {
    pub chunk_id: String,
    #[serde(skip)]
    pub chunk: usize,
    /// Route where the chunk ranked best.
    pub route: String,
    pub route_score: f64,
    pub fused_score: f64,
    pub rerank_score: Option<f64>,
    pub hits: Vec<RouteHit>,
}

#[derive(Debug, Error, PartialEq)]
pub enum RecallError {
    #[error("no retrieval routes enabled")]
    NoRoutes,
    #[error("{0} routes configured; at most 8 are supported")]
    TooManyRoutes(usize),
}

/// Runs every route concurrently, caps each at `per_route_cap`, and merges
/// by reciprocal rank fusion: `Σ 1 / (k + rank)`. The top `fused_cap`
/// candidates are kept, ties broken by chunk id. A failing route is logged
/// and skipped.
pub fn multi_route_recall(
    query: &RetrievalQuery,
    store: &KnowledgeStore,
    routes: &[Box<dyn Route>],
    cfg: &RetrievalConfig,
) -> Result<Vec<RetrievalCandidate>, RecallError> {
    if routes.is_empty() {
        return Err(RecallError::NoRoutes);
    }
    if routes.len() > 8 {
        return Err(RecallError::TooManyRoutes(routes.len()));
    }
    let results: Vec<Result<Vec<Hit<f64>>, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = routes
            .iter()
            .map(|r| s.spawn(move || r.search(query, store, cfg.per_route_cap)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err("route panicked".into())))
            .collect()
    });

    let mut merged: BTreeMap<usize, RetrievalCandidate> = BTreeMap::new();
    for (route, result) in routes.iter().zip(results) {
        let hits = match result {
            Ok(h) => h,
            Err(e) => {
                log::warn!("retrieval route {} failed: {e}", route.name());
                continue;
            }
        };
        for (i, hit) in hits.into_iter().take(cfg.per_route_cap).enumerate() {
            let rank = i + 1;
            let rrf = 1.0 / (cfg.rrf_k + rank as f64);
            let entry = merged.entry(hit.chunk).or_insert_with(|| RetrievalCandidate {
                chunk_id: store.chunk(hit.chunk).id.clone(),
                chunk: hit.chunk,
                route: route.name().to_string(),
                route_score: hit.score,
                fused_score: 0.0,
                rerank_score: None,
                hits: Vec::new(),
            });
            entry.fused_score += rrf;
            if entry.hits.iter().all(|h| h.rank > rank) {
                entry.route = route.name().to_string();
                entry.route_score = hit.score;
            }
            entry.hits.push(RouteHit {
                route: route.name().to_string(),
                rank,
                score: hit.score,
            });
        }
    }
    let mut out: Vec<RetrievalCandidate> = merged.into_values().collect();
    out.sort_by(|a, b| {
        b.fused_score
            .partial_cmp(&a.fused_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
    out.truncate(cfg.fused_cap);
    Ok(out)
}

pub trait Reranker: Send + Sync {
    /// One relevance score per text; higher is better.
    fn score(&self, query: &str, texts: &[String]) -> Result<Vec<f64>, String>;
}

/// Scores by fused position, leaving the order unchanged.
pub struct PassthroughReranker;

impl Reranker for PassthroughReranker {
    fn score(&self, _query: &str, texts: &[String]) -> Result<Vec<f64>, String> {
        Ok((0..texts.len()).map(|i| (texts.len() - i) as f64).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Reranked {
    pub candidates: Vec<RetrievalCandidate>,
    /// The reranker never answered in time; fused order was kept.
    pub degraded: bool,
    pub attempts: usize,
}

/// Reorders by reranker score (stable for equal scores). Each attempt is
/// bounded by `timeout`; after `1 + retries` failed attempts the fused
/// order is returned unchanged and flagged as degraded.
pub fn rerank(
    candidates: Vec<RetrievalCandidate>,
    query: &str,
    store: &KnowledgeStore,
    reranker: Arc<dyn Reranker>,
    timeout: Duration,
    retries: usize,
) -> Reranked {
    if candidates.is_empty() {
        return Reranked { candidates, degraded: false, attempts: 0 };
    }
    let texts: Arc<Vec<String>> = Arc::new(
        candidates
            .iter()
            .map(|c| store.chunk(c.chunk).indexed_text())
            .collect(),
    );
    let query: Arc<str> = Arc::from(query);
    for attempt in 1..=retries + 1 {
        let (tx, rx) = mpsc::channel();
        let (r, t, q) = (reranker.clone(), texts.clone(), query.clone());
        std::thread::spawn(move || {
            let _ = tx.send(r.score(&q, &t));
        });
        match rx.recv_timeout(timeout) {
            Ok(Ok(scores)) if scores.len() == candidates.len() => {
                let mut scored: Vec<(RetrievalCandidate, f64)> = candidates.into_iter().zip(scores).collect();
                scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
                let candidates = scored
                    .into_iter()
                    .map(|(mut c, s)| {
                        c.rerank_score = Some(s);
                        c
                    })
                    .collect();
                return Reranked { candidates, degraded: false, attempts: attempt };
            }
            Ok(Ok(scores)) => log::warn!(
                "reranker returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            ),
            Ok(Err(e)) => log::warn!("reranker attempt {attempt} failed: {e}"),
            Err(_) => log::warn!("reranker attempt {attempt} timed out"),
        }
    }
    Reranked {
        candidates,
        degraded: true,
        attempts: retries + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    Object,
    Array,
}

impl ParamType {
    fn accepts(self, v: &Value) -> bool {
        match self {
            ParamType::String => v.is_string(),
            ParamType::Integer => v.is_i64() || v.is_u64(),
            ParamType::Number => v.is_number(),
            ParamType::Boolean => v.is_boolean(),
            ParamType::Object => v.is_object(),
            ParamType::Array => v.is_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ParamType,
    #[serde(default)]
    pub description: String,
    #[serde(default = "yes")]
    pub required: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
    #[serde(default = "yes")]
    pub dry_run_capable: bool,
}

impl ToolSpec {
    pub fn validate(&self, args: &Map<String, Value>) -> Result<(), String> {
        for p in &self.parameters {
            match args.get(&p.name) {
                None if p.required => return Err(format!("missing required argument {}", p.name)),
                Some(v) if !p.kind.accepts(v) => {
                    return Err(format!("argument {} must be of type {:?}", p.name, p.kind).to_lowercase())
                }
                _ => {}
            }
        }
        if let Some(extra) = args.keys().find(|k| !self.parameters.iter().any(|p| &p.name == *k)) {
            return Err(format!("unknown argument {extra}"));
        }
        Ok(())
    }

    fn schema_json(&self) -> Value {
        let props: Map<String, Value> = self
            .parameters
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    serde_json::json!({"type": p.kind, "description": p.description}),
                )
            })
            .collect();
        let required: Vec<&str> = self
            .parameters
            .iter()
            .filter(|p| p.required)
            .map(|p| p.name.as_str())
            .collect();
        serde_json::json!({
            "name": self.name,
            "description": self.description,
            "parameters": {"type": "object", "properties": props, "required": required},
        })
    }
}

pub trait Tool: Send + Sync {
    /// Performs (or, with `dry_run`, describes) the action.
    fn run(&self, spec: &ToolSpec, args: &Map<String, Value>, dry_run: bool) -> Result<String, String>;
}

/// Tool that never has side effects: it reports what it would do.
pub struct StubTool;

impl Tool for StubTool {
    fn run(&self, spec: &ToolSpec, args: &Map<String, Value>, dry_run: bool) -> Result<String, String> {
        let args = Value::Object(args.clone());
        if dry_run {
            Ok(format!("would invoke {} with {args}", spec.name))
        } else {
            Ok(format!("invoked {} with {args} (stub, no external effect)", spec.name))
        }
    }
}

fn param(name: &str, kind: ParamType, description: &str, required: bool) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind,
        description: description.into(),
        required,
    }
}

/// The bundled demo tools.
pub fn default_tool_specs() -> Vec<ToolSpec> {
    let spec = |name: &str, description: &str, parameters| ToolSpec {
        name: name.into(),
        description: description.into(),
        parameters,
        dry_run_capable: true,
    };
    vec![
        spec(
            "retry_pipeline",
            "Re-run a pipeline run, optionally only its failed jobs.",
            vec![
                param("run_id", ParamType::String, "Run to retry", true),
                param("failed_only", ParamType::Boolean, "Retry only failed jobs", false),
            ],
        ),
        spec(
            "clear_cache",
            "Invalidate a named build cache.",
            vec![param("cache_key", ParamType::String, "Cache key or prefix", true)],
        ),
        spec(
            "pin_dependency",
            "Pin a dependency to a fixed version in the build manifest.",
            vec![
                param("package", ParamType::String, "Package name", true),
                param("version", ParamType::String, "Version to pin", true),
            ],
        ),
        spec(
            "open_ticket",
            "Open a ticket for the owning team.",
            vec![
                param("title", ParamType::String, "Ticket title", true),
                param("body", ParamType::String, "Ticket description", false),
                param("priority", ParamType::Integer, "1 (highest) to 4", false),
            ],
        ),
    ]
}

pub struct ToolRegistry {
    tools: BTreeMap<String, (ToolSpec, Box<dyn Tool>)>,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cannot read tool registry {path}: {message}")]
    Load { path: String, message: String },
    #[error("tool {0} registered twice")]
    Duplicate(String),
    #[error("tool name must not be empty")]
    EmptyName,
}

impl ToolRegistry {
    pub fn new() -> Self {
        ToolRegistry { tools: BTreeMap::new() }
    }

    /// Every spec backed by [`StubTool`].
    pub fn with_stubs(specs: Vec<ToolSpec>) -> Result<Self, RegistryError> {
        let mut r = Self::new();
        for s in specs {
            r.register(s, Box::new(StubTool))?;
        }
        Ok(r)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RegistryError> {
        let err = |message: String| RegistryError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let specs: Vec<ToolSpec> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Self::with_stubs(specs)
    }

    pub fn register(&mut self, spec: ToolSpec, tool: Box<dyn Tool>) -> Result<(), RegistryError> {
        if spec.name.trim().is_empty() {
            return Err(RegistryError::EmptyName);
        }
        if self.tools.contains_key(&spec.name) {
            return Err(RegistryError::Duplicate(spec.name));
        }
        self.tools.insert(spec.name.clone(), (spec, tool));
        Ok(())
    }

    pub fn spec(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name).map(|(s, _)| s)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values().map(|(s, _)| s)
    }

    /// Function-call schema for the prompt.
    pub fn schema_json(&self) -> Value {
        Value::Array(self.specs().map(ToolSpec::schema_json).collect())
    }
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::with_stubs(default_tool_specs()).expect("default tool names are unique")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
    #[serde(default = "yes")]
    pub dry_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPlan {
    pub explanation: String,
    pub steps: Vec<ToolCall>,
    pub citations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    DryRun,
    Executed,
    Rejected,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub tool: String,
    pub arguments: Map<String, Value>,
    pub status: StepStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub plan: SolutionPlan,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("malformed plan: {0}")]
    Malformed(String),
    #[error("unknown tool {0}")]
    UnknownTool(String),
    #[error("invalid arguments for {tool}: {message}")]
    InvalidArguments { tool: String, message: String },
}

#[derive(Deserialize)]
struct RawCall {
    tool: String,
    #[serde(default)]
    arguments: Map<String, Value>,
}

#[derive(Deserialize)]
struct RawPlan {
    #[serde(default)]
    explanation: String,
    #[serde(default)]
    citations: Vec<String>,
    #[serde(default)]
    tool_calls: Vec<RawCall>,
}

/// Accepts a JSON array of `{"tool", "arguments"}` or an object with
/// `explanation`, `citations` and `tool_calls`.
fn parse_raw_plan(raw: &str) -> Result<RawPlan, PlanError> {
    let text = strip_fences(raw);
    let start = text
        .find(['{', '['])
        .ok_or_else(|| PlanError::Malformed("no JSON found".into()))?;
    let value = serde_json::Deserializer::from_str(&text[start..])
        .into_iter::<Value>()
        .next()
        .ok_or_else(|| PlanError::Malformed("no JSON found".into()))?
        .map_err(|e| PlanError::Malformed(e.to_string()))?;
    let malformed = |e: serde_json::Error| PlanError::Malformed(e.to_string());
    if value.is_array() {
        Ok(RawPlan {
            explanation: String::new(),
            citations: Vec::new(),
            tool_calls: serde_json::from_value(value).map_err(malformed)?,
        })
    } else {
        serde_json::from_value(value).map_err(malformed)
    }
}

pub fn check_call(registry: &ToolRegistry, tool: &str, args: &Map<String, Value>) -> Result<(), PlanError> {
    let spec = registry
        .spec(tool)
        .ok_or_else(|| PlanError::UnknownTool(tool.to_string()))?;
    spec.validate(args).map_err(|message| PlanError::InvalidArguments {
        tool: tool.to_string(),
        message,
    })
}

/// Parses the model's plan and runs its steps in order. Rejected and
/// failing steps are recorded and do not stop later steps. Citations not
/// among `context_ids` are dropped.
pub fn execute_plan(
    raw: &str,
    registry: &ToolRegistry,
    context_ids: &BTreeSet<String>,
    dry_run: bool,
) -> Result<Transcript, PlanError> {
    let parsed = parse_raw_plan(raw)?;
    let mut citations = Vec::new();
    for c in parsed.citations {
        if context_ids.contains(&c) {
            if !citations.contains(&c) {
                citations.push(c);
            }
        } else {
            log::warn!("dropping citation {c}: not in the retrieved context");
        }
    }
    let mut steps = Vec::new();
    let mut records = Vec::new();
    for call in parsed.tool_calls {
        let record = |status, detail: String| StepRecord {
            tool: call.tool.clone(),
            arguments: call.arguments.clone(),
            status,
            detail,
        };
        if let Err(e) = check_call(registry, &call.tool, &call.arguments) {
            records.push(record(StepStatus::Rejected, e.to_string()));
            continue;
        }
        let (spec, tool) = &registry.tools[&call.tool];
        if dry_run && !spec.dry_run_capable {
            records.push(record(StepStatus::Rejected, format!("{} cannot run in dry-run mode", call.tool)));
            continue;
        }
        steps.push(ToolCall {
            tool: call.tool.clone(),
            arguments: call.arguments.clone(),
            dry_run,
        });
        records.push(match tool.run(spec, &call.arguments, dry_run) {
            Ok(detail) if dry_run => record(StepStatus::DryRun, detail),
            Ok(detail) => record(StepStatus::Executed, detail),
            Err(e) => record(StepStatus::Failed, e),
        });
    }
    Ok(Transcript {
        plan: SolutionPlan {
            explanation: parsed.explanation,
            steps,
            citations,
        },
        steps: records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionPrompt {
    pub system: String,
    pub user: String,
    /// Chunk ids packed into the prompt, in rank order.
    pub included: Vec<String>,
    pub knowledge_tokens: usize,
}

impl SolutionPrompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::system(&self.system), ChatMessage::user(&self.user)]
    }
}

pub const SOLUTION_OUTPUT_SCHEMA: &str = r#"{
  "explanation": "<remediation advice>",
  "citations": ["<doc id from the knowledge section>"],
  "tool_calls": [{"tool": "<tool name>", "arguments": {"<name>": "<value>"}}]
}"#;

fn knowledge_stanza(id: &str, title: &str, text: &str) -> String {
    format!("[doc:{id}] {title}\n{text}\n")
}

/// Packs reranked chunks in order until the next one would exceed
/// `token_limit`, then adds the RCA summary and tool schema.
pub fn build_solution_prompt(
    report: &RcaReport,
    query: &RetrievalQuery,
    reranked: &[RetrievalCandidate],
    store: &KnowledgeStore,
    tools: &ToolRegistry,
    token_limit: usize,
    tok: &dyn Tokenizer,
) -> SolutionPrompt {
    let mut knowledge = String::new();
    let mut included = Vec::new();
    let mut used = 0;
    for c in reranked {
        let chunk = store.chunk(c.chunk);
        let stanza = knowledge_stanza(&chunk.id, &chunk.title, &chunk.text);
        let cost = tok.count(&stanza);
        if used + cost > token_limit {
            break;
        }
        used += cost;
        knowledge.push_str(&stanza);
        included.push(chunk.id.clone());
    }
    let system = format!(
        "{SOLUTION_TASK_TAG}\n\
You are a CI/CD remediation assistant. Using the root-cause analysis and the knowledge entries provided, \
recommend a fix and, where a registered tool applies, call it.\n\
Cite only doc ids that appear in the knowledge section. Only use the tools listed below, with arguments \
that match their schemas.\n\
Tools:\n{}\n\
Reply with a single JSON object following this schema:\n{SOLUTION_OUTPUT_SCHEMA}\n",
        serde_json::to_string_pretty(&tools.schema_json()).expect("schema serializes")
    );
    let analyses: Vec<&str> = report.log_analysis.iter().map(|a| a.analysis.as_str()).collect();
    let user = format!(
        "Root cause analysis:\n{}\n{}\n\nCritical log lines:\n{}\n\n{KNOWLEDGE_OPEN}\n{knowledge}{KNOWLEDGE_CLOSE}",
        query.summary,
        analyses.join("\n"),
        query.trace,
    );
    SolutionPrompt {
        system,
        user,
        included,
        knowledge_tokens: used,
    }
}

#[derive(Debug, Error)]
pub enum SolutionError {
    #[error(transparent)]
    Recall(#[from] RecallError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no valid plan after {attempts} query rounds; last problem: {last}")]
    InvalidOutput { attempts: usize, last: PlanError },
}

#[derive(Debug, Clone)]
pub struct SolutionRun {
    pub query: RetrievalQuery,
    pub candidates: Vec<RetrievalCandidate>,
    pub degraded: bool,
    pub prompt: SolutionPrompt,
    pub transcript: Transcript,
    pub cost: CostRecord,
}

pub struct SolutionInputs<'a> {
    pub report: &'a RcaReport,
    pub excerpt: &'a Excerpt,
    pub store: &'a KnowledgeStore,
    pub tools: &'a ToolRegistry,
    pub reranker: Arc<dyn Reranker>,
}

/// Stage 2 end to end: query, recall, rerank, prompt, plan, execute.
pub fn run_solution(
    inputs: &SolutionInputs<'_>,
    cfg: &RunConfig,
    backend: &dyn LlmBackend,
    tok: &dyn Tokenizer,
    dry_run: bool,
) -> Result<SolutionRun, SolutionError> {
    let rc = &cfg.retrieval;
    let query = build_query(inputs.report, inputs.excerpt, rc, tok);
    let fused = multi_route_recall(&query, inputs.store, &routes_for(&rc.routes), rc)?;
    let reranked = rerank(
        fused,
        &query.rendered,
        inputs.store,
        inputs.reranker.clone(),
        Duration::from_secs(rc.rerank_timeout_secs),
        rc.rerank_retries,
    );
    let prompt = build_solution_prompt(
        inputs.report,
        &query,
        &reranked.candidates,
        inputs.store,
        inputs.tools,
        rc.context_token_limit,
        tok,
    );
    let allowed: BTreeSet<String> = prompt.included.iter().cloned().collect();
    let mut cost = CostRecord::new("solution");
    let max = cfg.llm.max_attempts();
    let mut messages = prompt.messages();
    let transcript = loop {
        let request = cfg.llm.request(messages.clone());
        let remaining = max.saturating_sub(cost.query_rounds).max(1);
        let raw = llm::invoke_with_budget(backend, &request, remaining, tok, &mut cost)?;
        // Parsing is checked before any tool runs, so a retry never repeats side effects.
        match parse_raw_plan(&raw) {
            Ok(_) => break execute_plan(&raw, inputs.tools, &allowed, dry_run).expect("plan already parsed"),
            Err(e) if cost.query_rounds >= max => {
                return Err(SolutionError::InvalidOutput {
                    attempts: cost.query_rounds,
                    last: e,
                })
            }
            Err(e) => {
                messages.push(ChatMessage::assistant(raw));
                messages.push(ChatMessage::user(format!(
                    "Your previous reply was rejected: {e}.\nReply again with only JSON following this schema:\n{SOLUTION_OUTPUT_SCHEMA}"
                )));
            }
        }
    };
    Ok(SolutionRun {
        query,
        candidates: reranked.candidates,
        degraded: reranked.degraded,
        prompt,
        transcript,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Outcome, RawLog, RegexTokenizer};
    use crate::knowledge::{DocKind, HashedBowEmbedder, KbConfig, KnowledgeDoc};
    use crate::rca::{LineRange, LogAnalysis};
    use proptest::prelude::*;

    fn report(causes: &[&str], ranges: &[(usize, usize)]) -> RcaReport {
        RcaReport {
            log_analysis: vec![LogAnalysis {
                error_logs: ranges.iter().map(|&(a, b)| LineRange::new(a, b)).collect(),
                analysis: "a".into(),
            }],
            root_cause: causes.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn excerpt(lines: &[&str]) -> Excerpt {
        let log = RawLog::from_lines("r", "t", Outcome::Failed, lines.iter().copied());
        Excerpt::from_ranges(&[(1, lines.len())], &log)
    }

    fn kb(docs: &[(&str, &str)]) -> KnowledgeStore {
        let docs: Vec<KnowledgeDoc> = docs
            .iter()
            .map(|(id, body)| KnowledgeDoc {
                doc_id: id.to_string(),
                kind: DocKind::Manual,
                title: format!("title {id}"),
                body: body.to_string(),
                token_count: 0,
            })
            .collect();
        KnowledgeStore::ingest(&docs, &KbConfig::default(), Arc::new(HashedBowEmbedder::default()), &RegexTokenizer).unwrap()
    }

    #[test]
    fn query_contains_causes_and_lines() {
        let ex = excerpt(&["alpha one", "beta two", "gamma three", "delta four"]);
        let q = build_query(&report(&["cause A", "cause B"], &[(1, 1), (2, 3)]), &ex, &RetrievalConfig::default(), &RegexTokenizer);
        assert!(q.summary.contains("cause A") && q.summary.contains("cause B"));
        for l in ["alpha one", "beta two", "gamma three"] {
            assert!(q.rendered.contains(l));
        }
        assert!(!q.rendered.contains("delta"));
    }

    #[test]
    fn near_duplicate_lines_dropped() {
        let a = "at com.acme.Foo.bar Foo.java 10 x y z w";
        let b = "at com.acme.Foo.bar Foo.java 10 x y z q";
        assert_eq!(split_tokens(a).count(), split_tokens(b).count());
        assert!(token_overlap(a, b) >= 0.8);
        let ex = excerpt(&[a, b]);
        let q = build_query(&report(&["c"], &[(1, 2)]), &ex, &RetrievalConfig::default(), &RegexTokenizer);
        assert_eq!(q.trace, a);
        let nine_of_ten = token_overlap("a b c d e f g h i j", "a b c d e f g h i k");
        assert_eq!(nine_of_ten, 0.9);
    }

    #[test]
    fn long_trace_truncated_summary_kept() {
        let lines: Vec<String> = (0..1000).map(|i| format!("line{i} payload{i} w{i} v{i} u{i} t{i} s{i} r{i} q{i} p{i}")).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let ex = excerpt(&refs);
        let q = build_query(&report(&["the summary"], &[(1, 1000)]), &ex, &RetrievalConfig::default(), &RegexTokenizer);
        assert!(RegexTokenizer.count(&q.rendered) <= 3000);
        assert!(q.rendered.contains("the summary"));
        assert!(q.trace.contains("line0 "));
    }

    #[test]
    fn single_route_rrf() {
        let store = kb(&[("a", "timeout alpha"), ("b", "timeout beta"), ("c", "other")]);
        let cfg = RetrievalConfig::default();
        let q = RetrievalQuery { summary: "timeout".into(), trace: String::new(), rendered: String::new() };
        let out = multi_route_recall(&q, &store, &routes_for(&[RouteKind::SparseSummary]), &cfg).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].fused_score, 1.0 / 61.0);
        assert_eq!(out[1].fused_score, 1.0 / 62.0);
        let none = routes_for(&[RouteKind::Hyde, RouteKind::Relational]);
        assert!(multi_route_recall(&q, &store, &none, &cfg).unwrap().is_empty());
        assert_eq!(multi_route_recall(&q, &store, &[], &cfg).unwrap_err(), RecallError::NoRoutes);
    }

    struct FixedRoute(Vec<usize>, &'static str);
    impl Route for FixedRoute {
        fn name(&self) -> &str {
            self.1
        }
        fn search(&self, _: &RetrievalQuery, _: &KnowledgeStore, _: usize) -> Result<Vec<Hit<f64>>, String> {
            Ok(self.0.iter().map(|&c| Hit { chunk: c, score: 1.0 }).collect())
        }
    }

    struct BrokenRoute;
    impl Route for BrokenRoute {
        fn name(&self) -> &str {
            "broken"
        }
        fn search(&self, _: &RetrievalQuery, _: &KnowledgeStore, _: usize) -> Result<Vec<Hit<f64>>, String> {
            Err("backend down".into())
        }
    }

    #[test]
    fn shared_docs_outrank_unique_peers_and_caps_hold() {
        let docs: Vec<(String, String)> = (0..120).map(|i| (format!("d{i:03}"), format!("body {i}"))).collect();
        let refs: Vec<(&str, &str)> = docs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let store = kb(&refs);
        let a: Vec<usize> = (0..70).collect();
        let b: Vec<usize> = (0..20).chain(80..120).collect();
        let routes: Vec<Box<dyn Route>> = vec![Box::new(FixedRoute(a, "a")), Box::new(FixedRoute(b, "b")), Box::new(BrokenRoute)];
        let q = RetrievalQuery { summary: String::new(), trace: String::new(), rendered: String::new() };
        let out = multi_route_recall(&q, &store, &routes, &RetrievalConfig::default()).unwrap();
        assert!(out.len() <= 100);
        assert!(out.iter().all(|c| c.hits.len() <= 2 && c.hits.iter().all(|h| h.rank <= 60)));
        let score = |id: usize| out.iter().find(|c| c.chunk == id).map(|c| c.fused_score);
        // Chunk 5 is rank 6 in both routes; chunk 25 is rank 26 in one.
        assert!(score(5).unwrap() > score(25).unwrap());
        assert!(out.iter().all(|c| c.chunk != 45 || c.hits.len() == 1));
        assert!(score(65).is_none(), "rank 66 is beyond the per-route cap");
    }

    struct Inverter;
    impl Reranker for Inverter {
        fn score(&self, _: &str, texts: &[String]) -> Result<Vec<f64>, String> {
            Ok((0..texts.len()).map(|i| i as f64).collect())
        }
    }

    struct Sleeper;
    impl Reranker for Sleeper {
        fn score(&self, _: &str, _: &[String]) -> Result<Vec<f64>, String> {
            std::thread::sleep(Duration::from_millis(200));
            Ok(Vec::new())
        }
    }

    #[test]
    fn rerank_behaviours() {
        let store = kb(&[("a", "timeout alpha"), ("b", "timeout beta timeout")]);
        let q = RetrievalQuery { summary: "timeout".into(), trace: String::new(), rendered: String::new() };
        let fused = multi_route_recall(&q, &store, &routes_for(&[RouteKind::SparseSummary]), &RetrievalConfig::default()).unwrap();
        let ids = |r: &Reranked| r.candidates.iter().map(|c| c.chunk_id.clone()).collect::<Vec<_>>();
        let fused_ids: Vec<String> = fused.iter().map(|c| c.chunk_id.clone()).collect();

        let same = rerank(fused.clone(), "q", &store, Arc::new(PassthroughReranker), Duration::from_secs(5), 2);
        assert_eq!(ids(&same), fused_ids);
        assert!(!same.degraded);

        let inv = rerank(fused.clone(), "q", &store, Arc::new(Inverter), Duration::from_secs(5), 2);
        assert_eq!(ids(&inv), fused_ids.iter().rev().cloned().collect::<Vec<_>>());

        let slow = rerank(fused.clone(), "q", &store, Arc::new(Sleeper), Duration::from_millis(10), 2);
        assert!(slow.degraded);
        assert_eq!(slow.attempts, 3);
        assert_eq!(ids(&slow), fused_ids);
    }

    #[test]
    fn prompt_packs_rank_order_prefix() {
        let store = kb(&[("a", "short one"), ("b", &"long ".repeat(300)), ("c", "short two")]);
        let q = RetrievalQuery { summary: "s".into(), trace: "t".into(), rendered: String::new() };
        let cands: Vec<RetrievalCandidate> = (0..3)
            .map(|i| RetrievalCandidate {
                chunk_id: store.chunk(i).id.clone(),
                chunk: i,
                route: "x".into(),
                route_score: 0.0,
                fused_score: 0.0,
                rerank_score: None,
                hits: Vec::new(),
            })
            .collect();
        let r = report(&["cause"], &[(1, 1)]);
        let tools = ToolRegistry::default();
        let all = build_solution_prompt(&r, &q, &cands, &store, &tools, 10_000, &RegexTokenizer);
        assert_eq!(all.included, vec!["a#0", "b#0", "c#0"]);
        let some = build_solution_prompt(&r, &q, &cands, &store, &tools, 100, &RegexTokenizer);
        assert_eq!(some.included, vec!["a#0"]);
        let none = build_solution_prompt(&r, &q, &[], &store, &tools, 100, &RegexTokenizer);
        assert!(none.included.is_empty());
        assert!(none.user.contains("cause") && none.system.contains("retry_pipeline"));
    }

    #[test]
    fn dry_run_and_rejections() {
        let reg = ToolRegistry::default();
        let raw = r#"[{"tool":"retry_pipeline","arguments":{"run_id":"42"}},{"tool":"rm_rf","arguments":{}},{"tool":"clear_cache","arguments":{"cache_key":7}}]"#;
        let t = execute_plan(raw, &reg, &BTreeSet::new(), true).unwrap();
        assert_eq!(t.steps.len(), 3);
        assert_eq!(t.steps[0].status, StepStatus::DryRun);
        assert!(t.steps[0].detail.starts_with("would invoke retry_pipeline"));
        assert_eq!(t.steps[1].status, StepStatus::Rejected);
        assert_eq!(t.steps[2].status, StepStatus::Rejected);
        assert_eq!(t.plan.steps.len(), 1);
        assert!(matches!(execute_plan("not json", &reg, &BTreeSet::new(), true), Err(PlanError::Malformed(_))));
    }

    struct Failing;
    impl Tool for Failing {
        fn run(&self, _: &ToolSpec, _: &Map<String, Value>, _: bool) -> Result<String, String> {
            Err("exit status 1".into())
        }
    }

    struct Touch(std::path::PathBuf);
    impl Tool for Touch {
        fn run(&self, _: &ToolSpec, _: &Map<String, Value>, dry_run: bool) -> Result<String, String> {
            if dry_run {
                return Ok("would touch".into());
            }
            std::fs::write(&self.0, b"x").map_err(|e| e.to_string())?;
            Ok("touched".into())
        }
    }

    fn bare(name: &str) -> ToolSpec {
        ToolSpec { name: name.into(), description: String::new(), parameters: Vec::new(), dry_run_capable: true }
    }

    #[test]
    fn failing_step_does_not_stop_later_steps() {
        let dir = tempfile::tempdir().unwrap();
        let marker = dir.path().join("touched");
        let mut reg = ToolRegistry::new();
        reg.register(bare("fail"), Box::new(Failing)).unwrap();
        reg.register(bare("touch"), Box::new(Touch(marker.clone()))).unwrap();
        let raw = r#"{"explanation":"e","citations":["kb#0","zzz#0"],"tool_calls":[{"tool":"fail","arguments":{}},{"tool":"touch","arguments":{}}]}"#;
        let allowed: BTreeSet<String> = ["kb#0".to_string()].into_iter().collect();

        let t = execute_plan(raw, &reg, &allowed, true).unwrap();
        assert_eq!(t.steps[0].status, StepStatus::Failed);
        assert_eq!(t.steps[1].status, StepStatus::DryRun);
        assert!(!marker.exists());
        assert_eq!(t.plan.citations, vec!["kb#0"]);

        let t = execute_plan(raw, &reg, &allowed, false).unwrap();
        assert_eq!(t.steps[1].status, StepStatus::Executed);
        assert!(marker.exists());
    }

    #[test]
    fn end_to_end_with_mock() {
        let store = kb(&[("flaky-network", "connection refused broker retry the pipeline"), ("other", "unrelated text about docs")]);
        let ex = excerpt(&["setup", "error: connection refused by broker"]);
        let r = report(&["broker connection refused"], &[(2, 2)]);
        let tools = ToolRegistry::default();
        let inputs = SolutionInputs { report: &r, excerpt: &ex, store: &store, tools: &tools, reranker: Arc::new(PassthroughReranker) };
        let run = run_solution(&inputs, &RunConfig::default(), &llm::HeuristicBackend::default(), &RegexTokenizer, true).unwrap();
        assert_eq!(run.transcript.plan.citations, vec!["flaky-network#0"]);
        assert_eq!(run.transcript.steps[0].status, StepStatus::DryRun);
        assert_eq!(run.cost.query_rounds, 1);
    }

    proptest! {
        #[test]
        fn query_never_exceeds_limit(
            causes in proptest::collection::vec("[a-z ]{1,40}", 1..4),
            lines in proptest::collection::vec("[a-z0-9 .:]{0,120}", 1..200),
            limit in 20usize..400,
        ) {
            let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            let ex = excerpt(&refs);
            let causes: Vec<&str> = causes.iter().map(String::as_str).collect();
            let r = report(&causes, &[(1, lines.len())]);
            let cfg = RetrievalConfig { query_token_limit: limit, ..Default::default() };
            let q = build_query(&r, &ex, &cfg, &RegexTokenizer);
            prop_assert!(RegexTokenizer.count(&q.rendered) <= limit);
            let kept: Vec<&str> = q.trace.lines().collect();
            for i in 0..kept.len() {
                for j in 0..i {
                    prop_assert!(token_overlap(kept[j], kept[i]) < 0.8);
                }
            }
        }
    }
}
