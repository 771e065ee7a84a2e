//! Stage 1: root-cause analysis.
//!
//! [`select_context`] runs filtering and pruning over a failed log,
//! [`build_rca_prompt`] wraps the surviving blocks in the analysis prompt,
//! and [`run_rca`] queries the model and validates its JSON report,
//! re-asking with a corrective message when the reply does not parse.

use std::collections::BTreeSet;
use std::fmt;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::drain::TemplateStore;
use crate::eval::CostRecord;
use crate::filter::{self, CandidatePool, FilterConfig};
use crate::ingest::{LogLine, RawLog, Tokenizer};
use crate::llm::{self, ChatMessage, LlmBackend, LlmError, LOGS_CLOSE, LOGS_OPEN, RCA_TASK_TAG};
use crate::pruner::{self, Excerpt, TruncatedBlock};
use crate::Density;

/// Inclusive 1-based line range, written as `[a]` or `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LineRange {
    pub start: usize,
    pub end: usize,
}

impl LineRange {
    pub fn new(start: usize, end: usize) -> Self {
        LineRange { start, end }
    }

    pub fn single(line: usize) -> Self {
        LineRange { start: line, end: line }
    }

    pub fn is_valid(&self, log_len: usize) -> bool {
        1 <= self.start && self.start <= self.end && self.end <= log_len
    }

    pub fn lines(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

impl fmt::Display for LineRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.start == self.end {
            write!(f, "[{}]", self.start)
        } else {
            write!(f, "[{}, {}]", self.start, self.end)
        }
    }
}

impl Serialize for LineRange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.start == self.end {
            let mut seq = s.serialize_seq(Some(1))?;
            seq.serialize_element(&self.start)?;
            seq.end()
        } else {
            let mut seq = s.serialize_seq(Some(2))?;
            seq.serialize_element(&self.start)?;
            seq.serialize_element(&self.end)?;
            seq.end()
        }
    }
}

impl<'de> Deserialize<'de> for LineRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct RangeVisitor;
        impl<'de> Visitor<'de> for RangeVisitor {
            type Value = LineRange;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a line range [a] or [a, b]")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<LineRange, A::Error> {
                let start: usize = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let end: usize = seq.next_element()?.unwrap_or(start);
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                Ok(LineRange { start, end })
            }
        }
        d.deserialize_seq(RangeVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogAnalysis {
    pub error_logs: Vec<LineRange>,
    pub analysis: String,
}

/// Structured analysis returned by the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RcaReport {
    pub log_analysis: Vec<LogAnalysis>,
    pub root_cause: Vec<String>,
}

impl RcaReport {
    /// Union of all reported ranges.
    pub fn predicted_lines(&self) -> BTreeSet<usize> {
        self.ranges().flat_map(|r| r.lines()).collect()
    }

    pub fn ranges(&self) -> impl Iterator<Item = &LineRange> {
        self.log_analysis.iter().flat_map(|a| a.error_logs.iter())
    }

    /// A report that points at no lines counts as no output.
    pub fn is_empty(&self) -> bool {
        self.ranges().next().is_none()
    }

    pub fn validate(&self, log_len: usize) -> Result<(), ReportError> {
        if self.root_cause.is_empty() || self.root_cause.iter().any(|c| c.trim().is_empty()) {
            return Err(ReportError::Schema("root_cause must hold at least one non-empty string".into()));
        }
        if self.log_analysis.iter().any(|a| a.analysis.trim().is_empty()) {
            return Err(ReportError::Schema("analysis strings must be non-empty".into()));
        }
        if let Some(bad) = self.ranges().find(|r| !r.is_valid(log_len)) {
            return Err(ReportError::Validation { range: *bad, log_len });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("report does not match the schema: {0}")]
    Schema(String),
    #[error("range {range} is outside lines 1..={log_len}")]
    Validation { range: LineRange, log_len: usize },
}

/// Removes the first fenced code block's fences, if any.
pub(crate) fn strip_fences(raw: &str) -> &str {
    let Some(open) = raw.find("```") else {
        return raw;
    };
    let after = &raw[open + 3..];
    let body = match after.find('\n') {
        Some(nl) => &after[nl + 1..],
        None => after,
    };
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

/// Parses and validates a model reply. Code fences and prose before the
/// JSON object are tolerated; trailing text after the object is ignored.
pub fn parse_report(raw: &str, log_len: usize) -> Result<RcaReport, ReportError> {
    let text = strip_fences(raw);
    let start = text
        .find('{')
        .ok_or_else(|| ReportError::Parse("no JSON object found".into()))?;
    let value = serde_json::Deserializer::from_str(&text[start..])
        .into_iter::<serde_json::Value>()
        .next()
        .ok_or_else(|| ReportError::Parse("no JSON object found".into()))?
        .map_err(|e| ReportError::Parse(e.to_string()))?;
    let report: RcaReport =
        serde_json::from_value(value).map_err(|e| ReportError::Schema(e.to_string()))?;
    report.validate(log_len)?;
    Ok(report)
}

/// One worked example: a rendered excerpt and the expected JSON reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub input: String,
    pub output: String,
}

/// Bundled exemplars used when no pool is supplied.
pub fn default_few_shots() -> Vec<FewShot> {
    let shot = |input: &str, output: serde_json::Value| FewShot {
        input: input.to_string(),
        output: output.to_string(),
    };
    vec![
        shot(
            "118\t=== RUN   TestQueuePublish\n119\t    queue_test.go:42: publish: dial tcp 127.0.0.1:4150: connect: connection refused\n120\t--- FAIL: TestQueuePublish (0.31s)\n...\n164\tFAIL\tgithub.com/acme/queue\t0.412s\n",
            serde_json::json!({
                "log_analysis": [{
                    "error_logs": [[119, 120], [164]],
                    "analysis": "TestQueuePublish could not reach the broker on 127.0.0.1:4150, so the package test run failed."
                }],
                "root_cause": ["Unit test failure: message broker not reachable from the test"]
            }),
        ),
        shot(
            "57\t[INFO] Compiling 84 source files to /build/target/classes\n58\t[ERROR] /build/src/main/java/com/acme/Order.java:[31,8] cannot find symbol\n59\t[ERROR]   symbol:   class LineItem\n...\n90\t[ERROR] BUILD FAILURE\n",
            serde_json::json!({
                "log_analysis": [{
                    "error_logs": [[58, 59], [90]],
                    "analysis": "Order.java references class LineItem, which does not exist on the compile classpath."
                }],
                "root_cause": ["Compilation error: missing class LineItem"]
            }),
        ),
        shot(
            "203\tnpm ERR! code ERESOLVE\n204\tnpm ERR! ERESOLVE unable to resolve dependency tree\n205\tnpm ERR! Found: react@18.2.0\n206\tnpm ERR! Could not resolve dependency: peer react@\"^17.0.0\" from legacy-ui@2.1.4\n",
            serde_json::json!({
                "log_analysis": [{
                    "error_logs": [[203, 206]],
                    "analysis": "legacy-ui 2.1.4 requires react 17 as a peer while the project pins react 18."
                }],
                "root_cause": ["Dependency conflict: peer dependency on react 17"]
            }),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub few_shot_count: usize,
    /// Tokens allowed on top of the payload for instructions and examples.
    pub overhead_budget: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            few_shot_count: 2,
            overhead_budget: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("no log blocks to analyze")]
    EmptyBlocks,
    #[error("payload of {payload_tokens} tokens exceeds the limit of {limit}")]
    PayloadOverBudget { payload_tokens: usize, limit: usize },
    #[error("rendered prompt of {tokens} tokens exceeds {limit} (payload limit plus overhead)")]
    PromptOverBudget { tokens: usize, limit: usize },
}

pub const RCA_OUTPUT_SCHEMA: &str = r#"{
  "log_analysis": [
    {
      "error_logs": [[<first line>, <last line>], [<single line>]],
      "analysis": "<what these lines show and why they matter>"
    }
  ],
  "root_cause": ["<concise root cause>", "..."]
}"#;

fn rca_system_prompt() -> String {
    format!(
        "{RCA_TASK_TAG}\n\
You are a senior CI/CD reliability engineer triaging a failed pipeline run.\n\
You are given blocks of the failed run's log. Each line is prefixed with its original line number and a tab; \
`...` separates non-adjacent blocks.\n\
\n\
Work step by step:\n\
1. Read every block and find the lines that directly report the failure (failed tests, compiler errors, \
non-zero exits, missing dependencies, timeouts).\n\
2. Separate the lines that caused the failure from noise such as retried warnings or expected errors.\n\
3. Explain what the failing lines show.\n\
4. State the underlying root cause in plain language.\n\
\n\
Rules:\n\
- Quote only line numbers that appear in the provided blocks.\n\
- Use [n] for a single line and [first, last] for a contiguous span.\n\
- Reply with a single JSON object and nothing else, following this schema:\n\
{RCA_OUTPUT_SCHEMA}\n"
    )
}

fn wrap_logs(body: &str) -> String {
    format!("Analyze the following failed CI log blocks.\n{LOGS_OPEN}\n{body}{LOGS_CLOSE}")
}

/// A fully assembled root-cause prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RcaPrompt {
    pub system: String,
    pub few_shots: Vec<FewShot>,
    /// Rendered block stanzas.
    pub payload: String,
    pub output_schema: String,
}

impl RcaPrompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = vec![ChatMessage::system(&self.system)];
        for shot in &self.few_shots {
            out.push(ChatMessage::user(wrap_logs(&shot.input)));
            out.push(ChatMessage::assistant(&shot.output));
        }
        out.push(ChatMessage::user(wrap_logs(&self.payload)));
        out
    }

    pub fn token_count(&self, tok: &dyn Tokenizer) -> usize {
        self.messages().iter().map(|m| tok.count(&m.content)).sum()
    }

    /// Plain-text transcript of the messages, for inspection.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in self.messages() {
            let role = match m.role {
                llm::Role::System => "system",
                llm::Role::User => "user",
                llm::Role::Assistant => "assistant",
            };
            out.push_str(&format!("### {role}\n{}\n\n", m.content));
        }
        out
    }
}

/// Picks `count` consecutive exemplars, starting at a position derived
/// from a hash of `task_key` and wrapping around the pool.
pub fn pick_few_shots<'a>(pool: &'a [FewShot], count: usize, task_key: &str) -> Vec<&'a FewShot> {
    if pool.is_empty() || count == 0 {
        return Vec::new();
    }
    let digest = Sha256::digest(task_key.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    let start = (u64::from_le_bytes(head) % pool.len() as u64) as usize;
    (0..count.min(pool.len()))
        .map(|i| &pool[(start + i) % pool.len()])
        .collect()
}

pub fn build_rca_prompt(
    excerpt: &Excerpt,
    few_shot_pool: &[FewShot],
    task_key: &str,
    token_limit: usize,
    cfg: &PromptConfig,
    tok: &dyn Tokenizer,
) -> Result<RcaPrompt, PromptError> {
    if excerpt.is_empty() {
        return Err(PromptError::EmptyBlocks);
    }
    let payload_tokens = excerpt.token_count(tok);
    if payload_tokens > token_limit {
        return Err(PromptError::PayloadOverBudget {
            payload_tokens,
            limit: token_limit,
        });
    }
    let prompt = RcaPrompt {
        system: rca_system_prompt(),
        few_shots: pick_few_shots(few_shot_pool, cfg.few_shot_count, task_key)
            .into_iter()
            .cloned()
            .collect(),
        payload: excerpt.render(),
        output_schema: RCA_OUTPUT_SCHEMA.to_string(),
    };
    let tokens = prompt.token_count(tok);
    let limit = token_limit + cfg.overhead_budget;
    if tokens > limit {
        return Err(PromptError::PromptOverBudget { tokens, limit });
    }
    Ok(prompt)
}

/// Pipeline stages that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Every line enters the candidate pool.
    pub no_filter: bool,
    /// No context lines are pulled in around key lines.
    pub no_expansion: bool,
    /// Blocks are taken in line order from the end of the log instead of
    /// by density.
    pub no_pruning: bool,
}

/// What stage 1 decided to show the model.
#[derive(Debug, Clone, Serialize)]
pub struct Context {
    pub pool_size: usize,
    pub theta: Option<u32>,
    pub candidate_blocks: usize,
    pub selected: Vec<(usize, usize)>,
    pub truncated: Option<TruncatedBlock>,
    pub payload_tokens: usize,
    #[serde(skip)]
    pub excerpt: Excerpt,
}

impl Context {
    pub fn contains(&self, line: usize) -> bool {
        self.selected.iter().any(|&(s, e)| (s..=e).contains(&line))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RcaError {
    #[error("failed log is empty")]
    EmptyLog,
    #[error("no candidate lines survived filtering")]
    NoCandidates,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no valid report after {attempts} query rounds; last problem: {last}")]
    InvalidOutput { attempts: usize, last: ReportError },
}

/// Keeps the last lines of `lines` whose per-line cost fits `limit` and
/// regroups them into contiguous ranges.
fn tail_ranges(lines: &[LogLine], limit: usize, tok: &dyn Tokenizer) -> Vec<(usize, usize)> {
    let mut used = 0;
    let mut kept = Vec::new();
    for line in lines.iter().rev() {
        let cost = pruner::line_cost(&line.text, tok);
        if used + cost > limit {
            break;
        }
        used += cost;
        kept.push(line.number);
    }
    kept.reverse();
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    for n in kept {
        match ranges.last_mut() {
            Some(r) if r.1 + 1 == n => r.1 = n,
            _ => ranges.push((n, n)),
        }
    }
    ranges
}

/// Filtering and pruning: chooses the blocks for the prompt.
pub fn select_context(
    failed: &RawLog,
    store: &TemplateStore,
    cfg: &RunConfig,
    tok: &dyn Tokenizer,
) -> Result<Context, RcaError> {
    if failed.is_empty() {
        return Err(RcaError::EmptyLog);
    }
    let ablation = cfg.ablation;
    let pool = if ablation.no_filter {
        CandidatePool::all(failed.len())
    } else {
        filter::filter(failed, store, &cfg.drain, &cfg.filter)
    };
    if pool.is_empty() {
        return Err(RcaError::NoCandidates);
    }

    let limit = cfg.pruner.token_limit;
    let ctx = if ablation.no_pruning {
        let filter_cfg = if ablation.no_expansion {
            FilterConfig { m: 0, n: 0, ..cfg.filter.clone() }
        } else {
            cfg.filter.clone()
        };
        let blocks = filter::expand(&pool, failed.len(), &filter_cfg);
        let lines: Vec<LogLine> = blocks
            .iter()
            .flat_map(|b| failed.lines()[b.start - 1..b.end].iter().cloned())
            .collect();
        let selected = tail_ranges(&lines, limit, tok);
        let excerpt = Excerpt::from_ranges(&selected, failed);
        Context {
            pool_size: pool.len(),
            theta: None,
            candidate_blocks: blocks.len(),
            selected,
            truncated: None,
            payload_tokens: excerpt.token_count(tok),
            excerpt,
        }
    } else {
        let outcome = pruner::prune::<Density>(
            failed,
            &pool,
            &cfg.filter.keywords,
            &cfg.pruner,
            tok,
            !ablation.no_expansion,
        );
        let excerpt = Excerpt::from_selection(&outcome.selection, failed);
        Context {
            pool_size: pool.len(),
            theta: outcome.theta,
            candidate_blocks: outcome.blocks.len(),
            selected: outcome.selection.blocks.iter().map(|b| (b.start, b.end)).collect(),
            truncated: outcome.selection.truncated,
            payload_tokens: outcome.selection.total_tokens(),
            excerpt,
        }
    };
    if ctx.excerpt.is_empty() {
        return Err(RcaError::NoCandidates);
    }
    Ok(ctx)
}

#[derive(Debug, Clone)]
pub struct RcaRun {
    pub report: RcaReport,
    pub cost: CostRecord,
    pub context: Context,
    pub prompt: RcaPrompt,
}

#[derive(Debug, Clone)]
pub struct RcaFailure {
    pub error: RcaError,
    pub cost: CostRecord,
    pub context: Option<Context>,
}

impl fmt::Display for RcaFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RcaFailure {}

fn corrective_message(err: &ReportError) -> String {
    format!(
        "Your previous reply was rejected: {err}.\n\
Reply again with only a JSON object that follows this schema, quoting line numbers from the provided blocks:\n\
{RCA_OUTPUT_SCHEMA}"
    )
}

/// Queries the model with an assembled prompt until a valid report comes
/// back or the round budget is spent.
pub fn query_report(
    prompt: &RcaPrompt,
    log_len: usize,
    backend: &dyn LlmBackend,
    cfg: &RunConfig,
    tok: &dyn Tokenizer,
    cost: &mut CostRecord,
) -> Result<RcaReport, RcaError> {
    let max = cfg.llm.max_attempts();
    let mut messages = prompt.messages();
    loop {
        let request = cfg.llm.request(messages.clone());
        let remaining = max.saturating_sub(cost.query_rounds).max(1);
        let raw = llm::invoke_with_budget(backend, &request, remaining, tok, cost)?;
        match parse_report(&raw, log_len) {
            Ok(report) => return Ok(report),
            Err(e) => {
                log::warn!("round {}: {e}", cost.query_rounds);
                if cost.query_rounds >= max {
                    return Err(RcaError::InvalidOutput {
                        attempts: cost.query_rounds,
                        last: e,
                    });
                }
                messages.push(ChatMessage::assistant(raw));
                messages.push(ChatMessage::user(corrective_message(&e)));
            }
        }
    }
}

/// Stage 1 end to end: filter, prune, prompt, query, parse.
pub fn run_rca(
    failed: &RawLog,
    store: &TemplateStore,
    cfg: &RunConfig,
    few_shot_pool: &[FewShot],
    backend: &dyn LlmBackend,
    tok: &dyn Tokenizer,
) -> Result<RcaRun, RcaFailure> {
    let mut cost = CostRecord::new(&failed.run_id);
    let fail = |error, cost: CostRecord, context| RcaFailure { error, cost, context };
    let context = match select_context(failed, store, cfg, tok) {
        Ok(c) => c,
        Err(e) => return Err(fail(e, cost, None)),
    };
    let prompt = match build_rca_prompt(
        &context.excerpt,
        few_shot_pool,
        &failed.task_key,
        cfg.pruner.token_limit,
        &cfg.prompt,
        tok,
    ) {
        Ok(p) => p,
        Err(e) => return Err(fail(e.into(), cost, Some(context))),
    };
    match query_report(&prompt, failed.len(), backend, cfg, tok, &mut cost) {
        Ok(report) => Ok(RcaRun {
            report,
            cost,
            context,
            prompt,
        }),
        Err(e) => Err(fail(e, cost, Some(context))),
    }
}
