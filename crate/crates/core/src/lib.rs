//! Failure triage for CI/CD pipeline logs.
//!
//! Stage 1 narrows a failed run's log to the blocks most likely to explain
//! the failure and asks a language model for a structured root-cause
//! report. Stage 2 retrieves remediation knowledge for that report and
//! turns the model's answer into validated, dry-run-by-default tool calls.

pub mod config;
pub mod drain;
pub mod eval;
pub mod filter;
pub mod ingest;
pub mod knowledge;
pub mod llm;
pub mod pruner;
pub mod rca;
pub mod scalar;
pub mod solution;
pub mod synth;

use num_rational::Ratio;

pub use config::RunConfig;
pub use drain::{DrainConfig, DrainTree, LogTemplate, TemplateStore};
pub use eval::{CostRecord, EvalOutcome, Verdict};
pub use filter::{CandidatePool, FilterConfig, KeywordSet, LogBlock};
pub use ingest::{LogLine, Outcome, RawLog, RegexTokenizer, Tokenizer};
pub use knowledge::{KnowledgeDoc, KnowledgeStore};
pub use llm::{LlmBackend, LlmConfig};
pub use pruner::{Excerpt, PrunerConfig, WeightVector};
pub use rca::{RcaReport, ReportError};
pub use scalar::Scalar;
pub use solution::{RetrievalQuery, SolutionPlan, ToolRegistry};

/// Exact block density, so that equal densities compare equal.
pub type Density = Ratio<i64>;
pub type ScoredBlock = pruner::ScoredBlock<Density>;
pub type ScoredBlockF64 = pruner::ScoredBlock<f64>;
pub type ScoredBlockF32 = pruner::ScoredBlock<f32>;
pub type Selection = pruner::Selection<Density>;
pub type Metrics = eval::Metrics<f64>;
pub type ExactMetrics = eval::Metrics<Ratio<i64>>;
pub type CostSummary = eval::CostSummary<f64>;
pub type Hit = knowledge::Hit<f64>;
