//! Key log filtering and key log expansion.
//!
//! Three strategies feed one candidate pool: keyword matching, log tail
//! prioritization, and log diff against the task's success-run templates.
//! Lines with identical text are then deduplicated, keeping the occurrence
//! nearest the end of the file. Surviving key lines are expanded into
//! merged context blocks.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::drain::{DrainConfig, DrainTree, TemplateStore};
use crate::ingest::RawLog;

/// Failure keywords mined from historical CI failures. Matching is a
/// case-insensitive substring test; `"err "` keeps its trailing space.
pub const DEFAULT_KEYWORDS: [&str; 14] = [
    "fatal",
    "fail",
    "panic",
    "error",
    "exit",
    "kill",
    "no such file",
    "err:",
    "err!",
    "failures:",
    "err ",
    "missing",
    "exception",
    "cannot",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct KeywordSet {
    patterns: Vec<String>,
}

impl KeywordSet {
    /// Patterns are lowercased; empty input falls back to the defaults.
    pub fn new<I, S>(patterns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let patterns: Vec<String> = patterns
            .into_iter()
            .map(|p| p.as_ref().to_lowercase())
            .filter(|p| !p.is_empty())
            .collect();
        if patterns.is_empty() {
            Self::default()
        } else {
            KeywordSet { patterns }
        }
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn matches(&self, line: &str) -> bool {
        let lower = line.to_lowercase();
        self.patterns.iter().any(|p| lower.contains(p.as_str()))
    }
}

impl From<Vec<String>> for KeywordSet {
    fn from(patterns: Vec<String>) -> Self {
        KeywordSet::new(patterns)
    }
}

impl From<KeywordSet> for Vec<String> {
    fn from(set: KeywordSet) -> Self {
        set.patterns
    }
}

impl Default for KeywordSet {
    fn default() -> Self {
        KeywordSet {
            patterns: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub keywords: KeywordSet,
    pub tail_fraction: f64,
    pub tail_min_lines: usize,
    /// Context lines before each key line.
    pub m: usize,
    /// Context lines after each key line.
    pub n: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            keywords: KeywordSet::default(),
            tail_fraction: 0.05,
            tail_min_lines: 50,
            m: 4,
            n: 6,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(format!("tail_fraction {} not in (0, 1]", self.tail_fraction));
        }
        if self.tail_min_lines == 0 {
            return Err("tail_min_lines must be positive".into());
        }
        if self.n <= self.m {
            return Err(format!(
                "expansion must be asymmetric with n > m (got m={}, n={})",
                self.m, self.n
            ));
        }
        Ok(())
    }
}

/// Which strategies put a line in the pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub keyword: bool,
    pub tail: bool,
    pub diff: bool,
}

impl Provenance {
    fn merge(&mut self, other: Provenance) {
        self.keyword |= other.keyword;
        self.tail |= other.tail;
        self.diff |= other.diff;
    }

    pub fn any(&self) -> bool {
        self.keyword || self.tail || self.diff
    }
}

/// Line numbers that survived filtering, each with merged provenance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CandidatePool {
    entries: BTreeMap<usize, Provenance>,
}

impl CandidatePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every line of a `log_len`-line log, as if all strategies fired.
    pub fn all(log_len: usize) -> Self {
        let flags = Provenance {
            keyword: false,
            tail: false,
            diff: true,
        };
        CandidatePool {
            entries: (1..=log_len).map(|i| (i, flags)).collect(),
        }
    }

    pub fn insert(&mut self, line: usize, flags: Provenance) {
        self.entries.entry(line).or_default().merge(flags);
    }

    pub fn contains(&self, line: usize) -> bool {
        self.entries.contains_key(&line)
    }

    pub fn provenance(&self, line: usize) -> Option<Provenance> {
        self.entries.get(&line).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Line numbers in ascending order.
    pub fn lines(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Provenance)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    /// `(line number, text)` pairs for downstream consumers.
    pub fn pairs<'a>(&'a self, log: &'a RawLog) -> impl Iterator<Item = (usize, &'a str)> + 'a {
        self.lines()
            .filter_map(move |n| log.line(n).map(|t| (n, t)))
    }

    /// Keeps, for each distinct text, only the occurrence nearest the end.
    /// Flags of dropped duplicates are merged into the survivor.
    pub fn dedup_by_text(&mut self, log: &RawLog) {
        let mut survivor: HashMap<&str, usize> = HashMap::new();
        for &line in self.entries.keys() {
            if let Some(text) = log.line(line) {
                survivor.insert(text, line);
            }
        }
        let mut merged: BTreeMap<usize, Provenance> = BTreeMap::new();
        for (&line, &flags) in &self.entries {
            let keep = log
                .line(line)
                .and_then(|t| survivor.get(t).copied())
                .unwrap_or(line);
            merged.entry(keep).or_default().merge(flags);
        }
        self.entries = merged;
    }
}

/// Whether a 1-based `position` falls in the last
/// `max(tail_min_lines, ceil(tail_fraction * total))` lines.
pub fn is_in_log_tail(position: usize, total: usize, cfg: &FilterConfig) -> bool {
    let by_fraction = (cfg.tail_fraction * total as f64).ceil() as usize;
    let tail = cfg.tail_min_lines.max(by_fraction);
    position > total.saturating_sub(tail)
}

/// Runs the three strategies over the failed log and deduplicates.
/// An empty store makes the diff strategy admit every line.
pub fn filter(
    failed: &RawLog,
    store: &TemplateStore,
    drain_cfg: &DrainConfig,
    cfg: &FilterConfig,
) -> CandidatePool {
    let matcher = store.matcher(drain_cfg);
    filter_with_matcher(failed, store, &matcher, cfg)
}

/// As [`filter`], reusing a prebuilt matcher over `store`.
pub fn filter_with_matcher(
    failed: &RawLog,
    store: &TemplateStore,
    matcher: &DrainTree,
    cfg: &FilterConfig,
) -> CandidatePool {
    let total = failed.len();
    let mut pool = CandidatePool::new();
    for line in failed.lines() {
        let flags = Provenance {
            keyword: cfg.keywords.matches(&line.text),
            tail: is_in_log_tail(line.number, total, cfg),
            diff: !store.contains(&matcher.match_line(&line.text)),
        };
        if flags.any() {
            pool.insert(line.number, flags);
        }
    }
    pool.dedup_by_text(failed);
    pool
}

/// A contiguous inclusive line range around one or more key lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogBlock {
    pub start: usize,
    pub end: usize,
    pub key_lines: Vec<usize>,
}

impl LogBlock {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, line: usize) -> bool {
        (self.start..=self.end).contains(&line)
    }
}

/// Expands each key line to `[i - m, i + n]` (clamped) and merges
/// overlapping or adjacent ranges.
pub fn expand(pool: &CandidatePool, log_len: usize, cfg: &FilterConfig) -> Vec<LogBlock> {
    let mut blocks: Vec<LogBlock> = Vec::new();
    for key in pool.lines().filter(|&i| i >= 1 && i <= log_len) {
        let start = key.saturating_sub(cfg.m).max(1);
        let end = (key + cfg.n).min(log_len);
        match blocks.last_mut() {
            Some(last) if start <= last.end + 1 => {
                last.end = last.end.max(end);
                last.key_lines.push(key);
            }
            _ => blocks.push(LogBlock {
                start,
                end,
                key_lines: vec![key],
            }),
        }
    }
    blocks
}
