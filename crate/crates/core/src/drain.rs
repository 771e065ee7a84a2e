//! Structural template mining over success logs, and the per-task store of
//! templates from the most recent successful runs.
//!
//! The parser is a fixed-depth prefix tree in the style of Drain: lines are
//! bucketed by token count, then by their first `tree_depth - 2` tokens, and
//! matched against the clusters in the leaf by positional similarity.
//! Numbers, hex strings and UUID-shaped tokens are masked before insertion.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RawLog;

pub const WILDCARD: &str = "<*>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrainConfig {
    pub tree_depth: usize,
    pub similarity_threshold: f64,
    pub max_children: usize,
}

impl Default for DrainConfig {
    fn default() -> Self {
        DrainConfig {
            tree_depth: 4,
            similarity_threshold: 0.4,
            max_children: 100,
        }
    }
}

impl DrainConfig {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.tree_depth < 3 {
            return Err(StoreError::Config("tree_depth must be >= 3".into()));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold < 1.0) {
            return Err(StoreError::Config(
                "similarity_threshold must be in (0, 1)".into(),
            ));
        }
        if self.max_children == 0 {
            return Err(StoreError::Config("max_children must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Wildcard,
    Token(String),
}

impl Slot {
    fn as_str(&self) -> &str {
        match self {
            Slot::Wildcard => WILDCARD,
            Slot::Token(t) => t,
        }
    }
}

/// A mined template. Identity and ordering follow the canonical string.
#[derive(Debug, Clone)]
pub struct LogTemplate {
    tokens: Vec<Slot>,
    canonical: String,
}

impl LogTemplate {
    fn from_slots(tokens: Vec<Slot>) -> Self {
        debug_assert!(!tokens.is_empty());
        let canonical = tokens
            .iter()
            .map(Slot::as_str)
            .collect::<Vec<_>>()
            .join(" ");
        LogTemplate { tokens, canonical }
    }

    /// Parses a canonical string; `<*>` becomes a wildcard slot.
    pub fn parse(canonical: &str) -> Self {
        let slots: Vec<Slot> = canonical
            .split_whitespace()
            .map(|t| {
                if t == WILDCARD {
                    Slot::Wildcard
                } else {
                    Slot::Token(t.to_string())
                }
            })
            .collect();
        if slots.is_empty() {
            Self::blank()
        } else {
            Self::from_slots(slots)
        }
    }

    /// Reserved template for whitespace-only lines.
    pub fn blank() -> Self {
        Self::from_slots(vec![Slot::Wildcard])
    }

    pub fn tokens(&self) -> &[Slot] {
        &self.tokens
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

}

impl PartialEq for LogTemplate {
    fn eq(&self, other: &Self) -> bool {
        self.canonical == other.canonical
    }
}
impl Eq for LogTemplate {}
impl std::hash::Hash for LogTemplate {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.canonical.hash(state)
    }
}
impl PartialOrd for LogTemplate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for LogTemplate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.canonical.cmp(&other.canonical)
    }
}

impl fmt::Display for LogTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

fn variable_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"^[(\[{<'\x22]*(?:",
            // uuid
            r"[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}",
            // 0x-prefixed hex
            r"|0[xX][0-9a-fA-F]+",
            // numbers, timestamps, durations, sizes, ratios
            r"|[-+]?[0-9][0-9.,:/_\-T]*(?:[a-zA-Zµ%]{1,3})?",
            r")[)\]}>'\x22,;:.]*$"
        ))
        .expect("valid regex")
    })
}

/// Tokenizes a line for mining, masking variable-looking tokens.
pub fn premask(line: &str) -> Vec<Slot> {
    let re = variable_token_re();
    line.split_whitespace()
        .map(|t| {
            if re.is_match(t) || is_hex_id(t) {
                Slot::Wildcard
            } else {
                Slot::Token(t.to_string())
            }
        })
        .collect()
}

/// Bare lowercase hex of length >= 7 containing a digit (commit shas, digests).
fn is_hex_id(token: &str) -> bool {
    let t = token.trim_matches(|c: char| !c.is_ascii_alphanumeric());
    t.len() >= 7
        && t.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        && has_digit(t)
}

fn has_digit(s: &str) -> bool {
    s.bytes().any(|b| b.is_ascii_digit())
}

#[derive(Debug, Default)]
struct Node {
    children: HashMap<String, Node>,
    clusters: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Cluster {
    slots: Vec<Slot>,
}

impl Cluster {
    /// Fraction of positions where template and line agree exactly.
    fn similarity(&self, line: &[Slot]) -> f64 {
        let same = self
            .slots
            .iter()
            .zip(line)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.slots.len() as f64
    }

    /// True when the template already generalizes `line`.
    fn conforms(&self, line: &[Slot]) -> bool {
        self.slots
            .iter()
            .zip(line)
            .all(|(a, b)| *a == Slot::Wildcard || a == b)
    }

    fn merged(&self, line: &[Slot]) -> Vec<Slot> {
        self.slots
            .iter()
            .zip(line)
            .map(|(a, b)| if a == b { a.clone() } else { Slot::Wildcard })
            .collect()
    }
}

/// Fixed-depth parse tree. Used both for mining a log and for matching
/// failed-log lines against a store's templates.
#[derive(Debug)]
pub struct DrainTree {
    cfg: DrainConfig,
    root: HashMap<usize, Node>,
    clusters: Vec<Cluster>,
    has_blank: bool,
}

impl DrainTree {
    pub fn new(cfg: DrainConfig) -> Self {
        DrainTree {
            cfg,
            root: HashMap::new(),
            clusters: Vec::new(),
            has_blank: false,
        }
    }

    /// Seeds a tree with existing templates, each becoming one cluster.
    pub fn from_templates<'a, I>(cfg: DrainConfig, templates: I) -> Self
    where
        I: IntoIterator<Item = &'a LogTemplate>,
    {
        let mut tree = DrainTree::new(cfg);
        for t in templates {
            let slots = t.tokens().to_vec();
            let id = tree.clusters.len();
            tree.clusters.push(Cluster {
                slots: slots.clone(),
            });
            tree.leaf_mut(&slots).clusters.push(id);
        }
        tree
    }

    fn prefix_len(&self) -> usize {
        self.cfg.tree_depth - 2
    }

    fn leaf_mut(&mut self, slots: &[Slot]) -> &mut Node {
        let depth = self.prefix_len().min(slots.len());
        let max_children = self.cfg.max_children;
        let mut node = self.root.entry(slots.len()).or_default();
        for slot in &slots[..depth] {
            let key = match slot {
                Slot::Token(t) if !has_digit(t) => {
                    if node.children.contains_key(t.as_str())
                        || node.children.len() < max_children
                    {
                        t.clone()
                    } else {
                        WILDCARD.to_string()
                    }
                }
                _ => WILDCARD.to_string(),
            };
            node = node.children.entry(key).or_default();
        }
        node
    }

    /// Clusters reachable for `slots`, following both the concrete and the
    /// wildcard branch at each prefix level.
    fn candidates(&self, slots: &[Slot]) -> Vec<usize> {
        let depth = self.prefix_len().min(slots.len());
        let mut frontier: Vec<&Node> = self.root.get(&slots.len()).into_iter().collect();
        for slot in &slots[..depth] {
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for node in frontier {
                if let Slot::Token(t) = slot {
                    if !has_digit(t) {
                        next.extend(node.children.get(t.as_str()));
                    }
                }
                next.extend(node.children.get(WILDCARD));
            }
            frontier = next;
        }
        let mut ids: Vec<usize> = frontier.iter().flat_map(|n| n.clusters.iter().copied()).collect();
        ids.sort_unstable();
        ids
    }

    /// Picks the cluster a line should join among `ids`: a conforming
    /// cluster if any, else the most similar one at or above the threshold.
    fn best_match(&self, slots: &[Slot], ids: &[usize]) -> Option<usize> {
        let mut conforming: Option<(usize, f64)> = None;
        let mut similar: Option<(usize, f64)> = None;
        for &id in ids {
            let c = &self.clusters[id];
            let sim = c.similarity(slots);
            if c.conforms(slots) {
                if conforming.map_or(true, |(_, s)| sim > s) {
                    conforming = Some((id, sim));
                }
            } else if sim >= self.cfg.similarity_threshold
                && similar.map_or(true, |(_, s)| sim > s)
            {
                similar = Some((id, sim));
            }
        }
        conforming.or(similar).map(|(id, _)| id)
    }

    /// Adds a line, returning the index of the cluster it joined.
    /// Mining follows the single tree path of the line, as in Drain.
    fn insert(&mut self, slots: Vec<Slot>) -> usize {
        let ids = self.leaf_mut(&slots).clusters.clone();
        match self.best_match(&slots, &ids) {
            Some(id) => {
                let merged = self.clusters[id].merged(&slots);
                self.clusters[id].slots = merged;
                id
            }
            None => {
                let id = self.clusters.len();
                self.clusters.push(Cluster {
                    slots: slots.clone(),
                });
                self.leaf_mut(&slots).clusters.push(id);
                id
            }
        }
    }

    pub fn add_line(&mut self, line: &str) {
        let slots = premask(line);
        if slots.is_empty() {
            self.has_blank = true;
        } else {
            self.insert(slots);
        }
    }

    /// The template `line` maps to under the current tree, without
    /// modifying it.
    pub fn match_line(&self, line: &str) -> LogTemplate {
        let slots = premask(line);
        if slots.is_empty() {
            return LogTemplate::blank();
        }
        match self.best_match(&slots, &self.candidates(&slots)) {
            Some(id) => LogTemplate::from_slots(self.clusters[id].merged(&slots)),
            None => LogTemplate::from_slots(slots),
        }
    }

    pub fn templates(&self) -> BTreeSet<LogTemplate> {
        let mut out: BTreeSet<LogTemplate> = self
            .clusters
            .iter()
            .map(|c| LogTemplate::from_slots(c.slots.clone()))
            .collect();
        if self.has_blank {
            out.insert(LogTemplate::blank());
        }
        out
    }
}

/// Mines the structural templates of one log.
pub fn mine_templates(log: &RawLog, cfg: &DrainConfig) -> BTreeSet<LogTemplate> {
    let mut tree = DrainTree::new(*cfg);
    for line in log.lines() {
        tree.add_line(&line.text);
    }
    tree.templates()
}

/// Template for `line` against the templates in `context`.
pub fn extract_template(line: &str, context: &DrainTree) -> LogTemplate {
    context.match_line(line)
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run {0} already present in store")]
    DuplicateRun(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("store io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed store file {path}: {source}")]
    Format {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRun {
    pub run_id: String,
    pub templates: BTreeSet<LogTemplate>,
}

/// Templates from the latest `x` successful runs of one task, newest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateStore {
    task_key: String,
    retention: usize,
    runs: Vec<StoredRun>,
    active: BTreeSet<String>,
}

pub const DEFAULT_RETENTION: usize = 3;

impl TemplateStore {
    pub fn new(task_key: impl Into<String>, retention: usize) -> Self {
        TemplateStore {
            task_key: task_key.into(),
            retention: retention.max(1),
            runs: Vec::new(),
            active: BTreeSet::new(),
        }
    }

    pub fn task_key(&self) -> &str {
        &self.task_key
    }

    pub fn retention(&self) -> usize {
        self.retention
    }

    pub fn runs(&self) -> &[StoredRun] {
        &self.runs
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn run_ids(&self) -> Vec<&str> {
        self.runs.iter().map(|r| r.run_id.as_str()).collect()
    }

    fn recompute(&mut self) {
        self.active = self
            .runs
            .iter()
            .flat_map(|r| r.templates.iter().map(|t| t.canonical().to_string()))
            .collect();
    }

    /// Prepends a run, evicting the oldest beyond the retention limit.
    pub fn update(
        &mut self,
        run_id: impl Into<String>,
        templates: BTreeSet<LogTemplate>,
    ) -> Result<(), StoreError> {
        let run_id = run_id.into();
        if self.runs.iter().any(|r| r.run_id == run_id) {
            return Err(StoreError::DuplicateRun(run_id));
        }
        self.runs.insert(0, StoredRun { run_id, templates });
        self.runs.truncate(self.retention);
        self.recompute();
        Ok(())
    }

    pub fn contains(&self, template: &LogTemplate) -> bool {
        self.active.contains(template.canonical())
    }

    /// Union of templates across retained runs.
    pub fn active_templates(&self) -> BTreeSet<LogTemplate> {
        self.active.iter().map(|c| LogTemplate::parse(c)).collect()
    }

    /// A parse tree over the active union, for matching failed-log lines.
    pub fn matcher(&self, cfg: &DrainConfig) -> DrainTree {
        let templates = self.active_templates();
        DrainTree::from_templates(*cfg, templates.iter())
    }

    pub fn to_json(&self) -> String {
        let file = StoreFile {
            task_key: self.task_key.clone(),
            x: self.retention,
            runs: self
                .runs
                .iter()
                .map(|r| StoreFileRun {
                    run_id: r.run_id.clone(),
                    templates: r.templates.iter().map(|t| t.canonical().to_string()).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("store serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: StoreFile = serde_json::from_str(text)?;
        let mut store = TemplateStore::new(file.task_key, file.x);
        store.runs = file
            .runs
            .into_iter()
            .map(|r| StoredRun {
                run_id: r.run_id,
                templates: r.templates.iter().map(|t| LogTemplate::parse(t)).collect(),
            })
            .collect();
        store.runs.truncate(store.retention);
        store.recompute();
        Ok(store)
    }

    /// Path of the store file for `task_key` inside `dir`.
    pub fn path_for(dir: &Path, task_key: &str) -> PathBuf {
        let safe: String = task_key
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        dir.join(format!("{safe}.json"))
    }

    /// Loads the store for `task_key`, or `None` if no file exists.
    pub fn load(dir: &Path, task_key: &str) -> Result<Option<Self>, StoreError> {
        let path = Self::path_for(dir, task_key);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => {
                return Err(StoreError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        Self::from_json(&text)
            .map(Some)
            .map_err(|source| StoreError::Format {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, StoreError> {
        let path = Self::path_for(dir, &self.task_key);
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(&path, self.to_json()).map_err(io)?;
        Ok(path)
    }
}

/// Functional form of [`TemplateStore::update`].
pub fn update_store(
    mut store: TemplateStore,
    run_id: impl Into<String>,
    templates: BTreeSet<LogTemplate>,
) -> Result<TemplateStore, StoreError> {
    store.update(run_id, templates)?;
    Ok(store)
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    task_key: String,
    x: usize,
    runs: Vec<StoreFileRun>,
}

#[derive(Serialize, Deserialize)]
struct StoreFileRun {
    run_id: String,
    templates: Vec<String>,
}
