//! Token overflow pruning.
//!
//! Pool lines get an initial weight (3 when the pool is sparse, 1 otherwise),
//! are boosted by failure markers, keywords and headers, and lines at or
//! above an adaptive threshold pull their neighbourhood back in with weight 1.
//! Maximal runs of weighted lines form blocks ranked by mean weight
//! (density); the densest prefix that fits the token limit is kept.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::filter::{CandidatePool, KeywordSet};
use crate::ingest::{LogLine, RawLog, Tokenizer};
use crate::scalar::{cmp_scalar, Scalar};

pub const DEFAULT_FAIL_MARKERS: [&str; 3] = ["--- FAIL:", "Failures:", "=== FAIL:"];
pub const FAIL_MARKER_WEIGHT: u32 = 10;
const SPARSE_WEIGHT: u32 = 3;
const DENSE_WEIGHT: u32 = 1;
const KEYWORD_BOOST: u32 = 2;
const RECALL_BOOST: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrunerConfig {
    /// Max pool/log ratio for the sparse (weight 3) branch.
    pub alpha: f64,
    /// Max pool size for the sparse branch.
    pub beta: usize,
    /// Weighted-line count at or below which every weighted line expands.
    pub gamma: usize,
    pub token_limit: usize,
    pub fail_markers: Vec<String>,
    pub header_prefix: String,
    pub m: usize,
    pub n: usize,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        PrunerConfig {
            alpha: 0.7,
            beta: 500,
            gamma: 500,
            token_limit: 22_000,
            fail_markers: DEFAULT_FAIL_MARKERS.iter().map(|s| s.to_string()).collect(),
            header_prefix: "#".to_string(),
            m: 4,
            n: 6,
        }
    }
}

impl PrunerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(format!("alpha {} not in (0, 1]", self.alpha));
        }
        if self.beta == 0 || self.gamma == 0 || self.token_limit == 0 {
            return Err("beta, gamma and token_limit must be positive".into());
        }
        Ok(())
    }

    fn is_fail_marker(&self, text: &str) -> bool {
        self.fail_markers.iter().any(|m| text.contains(m.as_str()))
    }

    fn is_header(&self, text: &str) -> bool {
        !self.header_prefix.is_empty() && text.trim_start().starts_with(self.header_prefix.as_str())
    }
}

/// One non-negative weight per log line, addressed by 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<u32>);

impl WeightVector {
    pub fn zeros(len: usize) -> Self {
        WeightVector(vec![0; len])
    }

    pub fn from_vec(weights: Vec<u32>) -> Self {
        WeightVector(weights)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, line: usize) -> u32 {
        self.0[line - 1]
    }

    pub fn set(&mut self, line: usize, w: u32) {
        self.0[line - 1] = w;
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn max(&self) -> u32 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn weighted_count(&self) -> usize {
        self.0.iter().filter(|&&w| w >= 1).count()
    }
}

/// Initial weights: every pool line shares one branch, 3 when
/// `|I|/|L| <= alpha` and `|I| <= beta`, else 1. Non-pool lines get 0.
pub fn assign_initial_weights(log_len: usize, pool: &CandidatePool, cfg: &PrunerConfig) -> WeightVector {
    let mut w = WeightVector::zeros(log_len);
    if pool.is_empty() || log_len == 0 {
        return w;
    }
    let size = pool.len();
    let sparse = (size as f64) / (log_len as f64) <= cfg.alpha && size <= cfg.beta;
    let value = if sparse { SPARSE_WEIGHT } else { DENSE_WEIGHT };
    for line in pool.lines().filter(|&l| l >= 1 && l <= log_len) {
        w.set(line, value);
    }
    w
}

/// Pattern-based enhancement. Per line, first matching rule wins:
/// failure marker sets 10; a pool line with a keyword or header gets +2;
/// any other pool line gets +1.
pub fn enhance_weights(
    weights: &WeightVector,
    log: &RawLog,
    pool: &CandidatePool,
    keywords: &KeywordSet,
    cfg: &PrunerConfig,
) -> WeightVector {
    let mut out = weights.clone();
    for line in log.lines() {
        let n = line.number;
        if n > out.len() {
            break;
        }
        if cfg.is_fail_marker(&line.text) {
            out.set(n, FAIL_MARKER_WEIGHT);
        } else if pool.contains(n) {
            if keywords.matches(&line.text) || cfg.is_header(&line.text) {
                out.set(n, out.get(n) + KEYWORD_BOOST);
            } else {
                out.set(n, out.get(n) + RECALL_BOOST);
            }
        }
    }
    out
}

/// Adaptive expansion threshold: 1 when `max(W) = 1` or at most `gamma`
/// lines carry weight, else 3.
pub fn expansion_threshold(weights: &WeightVector, gamma: usize) -> u32 {
    if weights.max() == 1 || weights.weighted_count() <= gamma {
        1
    } else {
        3
    }
}

/// Raises zero-weight lines within `[i - m, i + n]` of every line at or
/// above the threshold to 1. Returns the new vector and the threshold used.
pub fn contextual_expand(weights: &WeightVector, cfg: &PrunerConfig) -> (WeightVector, u32) {
    let theta = expansion_threshold(weights, cfg.gamma);
    let len = weights.len();
    let mut out = weights.clone();
    for (idx, &w) in weights.as_slice().iter().enumerate() {
        if w < theta {
            continue;
        }
        let i = idx + 1;
        for j in i.saturating_sub(cfg.m).max(1)..=(i + cfg.n).min(len) {
            if out.get(j) == 0 {
                out.set(j, 1);
            }
        }
    }
    (out, theta)
}

/// A run of weighted lines with its density and token cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBlock<S> {
    pub start: usize,
    pub end: usize,
    pub density: S,
    pub weight_total: u64,
    pub token_count: usize,
    /// Position in the segmentation order, for tie-breaking.
    pub index: usize,
    line_tokens: Vec<usize>,
    line_weights: Vec<u32>,
}

impl<S: Scalar> ScoredBlock<S> {
    fn new(start: usize, index: usize, line_weights: Vec<u32>, line_tokens: Vec<usize>) -> Self {
        let weight_total: u64 = line_weights.iter().map(|&w| w as u64).sum();
        let len = line_weights.len() as u64;
        ScoredBlock {
            start,
            end: start + line_weights.len() - 1,
            density: S::ratio(weight_total, len),
            weight_total,
            token_count: line_tokens.iter().sum(),
            index,
            line_tokens,
            line_weights,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, line: usize) -> bool {
        (self.start..=self.end).contains(&line)
    }

    /// Drops head lines until the block costs at most `limit` tokens.
    /// `None` if not even the last line fits.
    fn keep_tail(&self, limit: usize) -> Option<Self> {
        let mut cost = 0;
        let mut first = self.line_tokens.len();
        while first > 0 && cost + self.line_tokens[first - 1] <= limit {
            first -= 1;
            cost += self.line_tokens[first];
        }
        if first == self.line_tokens.len() {
            return None;
        }
        Some(Self::new(
            self.start + first,
            self.index,
            self.line_weights[first..].to_vec(),
            self.line_tokens[first..].to_vec(),
        ))
    }
}

/// Per-line token charge: the line's tokens plus one for the line-number
/// label it carries in a rendered excerpt.
pub fn line_cost(text: &str, tok: &dyn Tokenizer) -> usize {
    tok.count(text) + 1
}

/// Segments maximal runs of lines with weight >= 1 into scored blocks.
pub fn score_blocks<S: Scalar>(weights: &WeightVector, tok: &dyn Tokenizer, log: &RawLog) -> Vec<ScoredBlock<S>> {
    let mut blocks = Vec::new();
    let mut run: Option<(usize, Vec<u32>, Vec<usize>)> = None;
    for line in log.lines().iter().take(weights.len()) {
        let w = weights.get(line.number);
        if w >= 1 {
            let entry = run.get_or_insert_with(|| (line.number, Vec::new(), Vec::new()));
            entry.1.push(w);
            entry.2.push(line_cost(&line.text, tok));
        } else if let Some((start, ws, ts)) = run.take() {
            blocks.push(ScoredBlock::new(start, blocks.len(), ws, ts));
        }
    }
    if let Some((start, ws, ts)) = run {
        blocks.push(ScoredBlock::new(start, blocks.len(), ws, ts));
    }
    blocks
}

/// Ranking order: density desc, then total weight desc, then later start
/// first, then lower index.
pub fn rank_order<S: Scalar>(a: &ScoredBlock<S>, b: &ScoredBlock<S>) -> Ordering {
    cmp_scalar(&b.density, &a.density)
        .then(b.weight_total.cmp(&a.weight_total))
        .then(b.start.cmp(&a.start))
        .then(a.index.cmp(&b.index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TruncatedBlock {
    pub original_start: usize,
    pub original_end: usize,
    pub original_tokens: usize,
    /// New start line, or `None` if nothing fit.
    pub kept_start: Option<usize>,
}

impl fmt::Display for TruncatedBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kept_start {
            Some(s) => write!(
                f,
                "block [{}, {}] ({} tokens) exceeds the limit; kept tail from line {}",
                self.original_start, self.original_end, self.original_tokens, s
            ),
            None => write!(
                f,
                "block [{}, {}] ({} tokens) exceeds the limit and no tail line fits; dropped",
                self.original_start, self.original_end, self.original_tokens
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Selection<S> {
    /// Selected blocks in line order.
    pub blocks: Vec<ScoredBlock<S>>,
    pub truncated: Option<TruncatedBlock>,
}

impl<S: Scalar> Selection<S> {
    pub fn total_tokens(&self) -> usize {
        self.blocks.iter().map(|b| b.token_count).sum()
    }

    pub fn contains(&self, line: usize) -> bool {
        self.blocks.iter().any(|b| b.contains(line))
    }
}

/// Greedy selection: rank, keep the longest prefix whose cumulative token
/// count fits the limit, stop at the first overflow. If the top block alone
/// overflows, keep its tail; if not even its last line fits, drop it and
/// treat the next block as the top one.
pub fn select_blocks<S: Scalar>(blocks: &[ScoredBlock<S>], token_limit: usize) -> Selection<S> {
    let mut ranked: Vec<&ScoredBlock<S>> = blocks.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));

    let mut chosen: Vec<ScoredBlock<S>> = Vec::new();
    let mut used = 0usize;
    let mut truncated = None;
    for block in ranked {
        if used + block.token_count <= token_limit {
            used += block.token_count;
            chosen.push(block.clone());
            continue;
        }
        if !chosen.is_empty() {
            break;
        }
        let tail = block.keep_tail(token_limit);
        truncated = Some(TruncatedBlock {
            original_start: block.start,
            original_end: block.end,
            original_tokens: block.token_count,
            kept_start: tail.as_ref().map(|t| t.start),
        });
        log::warn!("{}", truncated.as_ref().unwrap());
        if let Some(t) = tail {
            chosen.push(t);
            break;
        }
    }
    chosen.sort_by_key(|b| b.start);
    Selection {
        blocks: chosen,
        truncated,
    }
}

/// Everything the pruning stage computed, for reporting and tests.
#[derive(Debug, Clone)]
pub struct PruneOutcome<S> {
    pub initial: WeightVector,
    pub enhanced: WeightVector,
    pub expanded: WeightVector,
    /// `None` when contextual expansion was disabled.
    pub theta: Option<u32>,
    pub blocks: Vec<ScoredBlock<S>>,
    pub selection: Selection<S>,
}

/// Runs weighting, enhancement, optional contextual expansion, scoring and
/// selection.
pub fn prune<S: Scalar>(
    log: &RawLog,
    pool: &CandidatePool,
    keywords: &KeywordSet,
    cfg: &PrunerConfig,
    tok: &dyn Tokenizer,
    contextual: bool,
) -> PruneOutcome<S> {
    let initial = assign_initial_weights(log.len(), pool, cfg);
    let enhanced = enhance_weights(&initial, log, pool, keywords, cfg);
    let (expanded, theta) = if contextual {
        let (w, t) = contextual_expand(&enhanced, cfg);
        (w, Some(t))
    } else {
        (enhanced.clone(), None)
    };
    let blocks = score_blocks::<S>(&expanded, tok, log);
    let selection = select_blocks(&blocks, cfg.token_limit);
    PruneOutcome {
        initial,
        enhanced,
        expanded,
        theta,
        blocks,
        selection,
    }
}

/// Selected log text, grouped into blocks, as embedded in prompts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excerpt {
    pub blocks: Vec<Vec<LogLine>>,
}

pub const GAP_MARKER: &str = "...";

impl Excerpt {
    pub fn from_selection<S>(selection: &Selection<S>, log: &RawLog) -> Self {
        let blocks = selection
            .blocks
            .iter()
            .map(|b| log.lines()[b.start - 1..b.end].to_vec())
            .collect();
        Excerpt { blocks }
    }

    /// Builds an excerpt from explicit inclusive ranges.
    pub fn from_ranges(ranges: &[(usize, usize)], log: &RawLog) -> Self {
        let blocks = ranges
            .iter()
            .filter(|(s, e)| *s >= 1 && s <= e && *e <= log.len())
            .map(|&(s, e)| log.lines()[s - 1..e].to_vec())
            .collect();
        Excerpt { blocks }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(|b| b.is_empty())
    }

    pub fn lines(&self) -> impl Iterator<Item = &LogLine> {
        self.blocks.iter().flatten()
    }

    pub fn line(&self, number: usize) -> Option<&str> {
        self.lines()
            .find(|l| l.number == number)
            .map(|l| l.text.as_str())
    }

    /// Sum of per-line charges (tokens + newline).
    pub fn token_count(&self, tok: &dyn Tokenizer) -> usize {
        self.lines().map(|l| line_cost(&l.text, tok)).sum()
    }

    /// `number<TAB>text` lines, blocks separated by a `...` line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                out.push_str(GAP_MARKER);
                out.push('\n');
            }
            for line in block {
                out.push_str(&line.number.to_string());
                out.push('\t');
                out.push_str(&line.text);
                out.push('\n');
            }
        }
        out
    }

    /// Inverse of [`Excerpt::render`]. Lines that are neither stanzas nor
    /// gap markers are ignored.
    pub fn parse(text: &str) -> Self {
        let mut blocks: Vec<Vec<LogLine>> = Vec::new();
        let mut current: Vec<LogLine> = Vec::new();
        for raw in text.split('\n') {
            if raw == GAP_MARKER {
                if !current.is_empty() {
                    blocks.push(std::mem::take(&mut current));
                }
                continue;
            }
            let Some((num, rest)) = raw.split_once('\t') else {
                continue;
            };
            let Ok(number) = num.parse::<usize>() else {
                continue;
            };
            if number == 0 {
                continue;
            }
            if let Some(prev) = current.last() {
                if number != prev.number + 1 {
                    blocks.push(std::mem::take(&mut current));
                }
            }
            current.push(LogLine {
                number,
                text: rest.to_string(),
            });
        }
        if !current.is_empty() {
            blocks.push(current);
        }
        Excerpt { blocks }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::Provenance;
    use crate::ingest::{Outcome, RegexTokenizer};
    use num_rational::Ratio;
    use proptest::prelude::*;

    fn pool(lines: impl IntoIterator<Item = usize>) -> CandidatePool {
        let mut p = CandidatePool::new();
        for l in lines {
            p.insert(l, Provenance { diff: true, ..Default::default() });
        }
        p
    }

    #[test]
    fn sparse_pool_gets_three() {
        let w = assign_initial_weights(1000, &pool(1..=100), &PrunerConfig::default());
        assert!((1..=100).all(|l| w.get(l) == 3));
        assert!((101..=1000).all(|l| w.get(l) == 0));
    }

    #[test]
    fn oversized_pool_gets_one() {
        // 550/600 > 0.7 and 550 > 500
        let w = assign_initial_weights(600, &pool(1..=550), &PrunerConfig::default());
        assert!((1..=550).all(|l| w.get(l) == 1));
        assert_eq!(w.get(551), 0);
    }

    #[test]
    fn ratio_alone_can_fail_sparse_branch() {
        // 80/100 > 0.7 although 80 <= 500
        let w = assign_initial_weights(100, &pool(1..=80), &PrunerConfig::default());
        assert_eq!(w.get(1), 1);
    }

    #[test]
    fn empty_pool_all_zero() {
        let w = assign_initial_weights(10, &CandidatePool::new(), &PrunerConfig::default());
        assert_eq!(w.max(), 0);
    }

    #[test]
    fn enhancement_rules() {
        let log = RawLog::from_lines(
            "f",
            "t",
            Outcome::Failed,
            ["--- FAIL: TestFoo", "error: link failed", "retrying step", "# Section", "plain"],
        );
        let p = pool(1..=4);
        let init = WeightVector::from_vec(vec![3, 3, 1, 1, 0]);
        let out = enhance_weights(&init, &log, &p, &KeywordSet::default(), &PrunerConfig::default());
        assert_eq!(out.as_slice(), &[10, 5, 2, 3, 0]);
    }

    #[test]
    fn fail_marker_outside_pool_still_set() {
        let log = RawLog::from_lines("f", "t", Outcome::Failed, ["=== FAIL: x", "error here"]);
        let out = enhance_weights(
            &WeightVector::zeros(2),
            &log,
            &CandidatePool::new(),
            &KeywordSet::default(),
            &PrunerConfig::default(),
        );
        assert_eq!(out.as_slice(), &[10, 0]);
    }

    #[test]
    fn uniform_ones_expand_everywhere() {
        let mut w = WeightVector::zeros(30);
        w.set(10, 1);
        w.set(25, 1);
        let (out, theta) = contextual_expand(&w, &PrunerConfig::default());
        assert_eq!(theta, 1);
        assert!((6..=16).all(|l| out.get(l) >= 1));
        assert!((21..=30).all(|l| out.get(l) >= 1));
        assert_eq!(out.get(5), 0);
        assert_eq!(out.get(17), 0);
    }

    #[test]
    fn many_weighted_lines_raise_theta() {
        // 600 weighted lines > gamma, with a few at 5: only those expand.
        let mut v = vec![0u32; 2000];
        for (i, w) in v.iter_mut().enumerate().take(1200) {
            if i % 2 == 0 {
                *w = 2;
            }
        }
        v[1500] = 5; // line 1501
        let w = WeightVector::from_vec(v);
        assert_eq!(w.weighted_count(), 601);
        let (out, theta) = contextual_expand(&w, &PrunerConfig::default());
        assert_eq!(theta, 3);
        assert!((1497..=1507).all(|l| out.get(l) >= 1));
        // weight-2 lines did not expand
        assert_eq!(out.get(2), 0);
    }

    #[test]
    fn nothing_meets_theta() {
        let mut v = vec![2u32; 600];
        v[0] = 0;
        let w = WeightVector::from_vec(v);
        let (out, theta) = contextual_expand(&w, &PrunerConfig::default());
        assert_eq!(theta, 3);
        assert_eq!(out, w);
    }

    fn tlog(n: usize) -> RawLog {
        RawLog::from_lines("f", "t", Outcome::Failed, (0..n).map(|i| format!("line {i}")))
    }

    #[test]
    fn density_is_mean_weight() {
        let w = WeightVector::from_vec(vec![10, 2, 3]);
        let blocks = score_blocks::<Ratio<i64>>(&w, &RegexTokenizer, &tlog(3));
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].density, Ratio::from_integer(5));
        // "line N" = 2 tokens + newline
        assert_eq!(blocks[0].token_count, 9);
        let single = score_blocks::<f64>(&WeightVector::from_vec(vec![1]), &RegexTokenizer, &tlog(1));
        assert_eq!(single[0].density, 1.0);
    }

    #[test]
    fn zero_line_splits_runs() {
        let w = WeightVector::from_vec(vec![1, 1, 0, 4]);
        let blocks = score_blocks::<f64>(&w, &RegexTokenizer, &tlog(4));
        let ranges: Vec<_> = blocks.iter().map(|b| (b.start, b.end)).collect();
        assert_eq!(ranges, vec![(1, 2), (4, 4)]);
    }

    fn synthetic(density: i64, tokens: usize, start: usize, index: usize) -> ScoredBlock<Ratio<i64>> {
        let mut b = ScoredBlock::<Ratio<i64>>::new(start, index, vec![density as u32], vec![tokens]);
        b.token_count = tokens;
        b
    }

    #[test]
    fn greedy_prefix_stops_at_overflow() {
        let blocks = vec![
            synthetic(1, 10_000, 100, 0),
            synthetic(5, 10_000, 1, 1),
            synthetic(3, 10_000, 50, 2),
        ];
        let sel = select_blocks(&blocks, 22_000);
        let starts: Vec<_> = sel.blocks.iter().map(|b| b.start).collect();
        assert_eq!(starts, vec![1, 50]);
        assert!(sel.truncated.is_none());
    }

    #[test]
    fn stop_at_first_overflow_not_skip() {
        let blocks = vec![
            synthetic(5, 15_000, 1, 0),
            synthetic(4, 10_000, 20, 1),
            synthetic(3, 1_000, 40, 2),
        ];
        let sel = select_blocks(&blocks, 22_000);
        assert_eq!(sel.blocks.len(), 1);
    }

    #[test]
    fn oversized_single_block_keeps_tail() {
        let log = RawLog::from_lines("f", "t", Outcome::Failed, (0..3000).map(|i| format!("word{i} x y z w v u t s r")));
        // 10 tokens + 1 per line = 11 tokens per line, 33_000 total
        let w = WeightVector::from_vec(vec![1; 3000]);
        let blocks = score_blocks::<f64>(&w, &RegexTokenizer, &log);
        assert_eq!(blocks[0].token_count, 33_000);
        let sel = select_blocks(&blocks, 22_000);
        let t = sel.truncated.expect("truncation signalled");
        assert_eq!(sel.blocks.len(), 1);
        assert_eq!(sel.blocks[0].end, 3000);
        assert_eq!(sel.total_tokens(), 22_000);
        assert_eq!(t.kept_start, Some(1001));
    }

    #[test]
    fn unfittable_top_block_is_dropped() {
        let mut lines: Vec<String> = vec!["ok".into(); 20];
        lines[4] = (0..500).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let log = RawLog::from_lines("f", "t", Outcome::Failed, lines);
        let mut w = vec![0; 20];
        w[4] = 9;
        w[14] = 2;
        w[15] = 2;
        let blocks = score_blocks::<Ratio<i64>>(&WeightVector::from_vec(w), &RegexTokenizer, &log);
        let sel = select_blocks(&blocks, 100);
        assert_eq!(sel.truncated.unwrap().kept_start, None);
        assert_eq!(sel.blocks.iter().map(|b| (b.start, b.end)).collect::<Vec<_>>(), [(15, 16)]);
    }

    #[test]
    fn empty_selection() {
        let sel = select_blocks::<f64>(&[], 22_000);
        assert!(sel.blocks.is_empty());
        assert!(sel.truncated.is_none());
    }

    #[test]
    fn excerpt_round_trip() {
        let log = tlog(30);
        let ex = Excerpt::from_ranges(&[(2, 4), (10, 11)], &log);
        let text = ex.render();
        assert_eq!(text, "2\tline 1\n3\tline 2\n4\tline 3\n...\n10\tline 9\n11\tline 10\n");
        assert_eq!(Excerpt::parse(&text), ex);
    }

    /// Brute force: the longest k such that the first k ranked blocks fit.
    fn prefix_oracle(tokens_in_rank_order: &[usize], limit: usize) -> usize {
        (0..=tokens_in_rank_order.len())
            .filter(|&k| tokens_in_rank_order[..k].iter().sum::<usize>() <= limit)
            .max()
            .unwrap()
    }

    proptest! {
        #[test]
        fn selection_respects_budget(
            specs in prop::collection::vec((1u32..12, 1usize..6000), 0..12),
            limit in 1usize..30_000,
        ) {
            let blocks: Vec<_> = specs
                .iter()
                .enumerate()
                .map(|(i, &(w, t))| synthetic(w as i64, t, i * 10 + 1, i))
                .collect();
            let sel = select_blocks(&blocks, limit);
            prop_assert!(sel.total_tokens() <= limit);
            if sel.truncated.is_none() {
                let mut ranked = blocks.clone();
                ranked.sort_by(rank_order);
                let tokens: Vec<_> = ranked.iter().map(|b| b.token_count).collect();
                prop_assert_eq!(sel.blocks.len(), prefix_oracle(&tokens, limit));
            }
        }

        #[test]
        fn enhancement_never_decreases(ws in prop::collection::vec(0u32..4, 1..40)) {
            let log = RawLog::from_lines("f", "t", Outcome::Failed, ws.iter().enumerate().map(|(i, _)| {
                match i % 4 { 0 => "--- FAIL: t".to_string(), 1 => "error x".to_string(), 2 => "# h".to_string(), _ => "ok".to_string() }
            }));
            let p = pool(ws.iter().enumerate().filter(|(_, &w)| w > 0).map(|(i, _)| i + 1));
            let init = WeightVector::from_vec(ws.clone());
            let out = enhance_weights(&init, &log, &p, &KeywordSet::default(), &PrunerConfig::default());
            for (i, (&a, &b)) in init.as_slice().iter().zip(out.as_slice()).enumerate() {
                prop_assert!(b >= a);
                if i % 4 == 0 {
                    prop_assert_eq!(b, 10);
                }
            }
        }
    }
}
