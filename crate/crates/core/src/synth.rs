//! Deterministic synthetic failure corpus.
//!
//! Each case is a long CI log made of routine build output, scattered
//! warning-style lines that contain failure keywords, and one annotated
//! failure cluster. Three success logs drawn from the same line grammar
//! act as the noise baseline. Cases come in three layouts:
//!
//! * `Late`: the failure is near the end of the log.
//! * `MidNoisyTail`: the failure is followed by a long stretch that keeps
//!   emitting keyword lines.
//! * `MidQuietTail`: the failure is followed by a long keyword-free
//!   stretch.

use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::eval::Annotation;
use crate::ingest::RegexTokenizer;
use crate::pruner::line_cost;

pub const DEFAULT_SEED: u64 = 20_250_601;
pub const DEFAULT_CASES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Late,
    MidNoisyTail,
    MidQuietTail,
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub case_id: String,
    pub layout: Layout,
    pub failed: Vec<String>,
    /// Oldest first.
    pub success: Vec<Vec<String>>,
    pub annotation: Annotation,
}

const CRATES: [&str; 24] = [
    "serde_json", "tokio", "hyper", "rustls", "regex", "clap", "rand", "bytes", "tracing", "futures",
    "prost", "tonic", "axum", "sqlx", "chrono", "uuid", "itertools", "anyhow", "semver", "reqwest",
    "mio", "smallvec", "parking_lot", "crossbeam",
];
const MODULES: [&str; 12] = [
    "billing", "auth", "ledger", "router", "storage", "metrics", "queue", "search", "gateway", "catalog",
    "profile", "notify",
];
const FUNCS: [&str; 16] = [
    "parse_header", "round_trip", "handles_empty", "rejects_stale", "merges_ranges", "encodes_utf8",
    "orders_by_key", "retries_once", "streams_chunks", "closes_cleanly", "paginates", "rotates_keys",
    "decodes_base64", "hashes_stable", "limits_rate", "sorts_stable",
];
const STEPS: [&str; 8] = ["checkout", "setup-toolchain", "restore-cache", "build", "unit-tests", "integration-tests", "package", "publish"];
const DIRS: [&str; 6] = ["/workspace/app", "/workspace/lib", "/workspace/services", "/workspace/tools", "/workspace/web", "/workspace/infra"];
const CMDS: [&str; 6] = ["apt-get install", "pip install", "npm ci", "cargo fetch", "go mod download", "make deps"];
const BUCKETS: [&str; 4] = ["ci-artifacts", "nightly-builds", "release-staging", "perf-traces"];
const REGIONS: [&str; 4] = ["us-east-1", "eu-west-1", "ap-south-1", "us-west-2"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap()
}

fn hex<R: Rng>(rng: &mut R) -> String {
    format!("{:012x}", rng.gen::<u64>() & 0xffff_ffff_ffff | 0x1000_0000_0000)
}

/// Routine output with no failure keywords.
fn normal_line<R: Rng>(rng: &mut R) -> String {
    match rng.gen_range(0..9) {
        0 => format!(
            "[build] Compiling {} {}.{}.{}",
            pick(rng, &CRATES),
            rng.gen_range(0..3),
            rng.gen_range(0..30),
            rng.gen_range(0..200)
        ),
        1 => format!(
            "[deps] Downloaded {} {}.{}.{} ({} KB) from registry mirror",
            pick(rng, &CRATES),
            rng.gen_range(0..3),
            rng.gen_range(0..30),
            rng.gen_range(0..200),
            rng.gen_range(4..900)
        ),
        2 => format!(
            "[test] test {}::{} ... ok",
            pick(rng, &MODULES),
            pick(rng, &FUNCS)
        ),
        3 => format!(
            "[step] Running {} in {} with {} workers",
            pick(rng, &STEPS),
            pick(rng, &DIRS),
            rng.gen_range(1..17)
        ),
        4 => format!(
            "[cache] Restored cache key {} size {} MB in {} ms",
            hex(rng),
            rng.gen_range(1..800),
            rng.gen_range(5..5000)
        ),
        5 => format!(
            "[docker] Step {}/{} : RUN {} --quiet --no-progress",
            rng.gen_range(1..20),
            rng.gen_range(20..30),
            pick(rng, &CMDS)
        ),
        6 => format!(
            "[lint] Checked {} files in {} with {} warnings suppressed",
            rng.gen_range(3..400),
            pick(rng, &MODULES),
            rng.gen_range(0..12)
        ),
        7 => format!(
            "[upload] Uploading artifact {}-{}.tar.gz to bucket {} region {}",
            pick(rng, &CRATES),
            rng.gen_range(100..999),
            pick(rng, &BUCKETS),
            pick(rng, &REGIONS)
        ),
        _ => format!(
            "[info] Progress {}% of {} completed, elapsed {}s",
            rng.gen_range(1..100),
            pick(rng, &STEPS),
            rng.gen_range(1..4000)
        ),
    }
}

/// Benign lines that nevertheless contain failure keywords.
fn keyword_noise_line<R: Rng>(rng: &mut R) -> String {
    match rng.gen_range(0..5) {
        0 => format!(
            "[warn] retrying download of {} after transient error (attempt {}/3)",
            pick(rng, &CRATES),
            rng.gen_range(1..3)
        ),
        1 => format!(
            "[test] skipping {}::{}: optional fixture missing on runner {}",
            pick(rng, &MODULES),
            pick(rng, &FUNCS),
            rng.gen_range(1..64)
        ),
        2 => format!(
            "[docker] layer {} cannot be reused, rebuilding from step {}",
            hex(rng),
            rng.gen_range(1..20)
        ),
        3 => format!(
            "[step] helper process {} exited with status 0 after {} ms",
            rng.gen_range(1000..60000),
            rng.gen_range(1..900)
        ),
        _ => format!(
            "[lint] {}.rs:{}: fallible call result ignored, error handling recommended",
            pick(rng, &MODULES),
            rng.gen_range(1..900)
        ),
    }
}

struct Cluster {
    lines: Vec<String>,
    /// Offsets into `lines` that are ground truth.
    truth: Vec<usize>,
    root_cause: String,
}

fn camel(s: &str) -> String {
    s.split('_')
        .map(|w| {
            let mut c = w.chars();
            c.next()
                .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
                .unwrap_or_default()
        })
        .collect()
}

fn failure_cluster<R: Rng>(rng: &mut R, with_marker: bool) -> Cluster {
    let module = pick(rng, &MODULES);
    let func = pick(rng, &FUNCS);
    let kind = if with_marker {
        rng.gen_range(0..3)
    } else {
        rng.gen_range(0..5)
    };
    match kind {
        0 => {
            let name = format!("Test{}{}", camel(module), camel(func));
            let got = rng.gen_range(400..600);
            Cluster {
                lines: vec![
                    format!("=== RUN   {name}"),
                    format!("    {module}_test.go:{}: expected status 200, got {got}", rng.gen_range(20..300)),
                    format!("    {module}_test.go:{}: response body mismatch for /api/v1/{module}", rng.gen_range(20..300)),
                    format!("--- FAIL: {name} (0.{:02}s)", rng.gen_range(1..99)),
                    "FAIL".to_string(),
                    format!("FAIL\tgithub.com/acme/platform/{module}\t{}.{:03}s", rng.gen_range(0..9), rng.gen_range(0..999)),
                ],
                truth: vec![1, 2, 3, 5],
                root_cause: format!("Unit test {name} failed: handler returned HTTP {got}"),
            }
        }
        1 => {
            let class = format!("com.acme.{}.{}Test", module, camel(module));
            let short = format!("{}Test", camel(module));
            let meth = format!("test{}", camel(func));
            let (exp, was) = (rng.gen_range(1..50), rng.gen_range(50..99));
            let line = rng.gen_range(20..400);
            Cluster {
                lines: vec![
                    format!("[INFO] Running {class}"),
                    format!("[ERROR] Tests run: {}, Failures: 1, Errors: 0, Skipped: 0, Time elapsed: {}.{} s <<< FAILURE! - in {class}", rng.gen_range(2..30), rng.gen_range(0..9), rng.gen_range(0..999)),
                    format!("[ERROR] {meth}({class})  Time elapsed: 0.{:03} s  <<< FAILURE!", rng.gen_range(1..999)),
                    format!("java.lang.AssertionError: expected:<{exp}> but was:<{was}>"),
                    format!("\tat {class}.{meth}({short}.java:{line})"),
                    "[INFO] ".to_string(),
                    "[ERROR] Failures: ".to_string(),
                    format!("[ERROR]   {short}.{meth}:{line} expected:<{exp}> but was:<{was}>"),
                ],
                truth: vec![2, 3, 4, 7],
                root_cause: format!("JUnit assertion failure in {short}.{meth}"),
            }
        }
        2 => {
            let name = format!("Test{}{}", camel(module), camel(func));
            Cluster {
                lines: vec![
                    format!("=== FAIL: {module} {name} ({}.{:02}s)", rng.gen_range(0..5), rng.gen_range(0..99)),
                    format!("    {module}_test.go:{}: context deadline exceeded while waiting for {module} replica", rng.gen_range(20..300)),
                    format!("    {module}_test.go:{}: replica {} never became ready", rng.gen_range(20..300), rng.gen_range(1..5)),
                    format!("DONE {} tests, 1 failure in {}.{:03}s", rng.gen_range(50..900), rng.gen_range(10..99), rng.gen_range(0..999)),
                ],
                truth: vec![0, 1, 2],
                root_cause: format!("Integration test {name} timed out waiting for a replica"),
            }
        }
        3 => {
            let krate = pick(rng, &CRATES);
            let (l, c) = (rng.gen_range(10..400), rng.gen_range(5..40));
            Cluster {
                lines: vec![
                    "error[E0308]: mismatched types".to_string(),
                    format!("  --> src/{module}/mod.rs:{l}:{c}"),
                    "   |".to_string(),
                    format!("{l} |     let count: u32 = {func}(input);"),
                    "   |                      ^^^^^^^^^^^^ expected `u32`, found `i64`".to_string(),
                    format!("error: could not compile `{krate}` due to previous error"),
                ],
                truth: vec![0, 1, 5],
                root_cause: format!("Compilation error in src/{module}/mod.rs: mismatched types"),
            }
        }
        _ => {
            let pkg = pick(rng, &CRATES).replace('_', "-");
            let v = rng.gen_range(15..19);
            Cluster {
                lines: vec![
                    "npm ERR! code ERESOLVE".to_string(),
                    "npm ERR! ERESOLVE unable to resolve dependency tree".to_string(),
                    format!("npm ERR! Found: {pkg}@{v}.2.0"),
                    format!("npm ERR! Could not resolve dependency: peer {pkg}@\"^{}.0.0\" from legacy-{module}@2.1.4", v - 1),
                ],
                truth: vec![0, 1, 2, 3],
                root_cause: format!("Dependency conflict: peer dependency on {pkg} {}", v - 1),
            }
        }
    }
}

const QUIET_END: &str = "[post] Job finished, status reported to checks API";

fn success_log<R: Rng>(rng: &mut R) -> Vec<String> {
    let n = rng.gen_range(500..900);
    let mut lines: Vec<String> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.02) {
                keyword_noise_line(rng)
            } else {
                normal_line(rng)
            }
        })
        .collect();
    lines.push(QUIET_END.to_string());
    lines.push("Process completed with exit code 0.".to_string());
    lines
}

/// Picks `count` positions in `range`, at least `gap` apart.
fn spaced_positions<R: Rng>(rng: &mut R, range: std::ops::Range<usize>, count: usize, gap: usize) -> Vec<usize> {
    let slots = range.len() / gap;
    let mut idx: Vec<usize> = (0..slots).collect();
    idx.shuffle(rng);
    idx.truncate(count);
    idx.sort_unstable();
    idx.into_iter()
        .map(|s| range.start + s * gap + rng.gen_range(0..gap.saturating_sub(11).max(1)))
        .collect()
}

pub fn generate_case(seed: u64, index: usize) -> SynthCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let tok = RegexTokenizer;
    let layout = match index % 6 {
        4 => Layout::MidNoisyTail,
        5 => Layout::MidQuietTail,
        _ => Layout::Late,
    };
    let over_budget = index % 5 == 2;
    let len = match layout {
        Layout::Late => rng.gen_range(1_600..11_000),
        _ => rng.gen_range(4_000..11_000),
    };
    let mut lines: Vec<String> = (0..len).map(|_| normal_line(&mut rng)).collect();
    let avg_cost = lines.iter().map(|l| line_cost(l, &tok)).sum::<usize>() as f64 / len as f64;

    let cluster = failure_cluster(&mut rng, over_budget);
    let teardown = rng.gen_range(5..40);
    let at = match layout {
        Layout::Late => len - teardown - cluster.lines.len(),
        _ => rng.gen_range(len / 5..len - 2_400),
    };

    let target: f64 = if over_budget {
        rng.gen_range(26_000.0..40_000.0)
    } else {
        rng.gen_range(9_000.0..20_000.0)
    };
    let tail_lines = 50usize.max((0.05 * len as f64).ceil() as usize);
    let fixed = (tail_lines as f64 + 24.0) * avg_cost;
    let per_noise = 11.0 * avg_cost;
    let noise = (((target - fixed) / per_noise).max(3.0)) as usize;

    let guard = at.saturating_sub(12)..at + cluster.lines.len() + 12;
    let range = match layout {
        Layout::MidQuietTail => 0..at.saturating_sub(12),
        _ => 0..len - tail_lines,
    };
    for p in spaced_positions(&mut rng, range, noise, 14) {
        if !guard.contains(&p) {
            lines[p] = keyword_noise_line(&mut rng);
        }
    }
    if layout == Layout::MidNoisyTail {
        for k in 0..4 {
            let p = len - tail_lines - 60 - k * 150;
            lines[p] = keyword_noise_line(&mut rng);
        }
    }
    for (i, l) in cluster.lines.iter().enumerate() {
        lines[at + i] = l.clone();
    }
    match layout {
        Layout::MidQuietTail => {
            let last = lines.len() - 1;
            lines[last] = QUIET_END.to_string();
        }
        _ => {
            let last = lines.len() - 1;
            lines[last - 1] = "[post] Cleaning up orphan processes".to_string();
            lines[last] = "Process completed with exit code 1.".to_string();
        }
    }

    let success = (0..3).map(|_| success_log(&mut rng)).collect();
    SynthCase {
        case_id: format!("case-{index:03}"),
        layout,
        failed: lines,
        success,
        annotation: Annotation {
            ground_truth_lines: cluster.truth.iter().map(|o| at + o + 1).collect(),
            root_cause: cluster.root_cause,
        },
    }
}

/// Standalone success logs from the corpus grammar.
pub fn success_logs(seed: u64, count: usize) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| success_log(&mut rng)).collect()
}

pub fn generate_corpus(seed: u64, cases: usize) -> Vec<SynthCase> {
    (0..cases).map(|i| generate_case(seed, i)).collect()
}

fn write_lines(path: &Path, lines: &[String]) -> io::Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)
}

/// Writes cases in the dataset layout read by [`crate::eval::load_dataset`].
pub fn write_corpus(root: &Path, cases: &[SynthCase]) -> io::Result<()> {
    for case in cases {
        let dir = root.join(&case.case_id);
        std::fs::create_dir_all(dir.join("success"))?;
        write_lines(&dir.join("failed.log"), &case.failed)?;
        for (i, s) in case.success.iter().enumerate() {
            write_lines(&dir.join("success").join(format!("{:02}.log", i + 1)), s)?;
        }
        let ann = serde_json::to_string_pretty(&case.annotation).map_err(io::Error::other)?;
        std::fs::write(dir.join("annotations.json"), ann + "\n")?;
    }
    Ok(())
}

/// Stress inputs for budget checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adversarial {
    /// Every line carries a failure marker.
    AllMarkers,
    /// Every line matches a keyword.
    AllKeywords,
    /// Routine lines with one very long keyword line in the middle.
    GiantLine,
    /// Alternating keyword and routine lines.
    Alternating,
}

pub fn adversarial_log(kind: Adversarial, lines: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..lines)
        .map(|i| match kind {
            Adversarial::AllMarkers => format!("--- FAIL: TestCase{i} (0.01s)"),
            Adversarial::AllKeywords => keyword_noise_line(&mut rng),
            Adversarial::GiantLine if i == lines / 2 => {
                format!("error: {}", (0..30_000).map(|k| format!("t{k}")).collect::<Vec<_>>().join(" "))
            }
            Adversarial::GiantLine => normal_line(&mut rng),
            Adversarial::Alternating if i % 2 == 0 => keyword_noise_line(&mut rng),
            Adversarial::Alternating => normal_line(&mut rng),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::KeywordSet;
    use crate::ingest::Tokenizer;

    #[test]
    fn deterministic() {
        let a = generate_case(7, 3);
        let b = generate_case(7, 3);
        assert_eq!(a.failed, b.failed);
        assert_eq!(a.annotation, b.annotation);
        assert_ne!(generate_case(8, 3).failed, a.failed);
    }

    #[test]
    fn normal_lines_have_no_keywords() {
        let kw = KeywordSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5000 {
            let l = normal_line(&mut rng);
            assert!(!kw.matches(&l), "{l}");
        }
        for _ in 0..500 {
            assert!(kw.matches(&keyword_noise_line(&mut rng)));
        }
    }

    #[test]
    fn layouts_and_truth() {
        let tok = RegexTokenizer;
        let kw = KeywordSet::default();
        for case in generate_corpus(DEFAULT_SEED, 12) {
            let tokens: usize = case.failed.iter().map(|l| tok.count(l)).sum();
            assert!((15_000..=160_000).contains(&tokens), "{} has {tokens} tokens", case.case_id);
            let truth = &case.annotation.ground_truth_lines;
            assert!(truth.iter().all(|&l| l >= 1 && l <= case.failed.len()));
            if case.layout == Layout::MidQuietTail {
                let after = *truth.last().unwrap() + 4;
                assert!(case.failed[after..].iter().all(|l| !kw.matches(l)));
            }
        }
    }
}
