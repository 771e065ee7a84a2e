//! Scoring analysis output against annotated cases.
//!
//! A case is a directory holding `failed.log`, optional `success/*.log`
//! baselines and `annotations.json`. Reports are judged by how much of the
//! annotated ground truth their quoted ranges cover.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::drain::{mine_templates, TemplateStore};
use crate::ingest::{load_log, IngestError, Outcome, Tokenizer};
use crate::llm::LlmBackend;
use crate::rca::{run_rca, Context, FewShot, RcaReport};
use crate::scalar::Scalar;

/// Token and round usage of one case.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRecord {
    pub case_id: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub query_rounds: usize,
}

impl CostRecord {
    pub fn new(case_id: impl Into<String>) -> Self {
        CostRecord {
            case_id: case_id.into(),
            ..Default::default()
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    TP,
    FP,
    FN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub case_id: String,
    pub verdict: Verdict,
    /// `|predicted ∩ truth| / |truth|`.
    pub overlap: f64,
    pub matched: usize,
    pub truth_lines: usize,
    pub predicted_lines: usize,
}

/// A case counts as detected when at least 90% of its truth lines are
/// quoted. The comparison is done in integers so 9/10 lands on TP.
pub fn judge_case(case_id: &str, report: Option<&RcaReport>, truth: &BTreeSet<usize>) -> EvalOutcome {
    let predicted = report.map(|r| r.predicted_lines()).unwrap_or_default();
    let matched = predicted.intersection(truth).count();
    let overlap = if truth.is_empty() {
        0.0
    } else {
        matched as f64 / truth.len() as f64
    };
    let verdict = if predicted.is_empty() {
        Verdict::FN
    } else if !truth.is_empty() && 10 * matched >= 9 * truth.len() {
        Verdict::TP
    } else {
        Verdict::FP
    };
    EvalOutcome {
        case_id: case_id.to_string(),
        verdict,
        overlap,
        matched,
        truth_lines: truth.len(),
        predicted_lines: predicted.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics<S> {
    pub cases: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Explicit "no anomaly" verdicts from external analyzers; never part
    /// of precision or recall.
    pub tn: usize,
    pub precision: S,
    pub recall: S,
    pub f1: S,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

impl<S: Scalar> Metrics<S> {
    pub fn to_f64(&self) -> Metrics<f64> {
        Metrics {
            cases: self.cases,
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
            precision: self.precision.to_f64(),
            recall: self.recall.to_f64(),
            f1: self.f1.to_f64(),
            precision_undefined: self.precision_undefined,
            recall_undefined: self.recall_undefined,
            f1_undefined: self.f1_undefined,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to aggregate")]
    NoOutcomes,
    #[error("no cost records")]
    NoCosts,
    #[error("dataset {0} contains no usable cases")]
    EmptyDataset(String),
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn safe_ratio<S: Scalar>(num: usize, den: usize) -> (S, bool) {
    if den == 0 {
        (S::zero(), true)
    } else {
        (S::ratio(num as u64, den as u64), false)
    }
}

/// Precision, recall and F1 over judged cases. Zero denominators give 0
/// and set the matching `*_undefined` flag.
pub fn aggregate<S: Scalar>(outcomes: &[EvalOutcome]) -> Result<Metrics<S>, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::NoOutcomes);
    }
    let count = |v: Verdict| outcomes.iter().filter(|o| o.verdict == v).count();
    let (tp, fp, fn_) = (count(Verdict::TP), count(Verdict::FP), count(Verdict::FN));
    let (precision, precision_undefined) = safe_ratio::<S>(tp, tp + fp);
    let (recall, recall_undefined) = safe_ratio::<S>(tp, tp + fn_);
    // Harmonic mean of P and R, written over the counts: 2TP / (2TP + FP + FN).
    let (f1, f1_undefined) = if tp == 0 {
        (S::zero(), true)
    } else {
        safe_ratio::<S>(2 * tp, 2 * tp + fp + fn_)
    };
    Ok(Metrics {
        cases: outcomes.len(),
        tp,
        fp,
        fn_,
        tn: 0,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSummary<F> {
    pub cases: usize,
    pub avg_tokens: F,
    pub avg_queries: F,
    /// Coefficient of variation of per-case token totals, in percent.
    pub token_variability: F,
}

/// Mean tokens, mean rounds, and the population coefficient of variation
/// of per-case token totals.
pub fn cost_report<F: Float>(records: &[CostRecord]) -> Result<CostSummary<F>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoCosts);
    }
    let conv = |n: usize| F::from(n).expect("count fits the float type");
    let n = conv(records.len());
    let totals: Vec<F> = records.iter().map(|r| conv(r.total_tokens())).collect();
    let mean = totals.iter().fold(F::zero(), |a, &b| a + b) / n;
    let var = totals
        .iter()
        .map(|&t| (t - mean) * (t - mean))
        .fold(F::zero(), |a, b| a + b)
        / n;
    let variability = if mean > F::zero() {
        var.sqrt() / mean * conv(100)
    } else {
        F::zero()
    };
    let rounds = records.iter().map(|r| conv(r.query_rounds)).fold(F::zero(), |a, b| a + b);
    Ok(CostSummary {
        cases: records.len(),
        avg_tokens: mean,
        avg_queries: rounds / n,
        token_variability: variability,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub ground_truth_lines: Vec<usize>,
    pub root_cause: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseBundle {
    pub case_id: String,
    pub dir: PathBuf,
    pub failed_log: PathBuf,
    /// Oldest first.
    pub success_logs: Vec<PathBuf>,
    pub ground_truth: BTreeSet<usize>,
    pub root_cause_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedCase {
    pub case_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub cases: Vec<CaseBundle>,
    pub skipped: Vec<SkippedCase>,
}

fn load_case(dir: &Path, case_id: &str) -> Result<CaseBundle, String> {
    let failed_log = dir.join("failed.log");
    if !failed_log.is_file() {
        return Err("missing failed.log".into());
    }
    let ann_path = dir.join("annotations.json");
    let text = std::fs::read_to_string(&ann_path).map_err(|e| format!("annotations.json: {e}"))?;
    let ann: Annotation =
        serde_json::from_str(&text).map_err(|e| format!("annotations.json: {e}"))?;
    if ann.ground_truth_lines.is_empty() {
        return Err("no ground-truth lines".into());
    }
    let log = load_log(&failed_log, case_id, case_id, Outcome::Failed).map_err(|e| e.to_string())?;
    if let Some(bad) = ann
        .ground_truth_lines
        .iter()
        .find(|&&l| l == 0 || l > log.len())
    {
        return Err(format!("ground-truth line {bad} outside 1..={}", log.len()));
    }
    let mut success_logs = Vec::new();
    let success_dir = dir.join("success");
    if success_dir.is_dir() {
        let entries = std::fs::read_dir(&success_dir).map_err(|e| format!("success/: {e}"))?;
        for entry in entries {
            let path = entry.map_err(|e| format!("success/: {e}"))?.path();
            if path.extension().is_some_and(|x| x == "log") {
                success_logs.push(path);
            }
        }
        success_logs.sort();
    }
    Ok(CaseBundle {
        case_id: case_id.to_string(),
        dir: dir.to_path_buf(),
        failed_log,
        success_logs,
        ground_truth: ann.ground_truth_lines.into_iter().collect(),
        root_cause_label: ann.root_cause,
    })
}

/// Reads every case directory under `root`, in name order. Malformed cases
/// are skipped with a warning and listed in [`Dataset::skipped`].
pub fn load_dataset(root: &Path) -> Result<Dataset, EvalError> {
    let io = |source| EvalError::Io {
        path: root.display().to_string(),
        source,
    };
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut ds = Dataset::default();
    for dir in dirs {
        let case_id = dir.file_name().unwrap().to_string_lossy().into_owned();
        match load_case(&dir, &case_id) {
            Ok(case) => ds.cases.push(case),
            Err(reason) => {
                log::warn!("skipping case {case_id}: {reason}");
                ds.skipped.push(SkippedCase { case_id, reason });
            }
        }
    }
    if ds.cases.is_empty() {
        return Err(EvalError::EmptyDataset(root.display().to_string()));
    }
    Ok(ds)
}

/// Builds a template store from a case's success logs, oldest first so the
/// newest run ends up at the front.
pub fn store_for_case(case: &CaseBundle, cfg: &RunConfig) -> Result<TemplateStore, EvalError> {
    let mut store = TemplateStore::new(&case.case_id, cfg.store.retention);
    for path in &case.success_logs {
        let run_id = path.file_stem().unwrap().to_string_lossy().into_owned();
        let log = load_log(path, &run_id, &case.case_id, Outcome::Success)?;
        store
            .update(run_id, mine_templates(&log, &cfg.drain))
            .expect("file stems are unique");
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub outcome: EvalOutcome,
    pub cost: CostRecord,
    pub report: Option<RcaReport>,
    pub context: Option<Context>,
    pub error: Option<String>,
    /// Whether every ground-truth line was inside the selected blocks.
    pub truth_retained: bool,
}

pub fn evaluate_case(
    case: &CaseBundle,
    cfg: &RunConfig,
    few_shots: &[FewShot],
    backend: &dyn LlmBackend,
    tok: &dyn Tokenizer,
) -> Result<CaseResult, EvalError> {
    let failed = load_log(&case.failed_log, &case.case_id, &case.case_id, Outcome::Failed)?;
    let store = store_for_case(case, cfg)?;
    let (report, mut cost, context, error) = match run_rca(&failed, &store, cfg, few_shots, backend, tok) {
        Ok(run) => (Some(run.report), run.cost, Some(run.context), None),
        Err(f) => (None, f.cost, f.context, Some(f.error.to_string())),
    };
    cost.case_id = case.case_id.clone();
    let truth_retained = context
        .as_ref()
        .is_some_and(|c| case.ground_truth.iter().all(|&l| c.contains(l)));
    Ok(CaseResult {
        outcome: judge_case(&case.case_id, report.as_ref(), &case.ground_truth),
        cost,
        report,
        context,
        error,
        truth_retained,
    })
}

pub struct EvalRun {
    pub results: Vec<CaseResult>,
    pub metrics: Metrics<f64>,
    pub costs: CostSummary<f64>,
}

impl EvalRun {
    pub fn cost_records(&self) -> Vec<CostRecord> {
        self.results.iter().map(|r| r.cost.clone()).collect()
    }

    /// Mean selected-payload tokens over cases that reached the prompt.
    pub fn avg_payload_tokens(&self) -> f64 {
        let sizes: Vec<usize> = self
            .results
            .iter()
            .filter_map(|r| r.context.as_ref().map(|c| c.payload_tokens))
            .collect();
        if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        }
    }

    pub fn summary_json(&self, cfg: &RunConfig, skipped: &[SkippedCase]) -> serde_json::Value {
        let cases: Vec<serde_json::Value> = self
            .results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "case_id": r.outcome.case_id,
                    "verdict": r.outcome.verdict,
                    "overlap": r.outcome.overlap,
                    "query_rounds": r.cost.query_rounds,
                    "payload_tokens": r.context.as_ref().map(|c| c.payload_tokens),
                    "truth_retained": r.truth_retained,
                    "root_cause": r.report.as_ref().map(|rep| rep.root_cause.clone()),
                    "error": r.error,
                })
            })
            .collect();
        serde_json::json!({
            "config": cfg,
            "metrics": self.metrics,
            "cost": self.costs,
            "avg_payload_tokens": self.avg_payload_tokens(),
            "skipped": skipped,
            "cases": cases,
        })
    }
}

/// Evaluates every case on a pool of `jobs` workers (0 = one per core).
/// Results keep dataset order.
pub fn run_eval(
    cases: &[CaseBundle],
    cfg: &RunConfig,
    few_shots: &[FewShot],
    make_backend: &(dyn Fn(&CaseBundle) -> Box<dyn LlmBackend> + Sync),
    tok: &dyn Tokenizer,
    jobs: usize,
) -> Result<EvalRun, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let results: Vec<CaseResult> = pool.install(|| {
        cases
            .par_iter()
            .map(|case| {
                let backend = make_backend(case);
                evaluate_case(case, cfg, few_shots, backend.as_ref(), tok)
            })
            .collect::<Result<_, _>>()
    })?;
    let outcomes: Vec<EvalOutcome> = results.iter().map(|r| r.outcome.clone()).collect();
    let records: Vec<CostRecord> = results.iter().map(|r| r.cost.clone()).collect();
    Ok(EvalRun {
        metrics: aggregate::<f64>(&outcomes)?,
        costs: cost_report::<f64>(&records)?,
        results,
    })
}

pub fn write_costs_csv(path: &Path, records: &[CostRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rca::{LineRange, LogAnalysis};
    use num_rational::Ratio;
    use proptest::prelude::*;

    fn report(ranges: &[(usize, usize)]) -> RcaReport {
        RcaReport {
            log_analysis: vec![LogAnalysis {
                error_logs: ranges.iter().map(|&(a, b)| LineRange::new(a, b)).collect(),
                analysis: "x".into(),
            }],
            root_cause: vec!["y".into()],
        }
    }

    fn truth(r: std::ops::RangeInclusive<usize>) -> BTreeSet<usize> {
        r.collect()
    }

    #[test]
    fn judge_examples() {
        let t = truth(10..=19);
        let o = judge_case("a", Some(&report(&[(10, 18)])), &t);
        assert_eq!((o.verdict, o.overlap), (Verdict::TP, 0.9));
        assert_eq!(judge_case("b", Some(&report(&[(30, 40)])), &t).verdict, Verdict::FP);
        assert_eq!(judge_case("c", None, &t).verdict, Verdict::FN);
        assert_eq!(judge_case("d", Some(&report(&[])), &t).verdict, Verdict::FN);
    }

    fn outcome(v: Verdict) -> EvalOutcome {
        EvalOutcome {
            case_id: String::new(),
            verdict: v,
            overlap: 0.0,
            matched: 0,
            truth_lines: 1,
            predicted_lines: 0,
        }
    }

    #[test]
    fn aggregate_examples() {
        let mut outs: Vec<_> = (0..8).map(|_| outcome(Verdict::TP)).collect();
        outs.extend((0..2).map(|_| outcome(Verdict::FP)));
        let m = aggregate::<Ratio<i64>>(&outs).unwrap();
        assert_eq!(m.precision, Ratio::new(4, 5));
        assert_eq!(m.recall, Ratio::from_integer(1));
        assert_eq!(m.f1, Ratio::new(8, 9));

        let all_fn = vec![outcome(Verdict::FN); 3];
        let m = aggregate::<f64>(&all_fn).unwrap();
        assert_eq!((m.recall, m.precision), (0.0, 0.0));
        assert!(m.precision_undefined && !m.recall_undefined);
        assert!(aggregate::<f64>(&[]).is_err());
    }

    #[test]
    fn cost_examples() {
        let rec = |t: usize| CostRecord {
            case_id: String::new(),
            prompt_tokens: t,
            completion_tokens: 0,
            query_rounds: 1,
        };
        let s = cost_report::<f64>(&[rec(10_000), rec(20_000)]).unwrap();
        assert_eq!(s.avg_tokens, 15_000.0);
        assert_eq!(s.avg_queries, 1.0);
        assert!((s.token_variability - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(cost_report::<f64>(&[rec(5)]).unwrap().token_variability, 0.0);
        assert!(cost_report::<f64>(&[]).is_err());
    }

    fn write_case(root: &Path, id: &str, log: &str, ann: &str) {
        let dir = root.join(id);
        std::fs::create_dir_all(dir.join("success")).unwrap();
        std::fs::write(dir.join("failed.log"), log).unwrap();
        std::fs::write(dir.join("success/01.log"), "ok\n").unwrap();
        if !ann.is_empty() {
            std::fs::write(dir.join("annotations.json"), ann).unwrap();
        }
    }

    #[test]
    fn dataset_loading() {
        let tmp = tempfile::tempdir().unwrap();
        let ann = r#"{"ground_truth_lines":[2],"root_cause":"boom"}"#;
        write_case(tmp.path(), "c1", "a\nerror b\n", ann);
        write_case(tmp.path(), "c2", "a\nerror b\n", ann);
        write_case(tmp.path(), "c3", "a\n", "");
        write_case(tmp.path(), "c4", "a\n", r#"{"ground_truth_lines":[0],"root_cause":"x"}"#);
        let ds = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds.cases.len(), 2);
        assert_eq!(ds.skipped.len(), 2);
        assert_eq!(ds.cases[0].success_logs.len(), 1);

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(empty.path()), Err(EvalError::EmptyDataset(_))));
    }

    proptest! {
        #[test]
        fn judge_matches_set_oracle(
            t in proptest::collection::btree_set(1usize..60, 1..20),
            p in proptest::collection::btree_set(1usize..60, 0..20),
        ) {
            let r = report(&p.iter().map(|&l| (l, l)).collect::<Vec<_>>());
            let o = judge_case("x", Some(&r), &t);
            let hits = p.intersection(&t).count();
            let expect = if p.is_empty() {
                Verdict::FN
            } else if hits as f64 / t.len() as f64 >= 0.9 - 1e-12 {
                Verdict::TP
            } else {
                Verdict::FP
            };
            prop_assert_eq!(o.verdict, expect);
            prop_assert_eq!(o.matched, hits);
        }

        #[test]
        fn aggregate_is_permutation_invariant(
            vs in proptest::collection::vec(0u8..3, 1..40),
            seed in any::<u64>(),
        ) {
            let to = |v: u8| outcome([Verdict::TP, Verdict::FP, Verdict::FN][v as usize]);
            let outs: Vec<_> = vs.iter().map(|&v| to(v)).collect();
            let mut shuffled = outs.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = aggregate::<Ratio<i64>>(&outs).unwrap();
            let b = aggregate::<Ratio<i64>>(&shuffled).unwrap();
            prop_assert_eq!(a.tp + a.fp + a.fn_, outs.len());
            prop_assert_eq!(a, b);
        }
    }
}
