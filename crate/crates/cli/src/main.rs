use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use triage_core::config::to_canonical_json;
use triage_core::drain::mine_templates;
use triage_core::eval::{load_dataset, run_eval, write_costs_csv, CaseBundle};
use triage_core::ingest::load_log;
use triage_core::knowledge::{load_jsonl, HashedBowEmbedder, KbConfig};
use triage_core::llm::{backend_for, LlmBackend, OracleBackend};
use triage_core::rca::{build_rca_prompt, default_few_shots, parse_report, run_rca, select_context, RcaError};
use triage_core::solution::{run_solution, PassthroughReranker, SolutionError, SolutionInputs};
use triage_core::synth::{generate_corpus, write_corpus, DEFAULT_CASES, DEFAULT_SEED};
use triage_core::{Excerpt, KnowledgeStore, Outcome, RegexTokenizer, RunConfig, TemplateStore, ToolRegistry};

#[derive(Parser)]
#[command(name = "cicd-triage", version, about = "Root-cause analysis and remediation for failed CI/CD runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add success-run templates to a task's store (logs oldest first).
    MineTemplates {
        #[arg(long)]
        task_key: String,
        #[arg(long)]
        store_dir: PathBuf,
        /// Run ids, one per log; defaults to each file's stem.
        #[arg(long = "run-id")]
        run_ids: Vec<String>,
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Select key log blocks from a failed run and ask the model for a report.
    Analyze {
        failed_log: PathBuf,
        #[arg(long)]
        task_key: String,
        #[arg(long)]
        store_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail if no template store exists for the task.
        #[arg(long)]
        require_store: bool,
        /// Write the prompt and stop before querying the model.
        #[arg(long)]
        dry_prompt: bool,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Retrieve knowledge for a report and produce a remediation plan.
    Solve {
        report: PathBuf,
        /// Knowledge index directory; without it the plan is advice only.
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Tool registry; defaults to the bundled stub tools.
        #[arg(long)]
        tools: Option<PathBuf>,
        /// Selected blocks written by `analyze`; defaults to the file next
        /// to the report.
        #[arg(long)]
        blocks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run tools for real instead of a dry run.
        #[arg(long)]
        execute: bool,
        /// Required together with --execute.
        #[arg(long)]
        confirm: bool,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Chunk and index a JSON-Lines knowledge base.
    IngestKb {
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Evaluate a labelled dataset.
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the closed-world mock that quotes annotated lines.
        #[arg(long)]
        mock_oracle: bool,
        /// Worker threads; 0 means one per logical core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Write the deterministic synthetic evaluation corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_CASES)]
        cases: usize,
    },
}

/// Overrides applied on top of the config file.
#[derive(Args, Default)]
struct Knobs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    token_limit: Option<usize>,
    /// Context lines before a key line.
    #[arg(short = 'm', long = "before")]
    m: Option<usize>,
    /// Context lines after a key line.
    #[arg(short = 'n', long = "after")]
    n: Option<usize>,
    /// Success runs kept per task.
    #[arg(short = 'x', long = "retention")]
    retention: Option<usize>,
    #[arg(long)]
    tail_fraction: Option<f64>,
    #[arg(long)]
    tail_min_lines: Option<usize>,
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    no_expansion: bool,
    #[arg(long)]
    no_pruning: bool,
    /// Model endpoint (`http(s)://...` or `mock:...`).
    #[arg(long)]
    llm_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_retries: Option<usize>,
}

impl Knobs {
    /// Defaults, then the config file, then environment, then flags.
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(Failure::input)?,
            None => RunConfig::default(),
        };
        cfg.llm = cfg.llm.with_env();
        set(&mut cfg.pruner.alpha, self.alpha);
        set(&mut cfg.pruner.beta, self.beta);
        set(&mut cfg.pruner.gamma, self.gamma);
        set(&mut cfg.pruner.token_limit, self.token_limit);
        set(&mut cfg.filter.m, self.m);
        set(&mut cfg.pruner.m, self.m);
        set(&mut cfg.filter.n, self.n);
        set(&mut cfg.pruner.n, self.n);
        set(&mut cfg.store.retention, self.retention);
        set(&mut cfg.filter.tail_fraction, self.tail_fraction);
        set(&mut cfg.filter.tail_min_lines, self.tail_min_lines);
        set(&mut cfg.llm.temperature, self.temperature);
        set(&mut cfg.llm.max_retries, self.max_retries);
        if let Some(url) = &self.llm_url {
            cfg.llm.endpoint = url.clone();
        }
        if let Some(model) = &self.model {
            cfg.llm.model = model.clone();
        }
        cfg.ablation.no_filter |= self.no_filter;
        cfg.ablation.no_expansion |= self.no_expansion;
        cfg.ablation.no_pruning |= self.no_pruning;
        cfg.validate().map_err(Failure::input)?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn input(e: impl Into<anyhow::Error>) -> Self {
        Failure { code: 2, error: e.into() }
    }

    fn upstream(e: impl Into<anyhow::Error>) -> Self {
        Failure { code: 3, error: e.into() }
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, contents: &str) -> CmdResult {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::input)?;
    }
    std::fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::input)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = to_canonical_json(value).map_err(Failure::input)?;
    write_file(path, &text)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::input)
}

fn mine(task_key: &str, store_dir: &Path, run_ids: &[String], logs: &[PathBuf], cfg: &RunConfig) -> CmdResult {
    if !run_ids.is_empty() && run_ids.len() != logs.len() {
        return Err(Failure::input(anyhow!("{} run ids given for {} logs", run_ids.len(), logs.len())));
    }
    let mut store = match TemplateStore::load(store_dir, task_key).map_err(Failure::input)? {
        Some(s) => s,
        None => TemplateStore::new(task_key, cfg.store.retention),
    };
    for (i, path) in logs.iter().enumerate() {
        let run_id = run_ids
            .get(i)
            .cloned()
            .unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        let log = load_log(path, &run_id, task_key, Outcome::Success).map_err(Failure::input)?;
        let templates = mine_templates(&log, &cfg.drain);
        log::info!("{}: {} templates", path.display(), templates.len());
        store.update(run_id, templates).map_err(Failure::input)?;
    }
    let path = store.save(store_dir).map_err(Failure::input)?;
    println!("{}", path.display());
    Ok(())
}

fn rca_failure(e: &RcaError) -> u8 {
    match e {
        RcaError::Llm(_) | RcaError::InvalidOutput { .. } => 3,
        RcaError::EmptyLog | RcaError::NoCandidates | RcaError::Prompt(_) => 2,
    }
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    failed_log: &Path,
    task_key: &str,
    store_dir: &Path,
    out: &Path,
    require_store: bool,
    dry_prompt: bool,
    cfg: &RunConfig,
) -> CmdResult {
    let tok = RegexTokenizer;
    let run_id = failed_log.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let failed = load_log(failed_log, &run_id, task_key, Outcome::Failed).map_err(Failure::input)?;
    let store = match TemplateStore::load(store_dir, task_key).map_err(Failure::input)? {
        Some(s) => s,
        None if require_store => {
            return Err(Failure::input(anyhow!(
                "no template store for {task_key} in {}",
                store_dir.display()
            )))
        }
        None => {
            log::warn!("no template store for {task_key}; every line counts as new");
            TemplateStore::new(task_key, cfg.store.retention)
        }
    };
    write_json(&out.join("config.json"), cfg)?;
    let few_shots = default_few_shots();

    if dry_prompt {
        let context = select_context(&failed, &store, cfg, &tok).map_err(|e| Failure { code: rca_failure(&e), error: e.into() })?;
        let prompt = build_rca_prompt(&context.excerpt, &few_shots, task_key, cfg.pruner.token_limit, &cfg.prompt, &tok)
            .map_err(Failure::input)?;
        write_file(&out.join("selected_blocks.txt"), &context.excerpt.render())?;
        write_file(&out.join("prompt.txt"), &prompt.render())?;
        write_json(&out.join("context.json"), &context)?;
        println!("{}", out.join("prompt.txt").display());
        return Ok(());
    }

    let backend = backend_for(&cfg.llm).map_err(Failure::input)?;
    match run_rca(&failed, &store, cfg, &few_shots, backend.as_ref(), &tok) {
        Ok(run) => {
            write_json(&out.join("rca_report.json"), &run.report)?;
            write_file(&out.join("selected_blocks.txt"), &run.context.excerpt.render())?;
            write_json(&out.join("cost.json"), &json!({"cost": run.cost, "context": run.context, "config": cfg}))?;
            println!("{}", out.join("rca_report.json").display());
            Ok(())
        }
        Err(f) => {
            if let Some(ctx) = &f.context {
                write_file(&out.join("selected_blocks.txt"), &ctx.excerpt.render())?;
            }
            write_json(
                &out.join("cost.json"),
                &json!({"cost": f.cost, "context": f.context, "config": cfg, "error": f.error.to_string()}),
            )?;
            Err(Failure { code: rca_failure(&f.error), error: f.error.into() })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn solve(
    report_path: &Path,
    kb: Option<&Path>,
    tools: Option<&Path>,
    blocks: Option<&Path>,
    out: &Path,
    execute: bool,
    confirm: bool,
    cfg: &RunConfig,
) -> CmdResult {
    if execute && !confirm {
        return Err(Failure::input(anyhow!("--execute runs tools for real; add --confirm to proceed")));
    }
    let tok = RegexTokenizer;
    let blocks_path = blocks
        .map(Path::to_path_buf)
        .unwrap_or_else(|| report_path.with_file_name("selected_blocks.txt"));
    let excerpt = if blocks_path.is_file() {
        Excerpt::parse(&read_text(&blocks_path)?)
    } else {
        if blocks.is_some() {
            return Err(Failure::input(anyhow!("{} not found", blocks_path.display())));
        }
        log::warn!("no selected blocks next to the report; the query uses root causes only");
        Excerpt::default()
    };
    let log_len = excerpt.lines().map(|l| l.number).max().unwrap_or(usize::MAX);
    let report = parse_report(&read_text(report_path)?, log_len)
        .with_context(|| format!("invalid report {}", report_path.display()))
        .map_err(Failure::input)?;
    let store = match kb {
        Some(dir) => KnowledgeStore::load(dir, Arc::new(HashedBowEmbedder::default())).map_err(Failure::input)?,
        None => {
            log::warn!("no knowledge base given; the plan will not cite documents");
            KnowledgeStore::empty()
        }
    };
    let registry = match tools {
        Some(path) => ToolRegistry::load(path).map_err(Failure::input)?,
        None => ToolRegistry::default(),
    };
    let inputs = SolutionInputs {
        report: &report,
        excerpt: &excerpt,
        store: &store,
        tools: &registry,
        reranker: Arc::new(PassthroughReranker),
    };
    let backend = backend_for(&cfg.llm).map_err(Failure::input)?;
    let run = run_solution(&inputs, cfg, backend.as_ref(), &tok, !execute).map_err(|e| match e {
        SolutionError::Recall(_) => Failure::input(e),
        _ => Failure::upstream(e),
    })?;
    write_json(
        &out.join("solution.json"),
        &json!({
            "plan": run.transcript.plan,
            "query": run.query,
            "candidates": run.candidates,
            "knowledge_included": run.prompt.included,
            "rerank_degraded": run.degraded,
            "dry_run": !execute,
            "cost": run.cost,
            "config": cfg,
        }),
    )?;
    write_json(&out.join("transcript.json"), &run.transcript)?;
    println!("{}", out.join("solution.json").display());
    Ok(())
}

fn ingest_kb(docs: &Path, out: &Path, cfg: &RunConfig) -> CmdResult {
    let docs = load_jsonl(docs).map_err(Failure::input)?;
    let kb_cfg = KbConfig {
        chunk_tokens: cfg.retrieval.chunk_tokens,
        ..KbConfig::default()
    };
    let store = KnowledgeStore::ingest(&docs, &kb_cfg, Arc::new(HashedBowEmbedder::default()), &RegexTokenizer)
        .map_err(Failure::input)?;
    store.save(out).map_err(Failure::input)?;
    println!("{} documents, {} chunks indexed in {}", docs.len(), store.len(), out.display());
    Ok(())
}

fn eval(dataset: &Path, out: &Path, mock_oracle: bool, jobs: usize, cfg: &RunConfig) -> CmdResult {
    let ds = load_dataset(dataset).map_err(Failure::input)?;
    if !mock_oracle {
        backend_for(&cfg.llm).map_err(Failure::input)?;
    }
    let make = |case: &CaseBundle| -> Box<dyn LlmBackend> {
        if mock_oracle {
            Box::new(OracleBackend::new(case.ground_truth.iter().copied()))
        } else {
            backend_for(&cfg.llm).expect("endpoint validated above")
        }
    };
    let run = run_eval(&ds.cases, cfg, &default_few_shots(), &make, &RegexTokenizer, jobs).map_err(Failure::input)?;
    for r in &run.results {
        let dir = out.join("cases").join(&r.outcome.case_id);
        if let Some(report) = &r.report {
            write_json(&dir.join("rca_report.json"), report)?;
        }
        if let Some(ctx) = &r.context {
            write_file(&dir.join("selected_blocks.txt"), &ctx.excerpt.render())?;
        }
    }
    write_json(&out.join("metrics.json"), &run.summary_json(cfg, &ds.skipped))?;
    write_costs_csv(&out.join("costs.csv"), &run.cost_records()).map_err(Failure::input)?;
    let m = &run.metrics;
    println!(
        "cases {} tp {} fp {} fn {} precision {:.4} recall {:.4} f1 {:.4} avg_queries {:.2}",
        m.cases, m.tp, m.fp, m.fn_, m.precision, m.recall, m.f1, run.costs.avg_queries
    );
    let upstream = run.results.iter().filter(|r| r.error.is_some()).count();
    if upstream > 0 {
        log::warn!("{upstream} cases produced no report");
    }
    Ok(())
}

fn synth(out: &Path, seed: u64, cases: usize) -> CmdResult {
    write_corpus(out, &generate_corpus(seed, cases)).map_err(Failure::input)?;
    println!("{cases} cases written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::MineTemplates { task_key, store_dir, run_ids, logs, knobs } => {
            mine(&task_key, &store_dir, &run_ids, &logs, &knobs.resolve()?)
        }
        Command::Analyze { failed_log, task_key, store_dir, out, require_store, dry_prompt, knobs } => analyze(
            &failed_log,
            &task_key,
            &store_dir,
            &out,
            require_store,
            dry_prompt,
            &knobs.resolve()?,
        ),
        Command::Solve { report, kb, tools, blocks, out, execute, confirm, knobs } => solve(
            &report,
            kb.as_deref(),
            tools.as_deref(),
            blocks.as_deref(),
            &out,
            execute,
            confirm,
            &knobs.resolve()?,
        ),
        Command::IngestKb { docs, out, knobs } => ingest_kb(&docs, &out, &knobs.resolve()?),
        Command::Eval { dataset, out, mock_oracle, jobs, knobs } => eval(&dataset, &out, mock_oracle, jobs, &knobs.resolve()?),
        Command::SynthCorpus { out, seed, cases } => synth(&out, seed, cases),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
