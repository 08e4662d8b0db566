//! Command-line interface.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 when the
//! executor fails, 1 for anything else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{run_bench, BenchConfig};
use crate::corpus::{load_pool, PromptTemplate, TestPool};
use crate::distance::{Compressor, DistanceFunction, EmbeddingTable};
use crate::execution::{
    read_records, summary_from_cache, BackendKind, ExecError, ExecutionCache, Executor, ExecutorConfig, MockRules,
    VerdictSummary, DEFAULT_API_KEY_ENV, DEFAULT_MOCK_REPETITIONS,
};
use crate::manifest::{file_digest, RunManifest};
use crate::report::{build_report, ReportInput};
use crate::selection::{adaptive_select, random_select, ExecutionFailure, Ordering, SelectionConfig, SelectionError};
use crate::synthetic::{generate, SyntheticSpec};
use crate::tsdm::tsdm_select;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_EXECUTOR: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Executor(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Executor(_) => EXIT_EXECUTOR,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Executor(m) | CliError::Other(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn exec_err(e: ExecError) -> CliError {
    match e {
        ExecError::Config(_) | ExecError::Render { .. } => CliError::Config(e.to_string()),
        _ => CliError::Executor(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "promptdiv",
    version,
    about = "Diversity-based test selection for prompt templates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select and prioritize test inputs, execute them and write an ordering plus a report.
    Select(SelectArgs),
    /// Recompute a report for an existing ordering from cached runs only.
    Evaluate(EvaluateArgs),
    /// Time the selection methods on synthetic pools.
    Bench(BenchArgs),
    /// Write a synthetic clustered pool, template and mock rules.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Random,
    ArtNcd,
    ArtCharBigram,
    ArtWordBigram,
    ArtEmbed,
    Tsdm,
}

pub const METHODS: [&str; 6] = [
    "random",
    "art-ncd",
    "art-2gram-char",
    "art-2gram-word",
    "art-embed",
    "tsdm",
];

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "random" => Method::Random,
            "art-ncd" => Method::ArtNcd,
            "art-2gram-char" => Method::ArtCharBigram,
            "art-2gram-word" => Method::ArtWordBigram,
            "art-embed" => Method::ArtEmbed,
            "tsdm" => Method::Tsdm,
            other => {
                return Err(CliError::Config(format!(
                    "unknown method {other:?}; valid methods: {}",
                    METHODS.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Args)]
pub struct ExecutorArgs {
    /// mock, replay or http.
    #[arg(long, default_value = "mock")]
    pub executor: String,
    /// Runs per input (default 4 for mock and replay, 1 for http).
    #[arg(long)]
    pub repetitions: Option<u32>,
    /// Passing threshold on the correctness ratio.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// JSONL execution cache; runs found here are reused.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub max_parallel: usize,
    /// JSON failure and vocabulary rules for the mock executor.
    #[arg(long)]
    pub mock_rules: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub mock_seed: u64,
    /// Chat-completions URL for the http executor.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    pub api_key_env: String,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    /// One of random, art-ncd, art-2gram-char, art-2gram-word, art-embed, tsdm.
    #[arg(long)]
    pub method: String,
    /// Number of inputs to select.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = crate::selection::DEFAULT_CANDIDATES)]
    pub candidates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep failing inputs out of the reference set.
    #[arg(long)]
    pub selective_refset: bool,
    /// Embedding table, required by art-embed.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub exec: ExecutorArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub ordering: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MOCK_REPETITIONS)]
    pub repetitions: u32,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Label stored in the report.
    #[arg(long, default_value = "evaluate")]
    pub method: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1000, 2000, 4000])]
    pub art_pool_sizes: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub art_n: usize,
    #[arg(long, default_value_t = 200)]
    pub tsdm_pool_size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [90.0, 50.0, 10.0])]
    pub tsdm_percentages: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub tsdm_words: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Write the timing report here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Select(a) => cmd_select(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn digest_of(path: &Path) -> Result<String, CliError> {
    file_digest(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn distance_for(method: Method, embeddings: Option<&Path>) -> Result<Option<DistanceFunction>, CliError> {
    Ok(match method {
        Method::Random | Method::Tsdm => None,
        Method::ArtNcd => Some(DistanceFunction::ncd()),
        Method::ArtCharBigram => Some(DistanceFunction::char_bigram()),
        Method::ArtWordBigram => Some(DistanceFunction::word_bigram()),
        Method::ArtEmbed => {
            let path = embeddings.ok_or_else(|| config_err("art-embed requires --embeddings"))?;
            Some(DistanceFunction::Embedding(Arc::new(
                EmbeddingTable::load(path).map_err(config_err)?,
            )))
        }
    })
}

fn executor_config(a: &ExecutorArgs) -> Result<ExecutorConfig, CliError> {
    let kind = BackendKind::from_str(&a.executor).map_err(exec_err)?;
    let mut cfg = ExecutorConfig::new(kind);
    if let Some(r) = a.repetitions {
        cfg.repetitions = r;
    }
    cfg.tau = a.tau;
    cfg.temperature = a.temperature;
    cfg.max_parallel = a.max_parallel;
    cfg.mock_seed = a.mock_seed;
    cfg.cache_path = a.cache.clone();
    cfg.api_key_env = a.api_key_env.clone();
    if kind == BackendKind::Http {
        cfg.endpoint_url = a.endpoint.clone().unwrap_or_default();
        cfg.model_name = a.model.clone().unwrap_or_default();
    }
    cfg.validate().map_err(exec_err)?;
    Ok(cfg)
}

/// Executes `ordering` front to back, stopping at the first executor error.
fn execute_in_order(
    pool: &TestPool,
    ordering: &Ordering,
    executor: &dyn Executor,
) -> (Vec<VerdictSummary>, Option<ExecutionFailure>) {
    let mut verdicts = Vec::with_capacity(ordering.len());
    for (i, id) in ordering.ids().iter().enumerate() {
        let test = pool.get(id).expect("orderings only hold pool ids");
        match executor.execute(test) {
            Ok(v) => verdicts.push(v),
            Err(e) => {
                return (
                    verdicts,
                    Some(ExecutionFailure {
                        step: i + 1,
                        test_id: test.id.clone(),
                        message: e.to_string(),
                    }),
                )
            }
        }
    }
    (verdicts, None)
}

fn prefix(ordering: &Ordering, len: usize) -> Ordering {
    Ordering {
        steps: ordering.steps[..len].to_vec(),
        config_digest: ordering.config_digest.clone(),
    }
}

pub fn cmd_select(a: &SelectArgs) -> Result<(), CliError> {
    let method = Method::from_str(&a.method)?;
    if a.n == 0 {
        return Err(config_err("--n must be at least 1"));
    }
    let exec_cfg = executor_config(&a.exec)?;
    let distance = distance_for(method, a.embeddings.as_deref())?;
    let pool = load_pool(&a.pool).map_err(config_err)?;
    if a.n > pool.len() {
        return Err(config_err(format!("--n {} exceeds pool size {}", a.n, pool.len())));
    }
    if method == Method::Tsdm && a.n < 2 {
        return Err(config_err("tsdm needs --n of at least 2"));
    }
    let template = PromptTemplate::load(&a.template).map_err(config_err)?;
    let rules = match &a.exec.mock_rules {
        Some(p) => Some(MockRules::load(p).map_err(exec_err)?),
        None => None,
    };

    let mut manifest = RunManifest::new("select", serde_json::Value::Null, Compressor::default().id());
    manifest.add_file("pool", &a.pool).map_err(|e| io_err(&a.pool, e))?;
    manifest
        .add_file("template", &a.template)
        .map_err(|e| io_err(&a.template, e))?;
    if let Some(p) = &a.exec.mock_rules {
        manifest.file_digests.insert("mock_rules".into(), digest_of(p)?);
    }
    if let Some(p) = &a.embeddings {
        manifest.file_digests.insert("embeddings".into(), digest_of(p)?);
    }
    if let Some(p) = &a.exec.cache {
        if p.exists() {
            manifest.file_digests.insert("cache_initial".into(), digest_of(p)?);
        }
    }
    manifest.seeds = vec![a.seed, a.exec.mock_seed];
    manifest.config = serde_json::json!({
        "method": a.method,
        "n": a.n,
        "candidates": a.candidates,
        "seed": a.seed,
        "tau": a.exec.tau,
        "selective_refset": a.selective_refset,
        "distance": distance.as_ref().map(|d| d.describe()),
        "executor": {
            "kind": exec_cfg.kind,
            "repetitions": exec_cfg.repetitions,
            "temperature": exec_cfg.temperature,
            "model_name": exec_cfg.model_name,
            "endpoint_url": exec_cfg.endpoint_url,
            "api_key_env": exec_cfg.api_key_env,
            "max_parallel": exec_cfg.max_parallel,
            "mock_seed": exec_cfg.mock_seed,
        },
    });

    let executor = exec_cfg.build(template, rules.as_ref()).map_err(exec_err)?;
    let (ordering, verdicts, failure) = match (method, distance) {
        (Method::Random, _) => {
            let ordering = random_select(&pool, a.n, a.seed).map_err(config_err)?;
            let (v, f) = execute_in_order(&pool, &ordering, &executor);
            (ordering, v, f)
        }
        (Method::Tsdm, _) => {
            let run = tsdm_select(&pool, a.n, &Compressor::default()).map_err(config_err)?;
            let (v, f) = execute_in_order(&pool, &run.ordering, &executor);
            (run.ordering, v, f)
        }
        (_, Some(d)) => {
            let cfg = SelectionConfig::new(a.n, d)
                .with_candidates(a.candidates)
                .with_seed(a.seed)
                .with_selective_refset(a.selective_refset, a.exec.tau);
            let run = adaptive_select(&pool, &cfg, &executor).map_err(|e| match e {
                SelectionError::Distance { .. } => CliError::Other(e.to_string()),
                other => config_err(other),
            })?;
            (run.ordering, run.verdicts, run.failure)
        }
        (_, None) => unreachable!("every ART method has a distance"),
    };

    ensure_dir(&a.out_dir)?;
    let manifest_digest = manifest.digest();
    let ordering_path = a.out_dir.join("ordering.jsonl");
    ordering.save(&ordering_path).map_err(|e| io_err(&ordering_path, e))?;
    let evaluated = prefix(&ordering, verdicts.len());
    let report = build_report(&ReportInput {
        method: &a.method,
        seed: Some(a.seed),
        ordering: &evaluated,
        verdicts: &verdicts,
        cache: executor.cache(),
        repetitions: executor.repetitions(),
        tau: a.exec.tau,
        manifest_digest: &manifest_digest,
        execution_failure: failure.as_ref(),
    })
    .map_err(|e| CliError::Other(e.to_string()))?;
    write_json(&a.out_dir.join("report.json"), &report)?;
    write_json(&a.out_dir.join("manifest.json"), &manifest)?;

    if let Some(f) = failure {
        return Err(CliError::Executor(format!(
            "stopped at step {} ({}): {}",
            f.step, f.test_id, f.message
        )));
    }
    eprintln!(
        "selected {} of {} inputs with {}; apfd {}",
        ordering.len(),
        pool.len(),
        a.method,
        report.apfd.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.tau) || a.repetitions == 0 {
        return Err(config_err("--tau must lie in [0, 1] and --repetitions be positive"));
    }
    let pool = load_pool(&a.pool).map_err(config_err)?;
    let ordering = Ordering::load(&a.ordering).map_err(config_err)?;
    if !a.cache.exists() {
        return Err(config_err(format!("cache file {} does not exist", a.cache.display())));
    }
    // Read-only: records go into an in-memory cache so the file is never touched.
    let cache = ExecutionCache::in_memory();
    for rec in read_records(&a.cache).map_err(exec_err)? {
        cache.append(rec).map_err(exec_err)?;
    }
    let mut verdicts = Vec::with_capacity(ordering.len());
    for id in ordering.ids() {
        let test = pool
            .get(id)
            .ok_or_else(|| config_err(format!("ordering references id {id:?} which is not in the pool")))?;
        verdicts.push(summary_from_cache(&cache, test, a.repetitions, a.tau).map_err(exec_err)?);
    }

    let mut manifest = RunManifest::new(
        "evaluate",
        serde_json::json!({"repetitions": a.repetitions, "tau": a.tau, "method": a.method}),
        Compressor::default().id(),
    );
    manifest.file_digests.insert("pool".into(), digest_of(&a.pool)?);
    manifest
        .file_digests
        .insert("ordering".into(), ordering.config_digest.clone());
    manifest.file_digests.insert("cache".into(), digest_of(&a.cache)?);
    let manifest_digest = manifest.digest();

    let report = build_report(&ReportInput {
        method: &a.method,
        seed: None,
        ordering: &ordering,
        verdicts: &verdicts,
        cache: &cache,
        repetitions: a.repetitions,
        tau: a.tau,
        manifest_digest: &manifest_digest,
        execution_failure: None,
    })
    .map_err(|e| CliError::Other(e.to_string()))?;
    ensure_dir(&a.out_dir)?;
    write_json(&a.out_dir.join("report.json"), &report)?;
    write_json(&a.out_dir.join("manifest.json"), &manifest)?;
    eprintln!(
        "evaluated {} inputs; apfd {}",
        ordering.len(),
        report.apfd.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let cfg = BenchConfig {
        art_pool_sizes: a.art_pool_sizes.clone(),
        art_n: a.art_n,
        tsdm_pool_size: a.tsdm_pool_size,
        tsdm_percentages: a.tsdm_percentages.clone(),
        tsdm_words_per_input: a.tsdm_words,
        seed: a.seed,
        repeats: a.repeats,
    };
    let report = run_bench(&cfg).map_err(|e| match e {
        crate::bench::BenchError::Config(m) => CliError::Config(m),
        other => CliError::Other(other.to_string()),
    })?;
    for t in &report.timings {
        println!(
            "{:<18} pool {:>5}  n {:>4}  {:>9.3}s",
            t.method, t.pool_size, t.n_target, t.seconds
        );
    }
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.size < 100 {
        return Err(config_err("--size must be at least 100"));
    }
    let w = generate(&SyntheticSpec::scaled(a.size, a.seed));
    ensure_dir(&a.out_dir)?;
    let pool_path = a.out_dir.join("pool.jsonl");
    w.pool.save(&pool_path).map_err(|e| io_err(&pool_path, e))?;
    let template_path = a.out_dir.join("template.txt");
    fs::write(&template_path, format!("{}\n", w.template.text())).map_err(|e| io_err(&template_path, e))?;
    write_json(&a.out_dir.join("mock_rules.json"), &w.rules)?;
    eprintln!(
        "wrote {} inputs ({} failing) to {}",
        w.pool.len(),
        w.failing_ids().len(),
        a.out_dir.display()
    );
    Ok(())
}
