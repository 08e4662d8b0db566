//! Running rendered prompts against a backend, judging outputs and caching runs.
//!
//! A [`PromptExecutor`] renders a test input through its template, asks the
//! backend for `repetitions` completions, appends each run to the
//! [`ExecutionCache`] and summarizes the runs into a [`VerdictSummary`].
//! Runs already present in the cache are reused, so the replay backend is
//! simply a backend that never answers.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{canonical_text, CorpusError, PromptTemplate, TestInput};

pub const DEFAULT_API_KEY_ENV: &str = "PROMPTDIV_API_KEY";
pub const DEFAULT_MOCK_REPETITIONS: u32 = 4;
pub const DEFAULT_HTTP_REPETITIONS: u32 = 1;
pub const HTTP_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("rendering {test_id}: {source}")]
    Render {
        test_id: String,
        #[source]
        source: CorpusError,
    },
    #[error("backend failure for ({test_id}, run {run_index}): {message}")]
    Backend {
        test_id: String,
        run_index: u32,
        message: String,
    },
    #[error("replay cache has no record for ({test_id}, run {run_index})")]
    CacheMiss { test_id: String, run_index: u32 },
    #[error("cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error("invalid executor configuration: {0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// Judging
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    Unlabeled,
}

impl Verdict {
    fn as_flag(self) -> Option<bool> {
        match self {
            Verdict::Correct => Some(true),
            Verdict::Incorrect => Some(false),
            Verdict::Unlabeled => None,
        }
    }

    fn from_flag(flag: Option<bool>) -> Self {
        match flag {
            Some(true) => Verdict::Correct,
            Some(false) => Verdict::Incorrect,
            None => Verdict::Unlabeled,
        }
    }
}

fn fold_and_collapse(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Substring match after lowercasing and collapsing whitespace runs.
/// An empty expected answer yields [`Verdict::Unlabeled`].
pub fn judge(output: &str, expected: &str) -> Verdict {
    let expected = fold_and_collapse(expected);
    if expected.is_empty() {
        return Verdict::Unlabeled;
    }
    if fold_and_collapse(output).contains(&expected) {
        Verdict::Correct
    } else {
        Verdict::Incorrect
    }
}

pub fn is_correct(output: &str, expected: &str) -> bool {
    judge(output, expected) == Verdict::Correct
}

// ---------------------------------------------------------------------------
// Records and summaries
// ---------------------------------------------------------------------------

/// One cached run. `correct` is `null` for unlabeled inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub test_id: String,
    pub run_index: u32,
    pub output: String,
    pub correct: Option<bool>,
    pub latency_ms: u64,
    pub backend: String,
    pub model_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictSummary {
    pub test_id: String,
    pub n_runs: u32,
    pub correct_runs: u32,
    pub correctness_ratio: f64,
    pub passing: bool,
    pub unlabeled: bool,
}

impl VerdictSummary {
    pub fn failing(&self) -> bool {
        !self.passing
    }
}

/// Summarizes per-run verdicts. Unlabeled runs count as correct, which makes
/// an unlabeled input passing for any threshold.
pub fn summarize(test_id: &str, verdicts: &[Verdict], tau: f64) -> VerdictSummary {
    let n_runs = verdicts.len() as u32;
    assert!(n_runs > 0, "summary needs at least one run");
    let unlabeled = verdicts.iter().all(|v| *v == Verdict::Unlabeled);
    let correct_runs = verdicts.iter().filter(|v| **v != Verdict::Incorrect).count() as u32;
    let correctness_ratio = correct_runs as f64 / n_runs as f64;
    VerdictSummary {
        test_id: test_id.to_string(),
        n_runs,
        correct_runs,
        correctness_ratio,
        passing: correctness_ratio >= tau,
        unlabeled,
    }
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

struct CacheInner {
    records: HashMap<(String, u32), ExecutionRecord>,
    order: Vec<(String, u32)>,
    writer: Option<BufWriter<fs::File>>,
}

/// Append-only store of execution records keyed by `(test_id, run_index)`.
pub struct ExecutionCache {
    path: Option<PathBuf>,
    inner: Mutex<CacheInner>,
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ExecutionRecord>, ExecError> {
    let path = path.as_ref();
    let cache_err = |message: String| ExecError::Cache {
        path: path.display().to_string(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| cache_err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| cache_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExecutionRecord =
            serde_json::from_str(&line).map_err(|e| cache_err(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

impl ExecutionCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(CacheInner {
                records: HashMap::new(),
                order: Vec::new(),
                writer: None,
            }),
        }
    }

    /// Opens (creating if needed) a cache file. Existing records are loaded;
    /// if a key appears more than once the first record wins.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ExecError> {
        let path = path.as_ref();
        let existing = if path.exists() { read_records(path)? } else { Vec::new() };
        let cache = Self::in_memory();
        {
            let mut inner = cache.inner.lock().expect("cache lock");
            for rec in existing {
                let key = (rec.test_id.clone(), rec.run_index);
                if !inner.records.contains_key(&key) {
                    inner.order.push(key.clone());
                    inner.records.insert(key, rec);
                }
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| ExecError::Cache {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            inner.writer = Some(BufWriter::new(file));
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            ..cache
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, test_id: &str, run_index: u32) -> Option<ExecutionRecord> {
        let inner = self.inner.lock().expect("cache lock");
        inner.records.get(&(test_id.to_string(), run_index)).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records in insertion order.
    pub fn records(&self) -> Vec<ExecutionRecord> {
        let inner = self.inner.lock().expect("cache lock");
        inner.order.iter().map(|k| inner.records[k].clone()).collect()
    }

    /// Outputs of runs `1..=n` for `test_id`, skipping missing runs.
    pub fn outputs(&self, test_id: &str, n: u32) -> Vec<String> {
        (1..=n).filter_map(|i| self.get(test_id, i).map(|r| r.output)).collect()
    }

    /// Appends a record unless its key already exists. Returns whether it was written.
    pub fn append(&self, record: ExecutionRecord) -> Result<bool, ExecError> {
        let mut inner = self.inner.lock().expect("cache lock");
        let key = (record.test_id.clone(), record.run_index);
        if inner.records.contains_key(&key) {
            return Ok(false);
        }
        if let Some(w) = inner.writer.as_mut() {
            let write = serde_json::to_writer(&mut *w, &record)
                .map_err(std::io::Error::from)
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush());
            write.map_err(|e| ExecError::Cache {
                path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                message: e.to_string(),
            })?;
        }
        inner.order.push(key.clone());
        inner.records.insert(key, record);
        Ok(true)
    }
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Produces one completion for a rendered prompt.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn model_name(&self) -> &str {
        ""
    }

    fn complete(&self, test: &TestInput, prompt: &str, run_index: u32) -> Result<String, ExecError>;
}

/// Backend for replaying a cache: every call is a miss.
#[derive(Debug, Default, Clone)]
pub struct ReplayBackend;

impl Backend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn complete(&self, test: &TestInput, _prompt: &str, run_index: u32) -> Result<String, ExecError> {
        Err(ExecError::CacheMiss {
            test_id: test.id.clone(),
            run_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    /// Canonical text contains the substring.
    Contains(String),
    /// Canonical text contains a character of the class: `digit`, `alpha`,
    /// `upper`, `lower`, `whitespace`, `punct`, `non_ascii`, or an explicit
    /// set written as `[abc]`.
    CharClass(String),
}

#[derive(Debug, Clone)]
enum CharMatcher {
    Named(fn(char) -> bool),
    Set(Vec<char>),
}

#[derive(Debug, Clone)]
enum Matcher {
    Contains(String),
    Chars(CharMatcher),
}

impl Matcher {
    fn compile(p: &Predicate) -> Result<Self, ExecError> {
        match p {
            Predicate::Contains(s) if s.is_empty() => Err(ExecError::Config("empty substring predicate".into())),
            Predicate::Contains(s) => Ok(Matcher::Contains(s.clone())),
            Predicate::CharClass(class) => {
                let named: Option<fn(char) -> bool> = match class.as_str() {
                    "digit" => Some(|c| c.is_numeric()),
                    "alpha" => Some(|c| c.is_alphabetic()),
                    "upper" => Some(|c| c.is_uppercase()),
                    "lower" => Some(|c| c.is_lowercase()),
                    "whitespace" => Some(|c| c.is_whitespace()),
                    "punct" => Some(|c| c.is_ascii_punctuation()),
                    "non_ascii" => Some(|c| !c.is_ascii()),
                    _ => None,
                };
                if let Some(f) = named {
                    return Ok(Matcher::Chars(CharMatcher::Named(f)));
                }
                match class.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                    Some(set) if !set.is_empty() => Ok(Matcher::Chars(CharMatcher::Set(set.chars().collect()))),
                    _ => Err(ExecError::Config(format!("unknown character class {class:?}"))),
                }
            }
        }
    }

    fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Contains(s) => text.contains(s.as_str()),
            Matcher::Chars(CharMatcher::Named(f)) => text.chars().any(f),
            Matcher::Chars(CharMatcher::Set(set)) => text.chars().any(|c| set.contains(&c)),
        }
    }
}

/// A run fails with probability `p` when `predicate` matches the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRule {
    #[serde(flatten)]
    pub predicate: Predicate,
    pub p: f64,
}

/// Filler words for inputs matching `predicate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyRule {
    #[serde(flatten)]
    pub predicate: Predicate,
    pub words: Vec<String>,
}

fn default_filler_words() -> usize {
    6
}

/// Mock backend description, loadable from JSON.
///
/// The first matching failure rule decides a run's failure probability;
/// inputs matching no rule always succeed. Reasoning filler is drawn from the
/// first matching vocabulary, else `default_vocabulary`, else the words of
/// the input itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MockRules {
    #[serde(default)]
    pub rules: Vec<FailureRule>,
    #[serde(default)]
    pub vocabularies: Vec<VocabularyRule>,
    #[serde(default)]
    pub default_vocabulary: Vec<String>,
    #[serde(default = "default_filler_words")]
    pub filler_words: usize,
}

impl MockRules {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExecError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ExecError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ExecError::Config(format!("{}: {e}", path.display())))
    }
}

/// Deterministic stand-in for a language model.
#[derive(Debug, Clone)]
pub struct MockBackend {
    rules: Vec<(Matcher, f64)>,
    vocabularies: Vec<(Matcher, Vec<String>)>,
    default_vocabulary: Vec<String>,
    filler_words: usize,
    seed: u64,
}

pub fn mock_executor(rules: &MockRules, seed: u64) -> Result<MockBackend, ExecError> {
    MockBackend::new(rules, seed)
}

fn run_seed(seed: u64, test_id: &str, run_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(test_id.as_bytes());
    h.update([0]);
    h.update(run_index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn perturb(expected: &str) -> String {
    let mut chars: Vec<char> = expected.chars().collect();
    match chars.iter().rposition(|c| c.is_ascii_alphanumeric()) {
        Some(i) => {
            let c = chars[i];
            chars[i] = match c {
                '0'..='8' | 'a'..='y' | 'A'..='Y' => (c as u8 + 1) as char,
                '9' => '0',
                'z' => 'a',
                _ => 'A',
            };
            chars.into_iter().collect()
        }
        None => "no answer".to_string(),
    }
}

impl MockBackend {
    pub fn new(rules: &MockRules, seed: u64) -> Result<Self, ExecError> {
        let mut compiled = Vec::with_capacity(rules.rules.len());
        for r in &rules.rules {
            if !(0.0..=1.0).contains(&r.p) {
                return Err(ExecError::Config(format!("failure probability {} outside [0, 1]", r.p)));
            }
            compiled.push((Matcher::compile(&r.predicate)?, r.p));
        }
        let mut vocabularies = Vec::with_capacity(rules.vocabularies.len());
        for v in &rules.vocabularies {
            vocabularies.push((Matcher::compile(&v.predicate)?, v.words.clone()));
        }
        Ok(Self {
            rules: compiled,
            vocabularies,
            default_vocabulary: rules.default_vocabulary.clone(),
            filler_words: rules.filler_words,
            seed,
        })
    }

    /// Failure probability for an input.
    pub fn failure_probability(&self, input: &TestInput) -> f64 {
        let text = canonical_text(input);
        self.rules
            .iter()
            .find(|(m, _)| m.matches(&text))
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    pub fn generate(&self, input: &TestInput, run_index: u32) -> String {
        let text = canonical_text(input);
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(self.seed, &input.id, run_index));
        let p = self.failure_probability(input);
        // Always draw so that the filler stream does not depend on p.
        let fails = rng.random::<f64>() < p;

        let own_words: Vec<String>;
        let vocab: &[String] = match self.vocabularies.iter().find(|(m, _)| m.matches(&text)) {
            Some((_, words)) => words,
            None if !self.default_vocabulary.is_empty() => &self.default_vocabulary,
            None => {
                own_words = text.split_whitespace().map(str::to_string).collect();
                &own_words
            }
        };
        let filler: Vec<&str> = if vocab.is_empty() {
            Vec::new()
        } else {
            (0..self.filler_words)
                .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
                .collect()
        };
        let reasoning = if filler.is_empty() {
            "Let's think step by step.".to_string()
        } else {
            format!("Let's think step by step. {}.", filler.join(" "))
        };

        if input.expected.is_empty() {
            return reasoning;
        }
        if !fails {
            return format!("{reasoning} {}.", input.expected);
        }
        let wrong = perturb(&input.expected);
        let candidates = [format!("{reasoning} {wrong}."), format!("{wrong}."), String::new()];
        candidates
            .into_iter()
            .find(|o| judge(o, &input.expected) == Verdict::Incorrect)
            .expect("empty output never contains a non-empty expected answer")
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn model_name(&self) -> &str {
        "mock"
    }

    fn complete(&self, test: &TestInput, _prompt: &str, run_index: u32) -> Result<String, ExecError> {
        Ok(self.generate(test, run_index))
    }
}

/// OpenAI-style chat-completions client.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
    attempts: u32,
    backoff: Duration,
    timeout: Duration,
}

impl HttpBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        temperature: f64,
        api_key: Option<String>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature,
            api_key,
            attempts: HTTP_ATTEMPTS,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }

    /// Initial delay between attempts; doubled after each failure.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        })
    }

    fn attempt(&self, agent: &ureq::Agent, body: &serde_json::Value) -> Result<String, String> {
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => format!("HTTP status {code}"),
            other => other.to_string(),
        })?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, test: &TestInput, prompt: &str, run_index: u32) -> Result<String, ExecError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = self.request_body(prompt);
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts {
            match self.attempt(&agent, &body) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
            if attempt < self.attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(ExecError::Backend {
            test_id: test.id.clone(),
            run_index,
            message: format!("{last} (after {} attempts)", self.attempts),
        })
    }
}

// ---------------------------------------------------------------------------
// Executors
// ---------------------------------------------------------------------------

/// Executes one test input and reports its verdict.
pub trait Executor: Sync {
    fn execute(&self, test: &TestInput) -> Result<VerdictSummary, ExecError>;
}

impl<F> Executor for F
where
    F: Fn(&TestInput) -> Result<VerdictSummary, ExecError> + Sync,
{
    fn execute(&self, test: &TestInput) -> Result<VerdictSummary, ExecError> {
        self(test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Replay,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = ExecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "replay" => Ok(BackendKind::Replay),
            "http" => Ok(BackendKind::Http),
            other => Err(ExecError::Config(format!(
                "unknown executor {other:?} (expected mock, replay or http)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub kind: BackendKind,
    pub repetitions: u32,
    pub tau: f64,
    pub temperature: f64,
    pub model_name: String,
    pub endpoint_url: String,
    pub api_key_env: String,
    pub max_parallel: usize,
    pub cache_path: Option<PathBuf>,
    pub mock_seed: u64,
}

impl ExecutorConfig {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            repetitions: match kind {
                BackendKind::Http => DEFAULT_HTTP_REPETITIONS,
                _ => DEFAULT_MOCK_REPETITIONS,
            },
            tau: 0.5,
            temperature: 1.0,
            model_name: String::new(),
            endpoint_url: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_parallel: 1,
            cache_path: None,
            mock_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if self.repetitions == 0 {
            return Err(ExecError::Config("repetitions must be at least 1".into()));
        }
        if self.max_parallel == 0 {
            return Err(ExecError::Config("max_parallel must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ExecError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.temperature < 0.0 {
            return Err(ExecError::Config("temperature must be non-negative".into()));
        }
        if self.kind == BackendKind::Http && (self.endpoint_url.is_empty() || self.model_name.is_empty()) {
            return Err(ExecError::Config(
                "http executor needs an endpoint and a model name".into(),
            ));
        }
        Ok(())
    }

    /// Builds the executor. `mock_rules` is used only by the mock backend.
    pub fn build(&self, template: PromptTemplate, mock_rules: Option<&MockRules>) -> Result<PromptExecutor, ExecError> {
        self.validate()?;
        let backend: Box<dyn Backend> = match self.kind {
            BackendKind::Mock => Box::new(MockBackend::new(
                mock_rules.unwrap_or(&MockRules::default()),
                self.mock_seed,
            )?),
            BackendKind::Replay => Box::new(ReplayBackend),
            BackendKind::Http => {
                let key = std::env::var(&self.api_key_env).ok();
                Box::new(HttpBackend::new(
                    &self.endpoint_url,
                    &self.model_name,
                    self.temperature,
                    key,
                ))
            }
        };
        let cache = match &self.cache_path {
            Some(p) => ExecutionCache::open(p)?,
            None => ExecutionCache::in_memory(),
        };
        Ok(
            PromptExecutor::new(template, backend, cache, self.repetitions, self.tau)
                .with_max_parallel(self.max_parallel),
        )
    }
}

/// Renders, runs, caches and judges test inputs.
pub struct PromptExecutor {
    template: PromptTemplate,
    backend: Box<dyn Backend>,
    cache: ExecutionCache,
    repetitions: u32,
    tau: f64,
    max_parallel: usize,
}

impl PromptExecutor {
    pub fn new(
        template: PromptTemplate,
        backend: Box<dyn Backend>,
        cache: ExecutionCache,
        repetitions: u32,
        tau: f64,
    ) -> Self {
        assert!(repetitions >= 1, "repetitions must be at least 1");
        Self {
            template,
            backend,
            cache,
            repetitions,
            tau,
            max_parallel: 1,
        }
    }

    pub fn with_max_parallel(mut self, max_parallel: usize) -> Self {
        self.max_parallel = max_parallel.max(1);
        self
    }

    pub fn cache(&self) -> &ExecutionCache {
        &self.cache
    }

    pub fn repetitions(&self) -> u32 {
        self.repetitions
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    fn run_one(&self, test: &TestInput, prompt: &str, run_index: u32) -> Result<ExecutionRecord, ExecError> {
        let started = Instant::now();
        let output = self.backend.complete(test, prompt, run_index)?;
        let latency_ms = if self.backend.name() == "mock" {
            0
        } else {
            started.elapsed().as_millis() as u64
        };
        let correct = judge(&output, &test.expected).as_flag();
        Ok(ExecutionRecord {
            test_id: test.id.clone(),
            run_index,
            output,
            correct,
            latency_ms,
            backend: self.backend.name().to_string(),
            model_name: self.backend.model_name().to_string(),
        })
    }
}

impl Executor for PromptExecutor {
    fn execute(&self, test: &TestInput) -> Result<VerdictSummary, ExecError> {
        let prompt = self
            .template
            .render(test)
            .map_err(|source| ExecError::Render {
                test_id: test.id.clone(),
                source,
            })?
            .text;
        let mut verdicts: Vec<Option<Verdict>> = vec![None; self.repetitions as usize];
        let mut missing = Vec::new();
        for run_index in 1..=self.repetitions {
            match self.cache.get(&test.id, run_index) {
                Some(rec) => verdicts[run_index as usize - 1] = Some(judge(&rec.output, &test.expected)),
                None => missing.push(run_index),
            }
        }

        let mut fresh: Vec<Result<ExecutionRecord, ExecError>> = Vec::with_capacity(missing.len());
        for chunk in missing.chunks(self.max_parallel) {
            if chunk.len() == 1 {
                fresh.push(self.run_one(test, &prompt, chunk[0]));
                continue;
            }
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&i| {
                        let prompt = &prompt;
                        s.spawn(move || self.run_one(test, prompt, i))
                    })
                    .collect();
                for h in handles {
                    fresh.push(h.join().expect("executor thread panicked"));
                }
            });
        }

        // Append in run order so cache files do not depend on thread timing.
        let mut first_error = None;
        for result in fresh {
            match result {
                Ok(rec) => {
                    verdicts[rec.run_index as usize - 1] = Some(Verdict::from_flag(rec.correct));
                    self.cache.append(rec)?;
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        let verdicts: Vec<Verdict> = verdicts.into_iter().map(|v| v.expect("every run filled")).collect();
        Ok(summarize(&test.id, &verdicts, self.tau))
    }
}

/// Recomputes a summary from cached records, without calling any backend.
pub fn summary_from_cache(
    cache: &ExecutionCache,
    test: &TestInput,
    repetitions: u32,
    tau: f64,
) -> Result<VerdictSummary, ExecError> {
    let mut verdicts = Vec::with_capacity(repetitions as usize);
    for run_index in 1..=repetitions {
        let rec = cache.get(&test.id, run_index).ok_or_else(|| ExecError::CacheMiss {
            test_id: test.id.clone(),
            run_index,
        })?;
        verdicts.push(judge(&rec.output, &test.expected));
    }
    Ok(summarize(&test.id, &verdicts, tau))
}
