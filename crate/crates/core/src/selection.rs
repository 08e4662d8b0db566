//! Adaptive diversity-based selection and prioritization.
//!
//! [`adaptive_select`] repeatedly samples a handful of candidates from the
//! remaining pool, scores each by its minimum distance to the reference set
//! and executes the best one. With `selective_refset` the reference set only
//! holds executed tests whose correctness ratio reaches `tau`, so selection
//! keeps drifting towards regions where failures were seen.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TestInput, TestPool};
use crate::distance::{DistanceError, DistanceFunction, Features};
use crate::execution::{Executor, VerdictSummary};
use crate::manifest::digest_json;

pub const DEFAULT_CANDIDATES: usize = 10;
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("target size {n} exceeds pool size {pool}")]
    TargetTooLarge { n: usize, pool: usize },
    #[error("invalid selection config: {0}")]
    Config(String),
    #[error("distance for candidate {candidate}: {source}")]
    Distance {
        candidate: String,
        #[source]
        source: DistanceError,
    },
    #[error("ordering file {path}: {message}")]
    OrderingFile { path: String, message: String },
}

// ---------------------------------------------------------------------------
// Scores and orderings
// ---------------------------------------------------------------------------

/// Diversity score of a selected test. `Infinite` marks a pick made against
/// an empty reference set; `Unscored` marks picks of non-scoring strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Infinite,
    Finite(f64),
    Unscored,
}

impl Score {
    fn rank_key(self) -> f64 {
        match self {
            Score::Infinite => f64::INFINITY,
            Score::Finite(x) => x,
            Score::Unscored => f64::NEG_INFINITY,
        }
    }

    pub fn is_better_than(self, other: Score) -> bool {
        self.rank_key() > other.rank_key()
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Score::Infinite => Some(f64::INFINITY),
            Score::Finite(x) => Some(x),
            Score::Unscored => None,
        }
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Score::Infinite => s.serialize_str("inf"),
            Score::Finite(x) => s.serialize_f64(*x),
            Score::Unscored => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct ScoreVisitor;

        impl<'de> Visitor<'de> for ScoreVisitor {
            type Value = Score;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number, \"inf\" or null")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Score, E> {
                if v == "inf" {
                    Ok(Score::Infinite)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Score, E> {
                Ok(Score::Finite(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Score, E> {
                Ok(Score::Finite(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Score, E> {
                Ok(Score::Finite(v as f64))
            }

            fn visit_unit<E: de::Error>(self) -> Result<Score, E> {
                Ok(Score::Unscored)
            }

            fn visit_none<E: de::Error>(self) -> Result<Score, E> {
                Ok(Score::Unscored)
            }
        }

        d.deserialize_any(ScoreVisitor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub id: String,
    pub score: Score,
    pub refset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StepRecord {
    rank: usize,
    id: String,
    score: Score,
    refset_size: usize,
}

/// A selection or prioritization result: pool ids in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    pub steps: Vec<Step>,
    pub config_digest: String,
}

impl Ordering {
    pub fn ids(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One JSON object per line: `rank` (1-based), `id`, `score`, `refset_size`.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, step) in self.steps.iter().enumerate() {
            let rec = StepRecord {
                rank: i + 1,
                id: step.id.clone(),
                score: step.score,
                refset_size: step.refset_size,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }

    /// Reads an ordering file. The digest of an ordering read back from disk is
    /// the digest of the file content.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SelectionError> {
        let path = path.as_ref();
        let err = |message: String| SelectionError::OrderingFile {
            path: path.display().to_string(),
            message,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        let mut steps = Vec::new();
        for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StepRecord = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            if rec.rank != steps.len() + 1 {
                return Err(err(format!(
                    "line {}: expected rank {}, found {}",
                    i + 1,
                    steps.len() + 1,
                    rec.rank
                )));
            }
            steps.push(Step {
                id: rec.id,
                score: rec.score,
                refset_size: rec.refset_size,
            });
        }
        Ok(Ordering {
            steps,
            config_digest: crate::manifest::sha256_hex(&bytes),
        })
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub n_target: usize,
    pub candidates: usize,
    pub seed: u64,
    pub selective_refset: bool,
    pub tau: f64,
    pub distance: DistanceFunction,
}

impl SelectionConfig {
    pub fn new(n_target: usize, distance: DistanceFunction) -> Self {
        Self {
            n_target,
            candidates: DEFAULT_CANDIDATES,
            seed: 0,
            selective_refset: false,
            tau: DEFAULT_TAU,
            distance,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_candidates(mut self, k: usize) -> Self {
        self.candidates = k;
        self
    }

    pub fn with_selective_refset(mut self, selective: bool, tau: f64) -> Self {
        self.selective_refset = selective;
        self.tau = tau;
        self
    }

    pub fn validate(&self, pool_len: usize) -> Result<(), SelectionError> {
        if pool_len == 0 {
            return Err(SelectionError::EmptyPool);
        }
        if self.n_target == 0 {
            return Err(SelectionError::Config("target size must be positive".into()));
        }
        if self.n_target > pool_len {
            return Err(SelectionError::TargetTooLarge {
                n: self.n_target,
                pool: pool_len,
            });
        }
        if self.candidates == 0 {
            return Err(SelectionError::Config("candidate count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(SelectionError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "method": "art",
            "n_target": self.n_target,
            "candidates": self.candidates,
            "seed": self.seed,
            "selective_refset": self.selective_refset,
            "tau": self.tau,
            "distance": self.distance.describe(),
        })
    }

    pub fn digest(&self) -> String {
        digest_json(&self.describe())
    }
}

// ---------------------------------------------------------------------------
// Distances between pool members
// ---------------------------------------------------------------------------

/// Distance between pool members addressed by position.
pub trait PoolMetric: Sync {
    fn distance(&self, a: usize, b: usize) -> Result<f64, DistanceError>;
}

/// Computes features on first use; cost scales with the inputs actually touched.
pub struct LazyMetric<'a> {
    pool: &'a TestPool,
    distance: &'a DistanceFunction,
    features: Vec<OnceLock<Features>>,
}

impl<'a> LazyMetric<'a> {
    pub fn new(pool: &'a TestPool, distance: &'a DistanceFunction) -> Self {
        Self {
            pool,
            distance,
            features: (0..pool.len()).map(|_| OnceLock::new()).collect(),
        }
    }

    fn features(&self, i: usize) -> Result<&Features, DistanceError> {
        if let Some(f) = self.features[i].get() {
            return Ok(f);
        }
        let f = self.distance.features(&self.pool.inputs()[i])?;
        Ok(self.features[i].get_or_init(|| f))
    }
}

impl PoolMetric for LazyMetric<'_> {
    fn distance(&self, a: usize, b: usize) -> Result<f64, DistanceError> {
        Ok(self.distance.between(self.features(a)?, self.features(b)?))
    }
}

/// All pairwise distances of a pool, for workloads that rerun selection many
/// times on the same pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    upper: Vec<f64>,
}

impl DistanceMatrix {
    pub fn compute(pool: &TestPool, distance: &DistanceFunction) -> Result<Self, SelectionError> {
        let n = pool.len();
        let features = pool
            .inputs()
            .par_iter()
            .map(|t| {
                distance.features(t).map_err(|source| SelectionError::Distance {
                    candidate: t.id.clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let upper = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let features = &features;
                (i + 1..n).map(move |j| distance.between(&features[i], &features[j]))
            })
            .collect();
        Ok(Self { n, upper })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        // Row i starts after rows 0..i, each of length n-1-r.
        let row_start = i * (2 * self.n - i - 1) / 2;
        self.upper[row_start + (j - i - 1)]
    }
}

impl PoolMetric for DistanceMatrix {
    fn distance(&self, a: usize, b: usize) -> Result<f64, DistanceError> {
        Ok(self.get(a, b))
    }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Minimum distance from `candidate` to any reference; infinite for no references.
pub fn score_candidate(
    candidate: &TestInput,
    refs: &[TestInput],
    d: &DistanceFunction,
) -> Result<Score, SelectionError> {
    let wrap = |source| SelectionError::Distance {
        candidate: candidate.id.clone(),
        source,
    };
    let fc = d.features(candidate).map_err(wrap)?;
    let mut score = Score::Infinite;
    for r in refs {
        let dist = d.between(&fc, &d.features(r).map_err(wrap)?);
        if Score::Finite(dist).rank_key() < score.rank_key() {
            score = Score::Finite(dist);
        }
    }
    Ok(score)
}

fn score_index(metric: &dyn PoolMetric, candidate: usize, refs: &[usize]) -> Result<Score, DistanceError> {
    let mut best = f64::INFINITY;
    for &r in refs {
        let d = metric.distance(candidate, r)?;
        if d < best {
            best = d;
        }
    }
    Ok(if refs.is_empty() {
        Score::Infinite
    } else {
        Score::Finite(best)
    })
}

/// Executed tests eligible as references: all of them, or with `selective`
/// only those whose correctness ratio is at least `tau`. Order is kept.
pub fn select_references<T: Clone>(executed: &[(T, f64)], tau: f64, selective: bool) -> Vec<T> {
    executed
        .iter()
        .filter(|(_, ratio)| !selective || *ratio >= tau)
        .map(|(t, _)| t.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// Selection strategies
// ---------------------------------------------------------------------------

/// Candidates considered at one step, in sampled order, with their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub candidates: Vec<String>,
    pub scores: Vec<Score>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionFailure {
    pub step: usize,
    pub test_id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SelectionRun {
    pub ordering: Ordering,
    pub trace: Vec<StepTrace>,
    pub verdicts: Vec<VerdictSummary>,
    pub failure: Option<ExecutionFailure>,
}

pub fn adaptive_select(
    pool: &TestPool,
    cfg: &SelectionConfig,
    executor: &dyn Executor,
) -> Result<SelectionRun, SelectionError> {
    let metric = LazyMetric::new(pool, &cfg.distance);
    adaptive_select_with(pool, cfg, &metric, executor)
}

/// [`adaptive_select`] with distances supplied by `metric` instead of `cfg.distance`.
pub fn adaptive_select_with(
    pool: &TestPool,
    cfg: &SelectionConfig,
    metric: &dyn PoolMetric,
    executor: &dyn Executor,
) -> Result<SelectionRun, SelectionError> {
    cfg.validate(pool.len())?;
    let inputs = pool.inputs();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut refs: Vec<usize> = Vec::new();
    let mut steps = Vec::with_capacity(cfg.n_target);
    let mut trace = Vec::with_capacity(cfg.n_target);
    let mut verdicts = Vec::with_capacity(cfg.n_target);
    let mut failure = None;

    while steps.len() < cfg.n_target {
        let k = cfg.candidates.min(remaining.len());
        let picks = rand::seq::index::sample(&mut rng, remaining.len(), k).into_vec();
        let scores = if refs.is_empty() {
            vec![Score::Infinite; k]
        } else {
            picks
                .par_iter()
                .map(|&p| {
                    score_index(metric, remaining[p], &refs).map_err(|source| SelectionError::Distance {
                        candidate: inputs[remaining[p]].id.clone(),
                        source,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        let mut best = 0;
        for (i, s) in scores.iter().enumerate().skip(1) {
            if s.is_better_than(scores[best]) {
                best = i;
            }
        }
        let candidate_ids = picks.iter().map(|&p| inputs[remaining[p]].id.clone()).collect();
        let chosen = remaining.remove(picks[best]);
        let test = &inputs[chosen];
        trace.push(StepTrace {
            candidates: candidate_ids,
            scores: scores.clone(),
            chosen: best,
        });
        match executor.execute(test) {
            Ok(verdict) => {
                steps.push(Step {
                    id: test.id.clone(),
                    score: scores[best],
                    refset_size: refs.len(),
                });
                if !cfg.selective_refset || verdict.correctness_ratio >= cfg.tau {
                    refs.push(chosen);
                }
                verdicts.push(verdict);
            }
            Err(e) => {
                trace.pop();
                failure = Some(ExecutionFailure {
                    step: steps.len() + 1,
                    test_id: test.id.clone(),
                    message: e.to_string(),
                });
                break;
            }
        }
    }

    Ok(SelectionRun {
        ordering: Ordering {
            steps,
            config_digest: cfg.digest(),
        },
        trace,
        verdicts,
        failure,
    })
}

/// Uniform sample without replacement, in sampled order. Draws exactly like
/// [`adaptive_select`] with one candidate per step.
pub fn random_select(pool: &TestPool, n: usize, seed: u64) -> Result<Ordering, SelectionError> {
    if n > pool.len() {
        return Err(SelectionError::TargetTooLarge { n, pool: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut steps = Vec::with_capacity(n);
    while steps.len() < n {
        let p = rand::seq::index::sample(&mut rng, remaining.len(), 1).index(0);
        let chosen = remaining.remove(p);
        steps.push(Step {
            id: pool.inputs()[chosen].id.clone(),
            score: Score::Unscored,
            refset_size: 0,
        });
    }
    Ok(Ordering {
        steps,
        config_digest: digest_json(&serde_json::json!({"method": "random", "n": n, "seed": seed})),
    })
}
