//! Wall-clock measurements of the selection methods on synthetic pools.
//!
//! Runs use the mock backend, which reports zero latency, so the measured
//! time is dominated by distance computations.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::TestPool;
use crate::distance::{Compressor, DistanceFunction};
use crate::execution::{ExecError, ExecutionCache, MockBackend, PromptExecutor};
use crate::selection::{adaptive_select, SelectionConfig, SelectionError};
use crate::synthetic::{generate, SyntheticSpec, SyntheticWorkload};
use crate::tsdm::{tsdm_select, TsdmError};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Tsdm(#[from] TsdmError),
    #[error("invalid bench config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub art_pool_sizes: Vec<usize>,
    pub art_n: usize,
    pub tsdm_pool_size: usize,
    /// Target sizes as percentages of the TSDm pool.
    pub tsdm_percentages: Vec<f64>,
    /// Words per synthetic input in the TSDm pool; TSDm cost grows with input length.
    pub tsdm_words_per_input: usize,
    pub seed: u64,
    /// Each timing is the minimum over this many repetitions.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            art_pool_sizes: vec![1000, 2000, 4000],
            art_n: 50,
            tsdm_pool_size: 200,
            tsdm_percentages: vec![90.0, 50.0, 10.0],
            tsdm_words_per_input: 1,
            seed: 0,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub method: String,
    pub pool_size: usize,
    pub n_target: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub timings: Vec<Timing>,
}

pub fn mock_executor_for(w: &SyntheticWorkload, seed: u64) -> Result<PromptExecutor, ExecError> {
    Ok(PromptExecutor::new(
        w.template.clone(),
        Box::new(MockBackend::new(&w.rules, seed)?),
        ExecutionCache::in_memory(),
        4,
        0.5,
    ))
}

fn min_time<F: FnMut() -> Result<(), BenchError>>(repeats: usize, mut f: F) -> Result<Duration, BenchError> {
    let mut best = Duration::MAX;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed());
    }
    Ok(best)
}

/// Time of one ART run with a fresh executor and lazily computed distances.
pub fn time_art(w: &SyntheticWorkload, cfg: &SelectionConfig, repeats: usize) -> Result<Duration, BenchError> {
    min_time(repeats, || {
        let exec = mock_executor_for(w, cfg.seed)?;
        adaptive_select(&w.pool, cfg, &exec)?;
        Ok(())
    })
}

pub fn time_tsdm(pool: &TestPool, n: usize, c: &Compressor, repeats: usize) -> Result<Duration, BenchError> {
    min_time(repeats, || {
        tsdm_select(pool, n, c)?;
        Ok(())
    })
}

pub fn tsdm_target(pool_size: usize, pct: f64) -> usize {
    ((pool_size as f64 * pct / 100.0).round() as usize).clamp(2, pool_size)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.art_n == 0 || cfg.art_pool_sizes.iter().any(|&p| p < cfg.art_n.max(100)) {
        return Err(BenchError::Config(
            "ART pools must hold at least max(n, 100) inputs".into(),
        ));
    }
    if cfg.tsdm_pool_size < 100 || cfg.tsdm_percentages.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
        return Err(BenchError::Config(
            "TSDm pool needs 100+ inputs and percentages in (0, 100]".into(),
        ));
    }
    let mut timings = Vec::new();
    for &size in &cfg.art_pool_sizes {
        let w = generate(&SyntheticSpec::scaled(size, cfg.seed));
        for selective in [false, true] {
            let sel = SelectionConfig::new(cfg.art_n, DistanceFunction::ncd())
                .with_seed(cfg.seed)
                .with_selective_refset(selective, 0.5);
            let t = time_art(&w, &sel, cfg.repeats)?;
            timings.push(Timing {
                method: if selective { "art-ncd-selective" } else { "art-ncd" }.into(),
                pool_size: size,
                n_target: cfg.art_n,
                seconds: t.as_secs_f64(),
            });
        }
    }
    let mut spec = SyntheticSpec::scaled(cfg.tsdm_pool_size, cfg.seed);
    spec.words_per_input = cfg.tsdm_words_per_input;
    let w = generate(&spec);
    for &pct in &cfg.tsdm_percentages {
        let n = tsdm_target(cfg.tsdm_pool_size, pct);
        let t = time_tsdm(&w.pool, n, &Compressor::default(), cfg.repeats)?;
        timings.push(Timing {
            method: "tsdm".into(),
            pool_size: cfg.tsdm_pool_size,
            n_target: n,
            seconds: t.as_secs_f64(),
        });
    }
    Ok(BenchReport {
        config: cfg.clone(),
        timings,
    })
}
