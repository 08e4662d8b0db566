//! Python bindings: pools, distances, selection strategies and evaluation.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use promptdiv::corpus::{self, PromptTemplate};
use promptdiv::distance::{self, Compressor, DistanceFunction, EmbeddingTable, GramUnit};
use promptdiv::evaluation::{self, FailureVector, WilcoxonMethod};
use promptdiv::execution::{ExecutionCache, MockBackend, MockRules, PromptExecutor};
use promptdiv::selection::{self, Score, SelectionConfig};
use promptdiv::{synthetic, tsdm};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn gram_unit(unit: &str) -> PyResult<GramUnit> {
    match unit {
        "char" => Ok(GramUnit::Char),
        "word" => Ok(GramUnit::Word),
        other => Err(PyValueError::new_err(format!(
            "unit must be 'char' or 'word', got {other:?}"
        ))),
    }
}

/// A pool of test inputs with unique ids.
#[pyclass(name = "TestPool", module = "promptdiv_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTestPool {
    inner: corpus::TestPool,
}

#[pymethods]
impl PyTestPool {
    /// Reads a JSONL pool file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: corpus::load_pool(path).map_err(value_err)?,
        })
    }

    /// Builds a pool from `(id, text, expected)` triples; `expected` may be None.
    #[staticmethod]
    fn from_texts(rows: Vec<(String, String, Option<String>)>) -> PyResult<Self> {
        let inputs = rows
            .into_iter()
            .map(|(id, text, expected)| corpus::TestInput::with_text(id, text, expected.unwrap_or_default()))
            .collect();
        Ok(Self {
            inner: corpus::TestPool::new(inputs, "python").map_err(value_err)?,
        })
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().map(String::from).collect()
    }

    fn canonical_text(&self, id: &str) -> PyResult<String> {
        self.inner
            .get(id)
            .map(|t| t.canonical_text())
            .ok_or_else(|| PyValueError::new_err(format!("unknown id {id:?}")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Precomputed embedding vectors keyed by test id.
#[pyclass(name = "EmbeddingTable", module = "promptdiv_py", frozen)]
struct PyEmbeddingTable {
    inner: Arc<EmbeddingTable>,
}

#[pymethods]
impl PyEmbeddingTable {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(EmbeddingTable::load(path).map_err(value_err)?),
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

/// Ranked selection result. Scores are `inf` for an empty reference set and
/// None for unscored strategies.
#[pyclass(name = "Ordering", module = "promptdiv_py", frozen)]
struct PyOrdering {
    steps: Vec<(String, Option<f64>, usize)>,
    /// `(id, correctness_ratio, passing)` per executed test, when known.
    verdicts: Vec<(String, f64, bool)>,
    config_digest: String,
}

#[pymethods]
impl PyOrdering {
    #[getter]
    fn ids(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.0.clone()).collect()
    }

    /// `(id, score, refset_size)` per rank.
    #[getter]
    fn steps(&self) -> Vec<(String, Option<f64>, usize)> {
        self.steps.clone()
    }

    #[getter]
    fn verdicts(&self) -> Vec<(String, f64, bool)> {
        self.verdicts.clone()
    }

    #[getter]
    fn config_digest(&self) -> &str {
        &self.config_digest
    }

    fn __len__(&self) -> usize {
        self.steps.len()
    }
}

impl PyOrdering {
    fn new(ordering: &selection::Ordering, verdicts: Vec<(String, f64, bool)>) -> Self {
        let steps = ordering
            .steps
            .iter()
            .map(|s| {
                let score = match s.score {
                    Score::Infinite => Some(f64::INFINITY),
                    other => other.value(),
                };
                (s.id.clone(), score, s.refset_size)
            })
            .collect();
        Self {
            steps,
            verdicts,
            config_digest: ordering.config_digest.clone(),
        }
    }
}

/// A generated clustered pool with its template and mock rules.
#[pyclass(name = "SyntheticWorkload", module = "promptdiv_py", frozen)]
struct PySyntheticWorkload {
    inner: synthetic::SyntheticWorkload,
}

#[pymethods]
impl PySyntheticWorkload {
    #[getter]
    fn pool(&self) -> PyTestPool {
        PyTestPool {
            inner: self.inner.pool.clone(),
        }
    }

    #[getter]
    fn template(&self) -> String {
        self.inner.template.text().to_string()
    }

    #[getter]
    fn mock_rules(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.rules).map_err(runtime_err)
    }

    #[getter]
    fn failing_ids(&self) -> Vec<String> {
        self.inner.failing_ids().into_iter().collect()
    }
}

#[pyfunction]
#[pyo3(signature = (size=200, seed=0))]
fn synthetic_workload(size: usize, seed: u64) -> PyResult<PySyntheticWorkload> {
    if size < 100 {
        return Err(PyValueError::new_err("size must be at least 100"));
    }
    Ok(PySyntheticWorkload {
        inner: synthetic::generate(&synthetic::SyntheticSpec::scaled(size, seed)),
    })
}

/// Symmetrized normalized compression distance of two strings.
#[pyfunction]
fn ncd(x: &str, y: &str) -> f64 {
    distance::ncd(x.as_bytes(), y.as_bytes())
}

/// Raw DEFLATE size in bytes of a string.
#[pyfunction]
fn compressed_size(x: &str) -> usize {
    distance::compressed_size(x.as_bytes())
}

#[pyfunction]
#[pyo3(signature = (x, y, unit="char", n=2))]
fn ngram_cosine(x: &str, y: &str, unit: &str, n: usize) -> PyResult<f64> {
    if n == 0 {
        return Err(PyValueError::new_err("n must be positive"));
    }
    Ok(distance::ngram_cosine(x, y, gram_unit(unit)?, n))
}

fn distance_function(name: &str, embeddings: Option<&PyEmbeddingTable>) -> PyResult<DistanceFunction> {
    match name {
        "ncd" => Ok(DistanceFunction::ncd()),
        "2gram-char" => Ok(DistanceFunction::char_bigram()),
        "2gram-word" => Ok(DistanceFunction::word_bigram()),
        "embed" => embeddings
            .map(|t| DistanceFunction::Embedding(Arc::clone(&t.inner)))
            .ok_or_else(|| PyValueError::new_err("distance 'embed' needs an embeddings table")),
        other => Err(PyValueError::new_err(format!(
            "unknown distance {other:?}; expected ncd, 2gram-char, 2gram-word or embed"
        ))),
    }
}

/// Adaptive random selection driven by the mock backend. `mock_rules` is the
/// JSON text of a rules file.
#[pyfunction]
#[pyo3(signature = (
    pool, n, template, mock_rules, distance="ncd", seed=0, candidates=10,
    selective_refset=false, tau=0.5, mock_seed=0, repetitions=4, embeddings=None
))]
#[allow(clippy::too_many_arguments)]
fn adaptive_select(
    py: Python<'_>,
    pool: &PyTestPool,
    n: usize,
    template: &str,
    mock_rules: &str,
    distance: &str,
    seed: u64,
    candidates: usize,
    selective_refset: bool,
    tau: f64,
    mock_seed: u64,
    repetitions: u32,
    embeddings: Option<PyRef<'_, PyEmbeddingTable>>,
) -> PyResult<PyOrdering> {
    let d = distance_function(distance, embeddings.as_deref())?;
    let cfg = SelectionConfig::new(n, d)
        .with_seed(seed)
        .with_candidates(candidates)
        .with_selective_refset(selective_refset, tau);
    let template = PromptTemplate::parse(template).map_err(value_err)?;
    let rules: MockRules = serde_json::from_str(mock_rules).map_err(value_err)?;
    let backend = MockBackend::new(&rules, mock_seed).map_err(value_err)?;
    let exec = PromptExecutor::new(
        template,
        Box::new(backend),
        ExecutionCache::in_memory(),
        repetitions,
        tau,
    );
    let run = py
        .detach(|| selection::adaptive_select(&pool.inner, &cfg, &exec))
        .map_err(value_err)?;
    if let Some(f) = &run.failure {
        return Err(PyRuntimeError::new_err(format!(
            "step {} ({}): {}",
            f.step, f.test_id, f.message
        )));
    }
    let verdicts = run
        .verdicts
        .iter()
        .map(|v| (v.test_id.clone(), v.correctness_ratio, v.passing))
        .collect();
    Ok(PyOrdering::new(&run.ordering, verdicts))
}

#[pyfunction]
#[pyo3(signature = (pool, n, seed=0))]
fn random_select(pool: &PyTestPool, n: usize, seed: u64) -> PyResult<PyOrdering> {
    let ordering = selection::random_select(&pool.inner, n, seed).map_err(value_err)?;
    Ok(PyOrdering::new(&ordering, Vec::new()))
}

/// Backward elimination on multiset NCD; returns the full pool ordering with
/// the `n` survivors first.
#[pyfunction]
fn tsdm_select(py: Python<'_>, pool: &PyTestPool, n: usize) -> PyResult<PyOrdering> {
    let run = py
        .detach(|| tsdm::tsdm_select(&pool.inner, n, &Compressor::default()))
        .map_err(value_err)?;
    Ok(PyOrdering::new(&run.ordering, Vec::new()))
}

/// APFD of a failure vector in execution order, on a 0 to 1 scale.
#[pyfunction]
fn apfd(failures: Vec<bool>) -> PyResult<f64> {
    evaluation::apfd(&FailureVector::from_flags(&failures)).map_err(value_err)
}

#[pyfunction]
fn unique_words(outputs: Vec<String>) -> usize {
    evaluation::unique_words(&outputs)
}

/// Two-sided Wilcoxon signed-rank test; returns `(statistic, p_value, method)`.
#[pyfunction]
fn wilcoxon(pairs: Vec<(f64, f64)>) -> PyResult<(f64, f64, &'static str)> {
    let r = evaluation::wilcoxon_signed_rank(&pairs).map_err(value_err)?;
    let method = match r.method {
        WilcoxonMethod::Exact => "exact",
        WilcoxonMethod::Normal => "normal",
    };
    Ok((r.statistic, r.p_value, method))
}

#[pymodule]
fn promptdiv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTestPool>()?;
    m.add_class::<PyEmbeddingTable>()?;
    m.add_class::<PyOrdering>()?;
    m.add_class::<PySyntheticWorkload>()?;
    m.add_function(wrap_pyfunction!(synthetic_workload, m)?)?;
    m.add_function(wrap_pyfunction!(ncd, m)?)?;
    m.add_function(wrap_pyfunction!(compressed_size, m)?)?;
    m.add_function(wrap_pyfunction!(ngram_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_select, m)?)?;
    m.add_function(wrap_pyfunction!(random_select, m)?)?;
    m.add_function(wrap_pyfunction!(tsdm_select, m)?)?;
    m.add_function(wrap_pyfunction!(apfd, m)?)?;
    m.add_function(wrap_pyfunction!(unique_words, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add("__version__", promptdiv::manifest::TOOL_VERSION)?;
    Ok(())
}
