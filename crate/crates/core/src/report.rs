//! Evaluation reports written next to orderings.

use serde::Serialize;

use crate::evaluation::{apfd, failure_curve, unique_words, CurvePoint, EvalError, FailureVector, DEFAULT_CURVE_GRID};
use crate::execution::{ExecutionCache, VerdictSummary};
use crate::selection::{ExecutionFailure, Ordering};

pub const FAILURE_DEFINITION: &str = "failing = correctness_ratio < tau";
pub const TOKENIZER: &str = "whitespace split, lowercase, unicode punctuation stripped at token edges";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportFailure {
    pub step: usize,
    pub test_id: String,
    pub message: String,
}

impl From<&ExecutionFailure> for ReportFailure {
    fn from(f: &ExecutionFailure) -> Self {
        Self {
            step: f.step,
            test_id: f.test_id.clone(),
            message: f.message.clone(),
        }
    }
}

/// One summary per (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub method: String,
    pub seed: Option<u64>,
    /// Labeled tests in the ordering.
    pub n: usize,
    /// Failing labeled tests.
    pub m: usize,
    pub unlabeled: usize,
    /// APFD on a 0 to 100 scale; null when there are no failures.
    pub apfd: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub curve_not_applicable: bool,
    pub unique_words: usize,
    pub repetitions: u32,
    pub tau: f64,
    pub config_digest: String,
    pub manifest_digest: String,
    pub execution_failure: Option<ReportFailure>,
    pub notes: Vec<String>,
}

pub struct ReportInput<'a> {
    pub method: &'a str,
    pub seed: Option<u64>,
    pub ordering: &'a Ordering,
    pub verdicts: &'a [VerdictSummary],
    pub cache: &'a ExecutionCache,
    pub repetitions: u32,
    pub tau: f64,
    pub manifest_digest: &'a str,
    pub execution_failure: Option<&'a ExecutionFailure>,
}

pub fn build_report(input: &ReportInput) -> Result<RunReport, EvalError> {
    let fv = FailureVector::from_ordering(input.ordering, input.verdicts)?;
    let apfd = match apfd(&fv) {
        Ok(v) => Some(v * 100.0),
        Err(EvalError::NoFailures) | Err(EvalError::Empty) => None,
        Err(e) => return Err(e),
    };
    let curve = failure_curve(&fv, &DEFAULT_CURVE_GRID)?;
    let outputs: Vec<String> = input
        .ordering
        .ids()
        .iter()
        .flat_map(|id| input.cache.outputs(id, input.repetitions))
        .collect();
    let mut notes = vec![
        FAILURE_DEFINITION.to_string(),
        format!("unique_words tokenizer: {TOKENIZER}"),
    ];
    if fv.unlabeled_excluded > 0 {
        notes.push(format!(
            "{} unlabeled tests counted as passing and left out of APFD",
            fv.unlabeled_excluded
        ));
    }
    if input.method == "tsdm" {
        notes.push("tsdm ordering: survivors by id, then removed inputs in reverse removal order".into());
    }
    Ok(RunReport {
        method: input.method.to_string(),
        seed: input.seed,
        n: fv.n(),
        m: fv.m(),
        unlabeled: fv.unlabeled_excluded,
        apfd,
        curve: curve.points,
        curve_not_applicable: curve.not_applicable,
        unique_words: unique_words(&outputs),
        repetitions: input.repetitions,
        tau: input.tau,
        config_digest: input.ordering.config_digest.clone(),
        manifest_digest: input.manifest_digest.to_string(),
        execution_failure: input.execution_failure.map(ReportFailure::from),
        notes,
    })
}
