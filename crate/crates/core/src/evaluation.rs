//! Metrics over orderings: APFD, failure-discovery curves, output word
//! diversity and the Wilcoxon signed-rank test.

use std::collections::{BTreeSet, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::Serialize;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::execution::VerdictSummary;
use crate::selection::Ordering;

/// Largest number of non-zero differences handled by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 12;
pub const WILCOXON_MIN_PAIRS: usize = 6;

/// Default grid for failure curves, in percent of the ordering.
pub const DEFAULT_CURVE_GRID: [f64; 10] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no failures")]
    NoFailures,
    #[error("empty failure vector")]
    Empty,
    #[error("no verdict for ordered id {0}")]
    MissingVerdict(String),
    #[error("grid value {0} outside (0, 100]")]
    BadGrid(f64),
    #[error("insufficient data: {0} non-zero differences, need at least {min}", min = WILCOXON_MIN_PAIRS)]
    InsufficientData(usize),
    #[error("all differences are zero")]
    AllZero,
}

/// Failing flags in rank order. Unlabeled tests are left out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureVector {
    pub entries: Vec<(String, bool)>,
    pub unlabeled_excluded: usize,
}

impl FailureVector {
    pub fn from_flags(flags: &[bool]) -> Self {
        Self {
            entries: flags
                .iter()
                .enumerate()
                .map(|(i, f)| (format!("t{}", i + 1), *f))
                .collect(),
            unlabeled_excluded: 0,
        }
    }

    /// Builds the vector for `ordering`, reading verdicts by id.
    pub fn from_ordering(ordering: &Ordering, verdicts: &[VerdictSummary]) -> Result<Self, EvalError> {
        let by_id: HashMap<&str, &VerdictSummary> = verdicts.iter().map(|v| (v.test_id.as_str(), v)).collect();
        let mut entries = Vec::with_capacity(ordering.len());
        let mut unlabeled_excluded = 0;
        for id in ordering.ids() {
            let v = by_id.get(id).ok_or_else(|| EvalError::MissingVerdict(id.to_string()))?;
            if v.unlabeled {
                unlabeled_excluded += 1;
            } else {
                entries.push((id.to_string(), v.failing()));
            }
        }
        Ok(Self {
            entries,
            unlabeled_excluded,
        })
    }

    pub fn n(&self) -> usize {
        self.entries.len()
    }

    pub fn m(&self) -> usize {
        self.entries.iter().filter(|(_, f)| *f).count()
    }

    /// 1-based ranks of the failing entries.
    pub fn failing_ranks(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, (_, f))| *f)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn reversed(&self) -> Self {
        let mut entries = self.entries.clone();
        entries.reverse();
        Self {
            entries,
            unlabeled_excluded: self.unlabeled_excluded,
        }
    }
}

/// APFD as an exact fraction `(numerator, denominator)`:
/// `1 - S/(n m) + 1/(2n) = (2nm - 2S + m) / (2nm)` with `S` the sum of failing ranks.
pub fn apfd_exact(fv: &FailureVector) -> Result<(u64, u64), EvalError> {
    let n = fv.n() as u64;
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let ranks = fv.failing_ranks();
    let m = ranks.len() as u64;
    if m == 0 {
        return Err(EvalError::NoFailures);
    }
    let s: u64 = ranks.iter().map(|&r| r as u64).sum();
    Ok((2 * n * m - 2 * s + m, 2 * n * m))
}

pub fn apfd(fv: &FailureVector) -> Result<f64, EvalError> {
    let (num, den) = apfd_exact(fv)?;
    Ok(num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub pct_selected: f64,
    pub pct_failures_found: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureCurve {
    pub points: Vec<CurvePoint>,
    /// Set when there are no failures, in which case every point is 0.
    pub not_applicable: bool,
}

/// Share of all failures found within the first `ceil(p n / 100)` ranks, per grid point.
pub fn failure_curve(fv: &FailureVector, grid: &[f64]) -> Result<FailureCurve, EvalError> {
    if let Some(&bad) = grid.iter().find(|&&p| !(p > 0.0 && p <= 100.0)) {
        return Err(EvalError::BadGrid(bad));
    }
    let n = fv.n();
    let m = fv.m();
    let mut found_by_rank = Vec::with_capacity(n + 1);
    found_by_rank.push(0usize);
    for (_, failing) in &fv.entries {
        found_by_rank.push(found_by_rank.last().unwrap() + usize::from(*failing));
    }
    let points = grid
        .iter()
        .map(|&p| {
            let cut = ((p * n as f64 / 100.0).ceil() as usize).min(n);
            let pct = if m == 0 {
                0.0
            } else {
                100.0 * found_by_rank[cut] as f64 / m as f64
            };
            CurvePoint {
                pct_selected: p,
                pct_failures_found: pct,
            }
        })
        .collect();
    Ok(FailureCurve {
        points,
        not_applicable: m == 0,
    })
}

static EDGE_PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\p{P}+|\p{P}+$").unwrap());

/// Distinct words across all outputs: whitespace tokens, lowercased, with
/// punctuation stripped from both ends. Interior punctuation is kept.
pub fn word_set<S: AsRef<str>>(outputs: &[S]) -> BTreeSet<String> {
    outputs
        .iter()
        .flat_map(|o| o.as_ref().split_whitespace())
        .map(|tok| EDGE_PUNCT.replace_all(&tok.to_lowercase(), "").into_owned())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn unique_words<S: AsRef<str>>(outputs: &[S]) -> usize {
    word_set(outputs).len()
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// min(W+, W-).
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub n_nonzero: usize,
    pub method: WilcoxonMethod,
}

struct SignedRanks {
    /// Midranks doubled so ties stay integral.
    doubled: Vec<u64>,
    positive: Vec<bool>,
    tie_sizes: Vec<u64>,
}

fn signed_ranks(pairs: &[(f64, f64)]) -> Result<SignedRanks, EvalError> {
    let mut diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(EvalError::AllZero);
    }
    if diffs.len() < WILCOXON_MIN_PAIRS {
        return Err(EvalError::InsufficientData(diffs.len()));
    }
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let n = diffs.len();
    let mut doubled = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean; doubled that is i + j + 2.
        for r in &mut doubled[i..=j] {
            *r = (i + j + 2) as u64;
        }
        tie_sizes.push((j - i + 1) as u64);
        i = j + 1;
    }
    Ok(SignedRanks {
        doubled,
        positive: diffs.iter().map(|d| *d > 0.0).collect(),
        tie_sizes,
    })
}

fn sums(r: &SignedRanks) -> (u64, u64) {
    let plus: u64 = r
        .doubled
        .iter()
        .zip(&r.positive)
        .filter(|(_, p)| **p)
        .map(|(d, _)| d)
        .sum();
    let total: u64 = r.doubled.iter().sum();
    (plus, total - plus)
}

/// Exact two-sided test by enumerating all sign assignments of the ranks.
pub fn wilcoxon_exact(pairs: &[(f64, f64)]) -> Result<WilcoxonResult, EvalError> {
    let r = signed_ranks(pairs)?;
    let n = r.doubled.len();
    assert!(n <= 20, "exact enumeration over {n} differences is too large");
    let (plus, minus) = sums(&r);
    let observed = plus.min(minus);
    let total: u64 = r.doubled.iter().sum();
    let mut at_least_as_extreme = 0u64;
    for mask in 0u32..(1 << n) {
        let w: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r.doubled[i]).sum();
        if w.min(total - w) <= observed {
            at_least_as_extreme += 1;
        }
    }
    Ok(WilcoxonResult {
        statistic: observed as f64 / 2.0,
        w_plus: plus as f64 / 2.0,
        w_minus: minus as f64 / 2.0,
        p_value: at_least_as_extreme as f64 / (1u64 << n) as f64,
        n_nonzero: n,
        method: WilcoxonMethod::Exact,
    })
}

/// Two-sided normal approximation with tie-corrected variance and a 0.5
/// continuity correction.
pub fn wilcoxon_normal(pairs: &[(f64, f64)]) -> Result<WilcoxonResult, EvalError> {
    let r = signed_ranks(pairs)?;
    let n = r.doubled.len() as f64;
    let (plus, minus) = sums(&r);
    let w = plus.min(minus) as f64 / 2.0;
    let mean = n * (n + 1.0) / 4.0;
    let ties: f64 = r.tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult {
        statistic: w,
        w_plus: plus as f64 / 2.0,
        w_minus: minus as f64 / 2.0,
        p_value,
        n_nonzero: r.doubled.len(),
        method: WilcoxonMethod::Normal,
    })
}

/// Exact for up to 12 non-zero differences, normal approximation above.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult, EvalError> {
    let nonzero = pairs.iter().filter(|(a, b)| a - b != 0.0).count();
    if nonzero <= WILCOXON_EXACT_MAX {
        wilcoxon_exact(pairs)
    } else {
        wilcoxon_normal(pairs)
    }
}
