//! Synthetic clustered workloads for experiments and benchmarks.
//!
//! Each cluster draws its inputs from a private word list and carries a topic
//! word that mock vocabulary rules key on. Inputs of failing clusters also
//! carry a planted motif, and a single failure rule on that motif makes the
//! failure region exactly those clusters.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PromptTemplate, TestInput, TestPool};
use crate::execution::{FailureRule, MockRules, Predicate, VocabularyRule};

pub const DEFAULT_MOTIF: &str = "((";
pub const DEFAULT_TEMPLATE: &str = "Answer the question.\nQ: {input}\nA:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub size: usize,
    pub failing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clusters: Vec<ClusterSpec>,
    pub words_per_input: usize,
    pub input_vocabulary: usize,
    pub output_vocabulary: usize,
    pub motif: String,
    pub failure_p: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 200 inputs in 17 clusters of uneven size; four small clusters (40
    /// inputs, 20%) fail.
    pub fn standard(seed: u64) -> Self {
        let passing = [30, 26, 22, 18, 14, 12, 8, 6, 6, 5, 5, 4, 4];
        let mut clusters: Vec<ClusterSpec> = passing
            .iter()
            .map(|&size| ClusterSpec { size, failing: false })
            .collect();
        for size in [10, 10, 10, 10] {
            clusters.push(ClusterSpec { size, failing: true });
        }
        Self {
            clusters,
            words_per_input: 6,
            input_vocabulary: 10,
            output_vocabulary: 30,
            motif: DEFAULT_MOTIF.to_string(),
            failure_p: 1.0,
            seed,
        }
    }

    /// Same shape as [`SyntheticSpec::standard`], scaled to `n` inputs (exact for n of 100 or more).
    pub fn scaled(n: usize, seed: u64) -> Self {
        let mut spec = Self::standard(seed);
        let base: usize = spec.clusters.iter().map(|c| c.size).sum();
        for c in &mut spec.clusters {
            c.size = (c.size * n).div_ceil(base).max(1);
        }
        // Trim the largest cluster so the total is exactly n.
        let total: usize = spec.clusters.iter().map(|c| c.size).sum();
        if total > n {
            spec.clusters[0].size -= (total - n).min(spec.clusters[0].size - 1);
        }
        spec
    }

    pub fn total(&self) -> usize {
        self.clusters.iter().map(|c| c.size).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorkload {
    pub pool: TestPool,
    pub rules: MockRules,
    pub template: PromptTemplate,
    /// Cluster index of each pool input, in pool order.
    pub cluster_of: Vec<usize>,
    pub spec: SyntheticSpec,
}

impl SyntheticWorkload {
    pub fn failing_ids(&self) -> BTreeSet<String> {
        self.pool
            .inputs()
            .iter()
            .zip(&self.cluster_of)
            .filter(|(_, c)| self.spec.clusters[**c].failing)
            .map(|(t, _)| t.id.clone())
            .collect()
    }
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

/// Fresh lowercase words that are not substrings of one another, so
/// substring predicates on topic words cannot collide.
fn distinct_words(rng: &mut ChaCha8Rng, count: usize, len: usize, taken: &mut Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w: String = (0..len)
            .map(|_| LETTERS[rng.random_range(0..LETTERS.len())] as char)
            .collect();
        if taken.iter().any(|t| t.contains(&w) || w.contains(t.as_str())) {
            continue;
        }
        taken.push(w.clone());
        out.push(w);
    }
    out
}

/// Bijective base-26 label: 0 -> "a", 25 -> "z", 26 -> "aa". Output words
/// stay free of digits so they never contain a numeric expected answer.
fn letter_code(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(LETTERS[i % 26]);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticWorkload {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = Vec::new();
    let mut inputs = Vec::with_capacity(spec.total());
    let mut cluster_of = Vec::with_capacity(spec.total());
    let mut vocabularies = Vec::with_capacity(spec.clusters.len());

    for (c, cluster) in spec.clusters.iter().enumerate() {
        let topic = distinct_words(&mut rng, 1, 6, &mut taken).remove(0);
        let words = distinct_words(&mut rng, spec.input_vocabulary, 4, &mut taken);
        for _ in 0..cluster.size {
            let mut tokens: Vec<String> = (0..spec.words_per_input)
                .map(|_| words[rng.random_range(0..words.len())].clone())
                .collect();
            tokens.push(topic.clone());
            tokens.shuffle(&mut rng);
            if cluster.failing {
                let at = rng.random_range(0..tokens.len());
                tokens[at] = format!("{}{}", spec.motif, tokens[at]);
            }
            let expected = rng.random_range(0..100u32).to_string();
            inputs.push((tokens.join(" "), expected));
            cluster_of.push(c);
        }
        vocabularies.push(VocabularyRule {
            predicate: Predicate::Contains(topic.clone()),
            words: (0..spec.output_vocabulary)
                .map(|i| format!("{topic}-{}", letter_code(i)))
                .collect(),
        });
    }

    // Interleave clusters so pool order carries no cluster signal.
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut rng);
    let width = inputs.len().to_string().len();
    let pool_inputs: Vec<TestInput> = order
        .iter()
        .enumerate()
        .map(|(i, &k)| TestInput::with_text(format!("s{:0width$}", i + 1), inputs[k].0.clone(), inputs[k].1.clone()))
        .collect();
    let cluster_of = order.iter().map(|&k| cluster_of[k]).collect();

    SyntheticWorkload {
        pool: TestPool::new(pool_inputs, "synthetic").expect("generated ids are unique"),
        rules: MockRules {
            rules: vec![FailureRule {
                predicate: Predicate::Contains(spec.motif.clone()),
                p: spec.failure_p,
            }],
            vocabularies,
            default_vocabulary: Vec::new(),
            filler_words: 6,
        },
        template: PromptTemplate::parse(DEFAULT_TEMPLATE).expect("built-in template parses"),
        cluster_of,
        spec: spec.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::MockBackend;

    #[test]
    fn standard_shape() {
        let w = generate(&SyntheticSpec::standard(1));
        assert_eq!(w.pool.len(), 200);
        assert_eq!(w.failing_ids().len(), 40);
        let mock = MockBackend::new(&w.rules, 0).unwrap();
        for (t, c) in w.pool.inputs().iter().zip(&w.cluster_of) {
            let failing = w.spec.clusters[*c].failing;
            assert_eq!(t.canonical_text().contains(DEFAULT_MOTIF), failing);
            assert_eq!(mock.failure_probability(t), if failing { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&SyntheticSpec::standard(4));
        let b = generate(&SyntheticSpec::standard(4));
        let c = generate(&SyntheticSpec::standard(5));
        assert_eq!(a.pool.inputs(), b.pool.inputs());
        assert_ne!(a.pool.inputs(), c.pool.inputs());
    }

    #[test]
    fn letter_codes() {
        let codes: Vec<String> = [0, 25, 26, 27, 701, 702].iter().map(|&i| letter_code(i)).collect();
        assert_eq!(codes, ["a", "z", "aa", "ab", "zz", "aaa"]);
    }

    #[test]
    fn scaled_sizes() {
        for n in [100, 200, 1000, 4000] {
            assert_eq!(generate(&SyntheticSpec::scaled(n, 0)).pool.len(), n, "{n}");
        }
    }

    #[test]
    fn cluster_vocabulary_reaches_outputs() {
        let w = generate(&SyntheticSpec::standard(2));
        let mock = MockBackend::new(&w.rules, 9).unwrap();
        let t = &w.pool.inputs()[0];
        let topic = &w.rules.vocabularies[w.cluster_of[0]].words[0];
        let prefix = topic.split('-').next().unwrap();
        let out = mock.generate(t, 0);
        assert!(out.contains(&format!("{prefix}-")), "{out}");
    }
}
