//! Test set diameter baseline.
//!
//! The multiset diameter of a set X is
//! `(C(concat X) - min C(x)) / max C(concat X \ {x})` with members concatenated
//! in ascending id order. [`tsdm_select`] starts from the whole pool and keeps
//! removing the element whose removal leaves the largest diameter.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{canonical_text, TestInput, TestPool};
use crate::distance::Compressor;
use crate::manifest::digest_json;
use crate::selection::{Ordering, Score, Step};

#[derive(Debug, Error, PartialEq)]
pub enum TsdmError {
    #[error("diameter needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("target size {n} outside [2, {pool}]")]
    BadTarget { n: usize, pool: usize },
}

/// Multiset NCD of `parts`, concatenated in the order given.
pub fn ncd_multiset(parts: &[&[u8]], c: &Compressor) -> Result<f64, TsdmError> {
    if parts.len() < 2 {
        return Err(TsdmError::TooFewMembers(parts.len()));
    }
    let sizes: Vec<usize> = parts.iter().map(|p| c.compressed_size(p)).collect();
    let whole = c.compressed_size_of_parts(parts);
    let mut rest = Vec::with_capacity(parts.len() - 1);
    let mut denom = 0;
    for skip in 0..parts.len() {
        rest.clear();
        rest.extend(parts.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, p)| *p));
        denom = denom.max(c.compressed_size_of_parts(&rest));
    }
    Ok(multiset_value(whole, *sizes.iter().min().unwrap(), denom))
}

fn multiset_value(whole: usize, min_single: usize, max_rest: usize) -> f64 {
    (whole as f64 - min_single as f64) / max_rest as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultisetDiameter {
    pub value: f64,
    pub member_ids: Vec<String>,
}

/// Diameter of a set of test inputs; 0 for fewer than two members.
pub fn multiset_diameter(members: &[&TestInput], c: &Compressor) -> MultisetDiameter {
    let mut sorted: Vec<&TestInput> = members.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let texts: Vec<Vec<u8>> = sorted.iter().map(|t| canonical_text(t).into_bytes()).collect();
    let parts: Vec<&[u8]> = texts.iter().map(Vec::as_slice).collect();
    MultisetDiameter {
        value: ncd_multiset(&parts, c).unwrap_or(0.0),
        member_ids: sorted.iter().map(|t| t.id.clone()).collect(),
    }
}

/// One backward-elimination step, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Elimination {
    pub removed: String,
    /// Diameter of the remaining set after each possible removal, by id.
    pub candidates: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct TsdmRun {
    pub ordering: Ordering,
    pub survivors: Vec<String>,
    pub eliminations: Vec<Elimination>,
}

pub fn tsdm_select(pool: &TestPool, n: usize, c: &Compressor) -> Result<TsdmRun, TsdmError> {
    if n < 2 || n > pool.len() {
        return Err(TsdmError::BadTarget { n, pool: pool.len() });
    }
    let mut members: Vec<&TestInput> = pool.inputs().iter().collect();
    members.sort_by(|a, b| a.id.cmp(&b.id));
    let texts: Vec<Vec<u8>> = members.iter().map(|t| canonical_text(t).into_bytes()).collect();
    let singles: Vec<usize> = texts.par_iter().map(|t| c.compressed_size(t)).collect();

    // Positions into `members`, always ascending so concatenations follow id order.
    let mut alive: Vec<usize> = (0..members.len()).collect();
    let concat_without = |alive: &[usize], skip: &[usize]| {
        let parts: Vec<&[u8]> = alive
            .iter()
            .filter(|i| !skip.contains(i))
            .map(|&i| texts[i].as_slice())
            .collect();
        c.compressed_size_of_parts(&parts)
    };

    // without_one[a] = C(alive \ {alive[a]}).
    let mut without_one: Vec<usize> = (0..alive.len())
        .into_par_iter()
        .map(|a| concat_without(&alive, &[alive[a]]))
        .collect();
    let mut eliminations = Vec::new();
    let mut removed_scores = Vec::new();

    while alive.len() > n {
        let s = alive.len();
        let pairs: Vec<(usize, usize)> = (0..s).flat_map(|a| (a + 1..s).map(move |b| (a, b))).collect();
        let pair_sizes: Vec<usize> = pairs
            .par_iter()
            .map(|&(a, b)| concat_without(&alive, &[alive[a], alive[b]]))
            .collect();
        let mut without_two = vec![0usize; s * s];
        for (&(a, b), &size) in pairs.iter().zip(&pair_sizes) {
            without_two[a * s + b] = size;
            without_two[b * s + a] = size;
        }

        let scores: Vec<f64> = (0..s)
            .map(|a| {
                let min_single = (0..s).filter(|&x| x != a).map(|x| singles[alive[x]]).min().unwrap();
                let max_rest = (0..s)
                    .filter(|&y| y != a)
                    .map(|y| without_two[a * s + y])
                    .max()
                    .unwrap();
                multiset_value(without_one[a], min_single, max_rest)
            })
            .collect();
        // Largest diameter wins; among equal diameters the largest id goes first.
        let mut best = 0;
        for a in 1..s {
            if scores[a] >= scores[best] {
                best = a;
            }
        }
        eliminations.push(Elimination {
            removed: members[alive[best]].id.clone(),
            candidates: (0..s).map(|a| (members[alive[a]].id.clone(), scores[a])).collect(),
        });
        removed_scores.push((alive[best], scores[best]));
        without_one = (0..s)
            .filter(|&y| y != best)
            .map(|y| without_two[best * s + y])
            .collect();
        alive.remove(best);
    }

    let final_parts: Vec<&[u8]> = alive.iter().map(|&i| texts[i].as_slice()).collect();
    let diameter = ncd_multiset(&final_parts, c)?;
    let mut steps: Vec<Step> = alive
        .iter()
        .map(|&i| Step {
            id: members[i].id.clone(),
            score: Score::Finite(diameter),
            refset_size: 0,
        })
        .collect();
    steps.extend(removed_scores.iter().rev().map(|&(i, d)| Step {
        id: members[i].id.clone(),
        score: Score::Finite(d),
        refset_size: 0,
    }));

    Ok(TsdmRun {
        ordering: Ordering {
            steps,
            config_digest: digest_json(&tsdm_describe(n, c)),
        },
        survivors: alive.iter().map(|&i| members[i].id.clone()).collect(),
        eliminations,
    })
}

pub fn tsdm_describe(n: usize, c: &Compressor) -> serde_json::Value {
    serde_json::json!({
        "method": "tsdm",
        "n_target": n,
        "compressor": c.id(),
        "multiset_formula": "(C(concat X) - min C(x)) / max C(concat X minus x), ids ascending",
        "ordering": "survivors by id, then removed elements in reverse removal order",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::DeflateEncoder;
    use flate2::Compression;
    use proptest::prelude::*;
    use std::io::Write;

    // Independent reference: materialize every concatenation and compress it.
    fn c_oracle(data: &[u8]) -> usize {
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(9));
        enc.write_all(data).unwrap();
        enc.finish().unwrap().len()
    }

    fn ncd_multiset_oracle(xs: &[Vec<u8>]) -> f64 {
        let whole = c_oracle(&xs.concat());
        let min_single = xs.iter().map(|x| c_oracle(x)).min().unwrap();
        let max_rest = (0..xs.len())
            .map(|k| {
                let rest: Vec<u8> = xs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != k)
                    .flat_map(|(_, x)| x.clone())
                    .collect();
                c_oracle(&rest)
            })
            .max()
            .unwrap();
        (whole as f64 - min_single as f64) / max_rest as f64
    }

    fn pool_of(texts: &[(&str, &str)]) -> TestPool {
        TestPool::new(
            texts.iter().map(|(id, t)| TestInput::with_text(*id, *t, "")).collect(),
            "mem",
        )
        .unwrap()
    }

    #[test]
    fn duplicate_pair_is_small() {
        let x = "ab".repeat(200);
        let v = ncd_multiset(&[x.as_bytes(), x.as_bytes()], &Compressor::default()).unwrap();
        // C(x) = 9 and C(xx) = 11 with the pinned compressor.
        assert_eq!(v, 2.0 / 9.0);
        assert_eq!(v, ncd_multiset_oracle(&[x.clone().into_bytes(), x.into_bytes()]));
    }

    #[test]
    fn pair_reduces_to_one_way_ncd() {
        let c = Compressor::default();
        let (x, y) = (b"the quick brown fox".as_slice(), b"jumps over the lazy dog".as_slice());
        let (cx, cy) = (c_oracle(x), c_oracle(y));
        let cxy = c_oracle(&[x, y].concat());
        let expected = (cxy as f64 - cx.min(cy) as f64) / cx.max(cy) as f64;
        assert_eq!(ncd_multiset(&[x, y], &c).unwrap(), expected);
    }

    #[test]
    fn identical_member_barely_moves_larger_sets() {
        let c = Compressor::default();
        let base: Vec<&[u8]> = [
            "alpha beta gamma",
            "delta epsilon zeta",
            "eta theta iota",
            "kappa lambda mu",
            "nu xi omicron",
        ]
        .iter()
        .map(|s| s.as_bytes())
        .collect();
        let mut with_dup = base.clone();
        with_dup.insert(1, base[0]);
        let before = ncd_multiset(&base, &c).unwrap();
        let after = ncd_multiset(&with_dup, &c).unwrap();
        assert!((after - before).abs() < 0.05, "{before} {after}");
        assert_eq!(
            after,
            ncd_multiset_oracle(&with_dup.iter().map(|p| p.to_vec()).collect::<Vec<_>>())
        );
    }

    #[test]
    fn duplicate_in_a_pair_changes_the_denominator() {
        // Going from {x, y} to {x, x, y} swaps max(C(x), C(y)) for C(xy) in the
        // denominator, so the value moves a lot for dissimilar pairs.
        let c = Compressor::default();
        let x = b"alpha beta gamma delta epsilon".as_slice();
        let y = b"zeta eta theta iota kappa lambda".as_slice();
        let two = ncd_multiset(&[x, y], &c).unwrap();
        let three = ncd_multiset(&[x, x, y], &c).unwrap();
        assert_eq!(two, ncd_multiset_oracle(&[x.to_vec(), y.to_vec()]));
        assert_eq!(three, ncd_multiset_oracle(&[x.to_vec(), x.to_vec(), y.to_vec()]));
        assert_eq!((two, three), (0.8, 10.0 / 17.0));
    }

    #[test]
    fn too_few_members() {
        assert_eq!(
            ncd_multiset(&[b"a"], &Compressor::default()),
            Err(TsdmError::TooFewMembers(1))
        );
        let t = TestInput::with_text("a", "a", "");
        assert_eq!(multiset_diameter(&[&t], &Compressor::default()).value, 0.0);
    }

    #[test]
    fn three_element_pool_keeps_best_pair() {
        let pool = pool_of(&[("aaaa", "aaaa"), ("aaab", "aaab"), ("zzzz", "zzzz")]);
        let c = Compressor::default();
        let run = tsdm_select(&pool, 2, &c).unwrap();
        let pairs = [("aaaa", "aaab"), ("aaaa", "zzzz"), ("aaab", "zzzz")];
        let values: Vec<f64> = pairs
            .iter()
            .map(|(a, b)| ncd_multiset_oracle(&[a.as_bytes().to_vec(), b.as_bytes().to_vec()]))
            .collect();
        // Both pairs with "zzzz" tie; the tie removes the larger id "aaab".
        assert_eq!(values[1], values[2]);
        assert!(values[1] > values[0]);
        assert_eq!(run.survivors, vec!["aaaa", "zzzz"]);
        assert_eq!(run.ordering.ids(), vec!["aaaa", "zzzz", "aaab"]);
        assert_eq!(run.ordering.len(), 3);
    }

    #[test]
    fn full_target_removes_nothing() {
        let pool = pool_of(&[("b", "x"), ("a", "y"), ("c", "z")]);
        let run = tsdm_select(&pool, 3, &Compressor::default()).unwrap();
        assert!(run.eliminations.is_empty());
        assert_eq!(run.ordering.ids(), vec!["a", "b", "c"]);
    }

    #[test]
    fn identical_members_keep_smallest_ids() {
        let pool = pool_of(&[("t3", "same"), ("t1", "same"), ("t4", "same"), ("t2", "same")]);
        let run = tsdm_select(&pool, 2, &Compressor::default()).unwrap();
        assert_eq!(run.survivors, vec!["t1", "t2"]);
        assert_eq!(run.ordering.ids(), vec!["t1", "t2", "t3", "t4"]);
    }

    #[test]
    fn bad_targets() {
        let pool = pool_of(&[("a", "x"), ("b", "y")]);
        assert!(tsdm_select(&pool, 1, &Compressor::default()).is_err());
        assert!(tsdm_select(&pool, 3, &Compressor::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_greedy_consistency(texts in proptest::collection::vec("[a-e]{1,10}", 3..=12), frac in 0.0f64..1.0) {
            let inputs: Vec<TestInput> = texts.iter().enumerate().map(|(i, t)| TestInput::with_text(format!("t{i:02}"), t.as_str(), "")).collect();
            let pool = TestPool::new(inputs, "mem").unwrap();
            let n = 2 + (frac * (pool.len() - 2) as f64) as usize;
            let run = tsdm_select(&pool, n, &Compressor::default()).unwrap();
            prop_assert_eq!(run.eliminations.len(), pool.len() - n);
            prop_assert_eq!(run.ordering.len(), pool.len());

            let mut alive: Vec<String> = pool.ids().map(String::from).collect();
            alive.sort();
            for elim in &run.eliminations {
                // Recompute the diameter of every single-removal set from scratch.
                let brute: Vec<f64> = alive.iter().map(|skip| {
                    let xs: Vec<Vec<u8>> = alive.iter().filter(|id| *id != skip).map(|id| pool.get(id).unwrap().canonical_text().into_bytes()).collect();
                    ncd_multiset_oracle(&xs)
                }).collect();
                let removed = alive.iter().position(|id| *id == elim.removed).unwrap();
                prop_assert!(brute.iter().all(|b| brute[removed] >= *b));
                prop_assert_eq!(brute.iter().rposition(|b| *b == brute[removed]), Some(removed));
                alive.remove(removed);
            }
            prop_assert_eq!(&run.survivors, &alive);
        }
    }
}
