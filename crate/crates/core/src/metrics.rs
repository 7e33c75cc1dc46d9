//! Untangling accuracy against ground-truth concerns.
//!
//! Predicted groups are aligned with true concerns by a maximum-weight
//! one-to-one matching on the group x concern contingency table; a changed
//! statement is correct when its group is matched to its own concern.
//! Fractions are generic over the scalar so scores can be computed exactly
//! with rationals as well as in floating point.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

pub trait Scalar: Num + FromPrimitive + Clone + PartialOrd + Debug {}

impl<T> Scalar for T where T: Num + FromPrimitive + Clone + PartialOrd + Debug {}

fn ratio<S: Scalar>(num: usize, den: usize) -> S {
    let n = S::from_usize(num).expect("count fits the scalar type");
    let d = S::from_usize(den).expect("count fits the scalar type");
    n / d
}

pub type Label = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth<K: Ord> {
    pub labels: BTreeMap<K, Label>,
    pub total_statements: usize,
}

impl<K: Ord> GroundTruth<K> {
    pub fn concern_count(&self) -> usize {
        self.labels.values().collect::<BTreeSet<_>>().len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction<K: Ord> {
    pub assignment: BTreeMap<K, String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("ground truth has no changed statements")]
    EmptyGroundTruth,
    #[error("no commit has exactly two or three concerns")]
    NoEligibleCommits,
    #[error("prediction and ground truth cover different statements")]
    KeyMismatch,
    #[error("total statement count {total} is below the {changed} changed statements")]
    TotalTooSmall { total: usize, changed: usize },
    #[error("nothing to aggregate")]
    EmptyInput,
}

/// Shorter ids first, so `G2` sorts before `G10`.
fn group_order(a: &String, b: &String) -> std::cmp::Ordering {
    (a.len(), a).cmp(&(b.len(), b))
}

/// Maximum-weight perfect matching on a square matrix. Returns the total
/// weight and `row -> column`.
fn hungarian(w: &[Vec<i64>]) -> (i64, Vec<usize>) {
    let n = w.len();
    if n == 0 {
        return (0, vec![]);
    }
    // Minimize negated weights; 1-based potentials as in the classic
    // shortest-augmenting-path formulation.
    let cost = |i: usize, j: usize| -w[i - 1][j - 1];
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| w[i][assignment[i]]).sum();
    (total, assignment)
}

fn best_on(w: &[Vec<i64>], rows: &[usize], cols: &[usize]) -> i64 {
    let sub: Vec<Vec<i64>> = rows.iter().map(|&r| cols.iter().map(|&c| w[r][c]).collect()).collect();
    hungarian(&sub).0
}

/// Optimal injective `group -> label` map. Among optimal matchings the
/// lexicographically smallest is chosen: earlier groups take the earliest
/// label that still allows an optimal total.
pub fn optimal_label_matching<K: Ord>(
    pred: &Prediction<K>,
    truth: &GroundTruth<K>,
) -> Result<BTreeMap<String, Label>, MetricsError> {
    if !pred.assignment.keys().eq(truth.labels.keys()) {
        return Err(MetricsError::KeyMismatch);
    }
    let mut groups: Vec<&String> = pred.assignment.values().collect::<BTreeSet<_>>().into_iter().collect();
    groups.sort_by(|a, b| group_order(a, b));
    let labels: Vec<Label> = truth.labels.values().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n = groups.len().max(labels.len());
    let mut w = vec![vec![0i64; n]; n];
    for (k, g) in &pred.assignment {
        let gi = groups.iter().position(|x| *x == g).expect("collected above");
        let li = labels.binary_search(&truth.labels[k]).expect("collected above");
        w[gi][li] += 1;
    }
    let best = hungarian(&w).0;

    let mut free_rows: Vec<usize> = (0..n).collect();
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut fixed_total = 0;
    let mut matching = BTreeMap::new();
    for gi in 0..groups.len() {
        free_rows.retain(|&r| r != gi);
        let choice = free_cols
            .iter()
            .copied()
            .find(|&c| {
                let rest: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
                fixed_total + w[gi][c] + best_on(&w, &free_rows, &rest) == best
            })
            .expect("some column completes an optimal matching");
        fixed_total += w[gi][choice];
        free_cols.retain(|&c| c != choice);
        if choice < labels.len() {
            matching.insert(groups[gi].clone(), labels[choice]);
        }
    }
    Ok(matching)
}

/// Changed statements whose matched label is their true label.
pub fn correct_count<K: Ord>(pred: &Prediction<K>, truth: &GroundTruth<K>) -> Result<usize, MetricsError> {
    let matching = optimal_label_matching(pred, truth)?;
    Ok(pred
        .assignment
        .iter()
        .filter(|(k, g)| matching.get(*g) == Some(&truth.labels[*k]))
        .count())
}

pub fn acc_changed<S: Scalar, K: Ord>(pred: &Prediction<K>, truth: &GroundTruth<K>) -> Result<S, MetricsError> {
    if truth.labels.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(ratio(correct_count(pred, truth)?, truth.labels.len()))
}

/// Unchanged statements count as correct.
pub fn acc_absolute<S: Scalar, K: Ord>(pred: &Prediction<K>, truth: &GroundTruth<K>) -> Result<S, MetricsError> {
    let changed = truth.labels.len();
    if truth.total_statements < changed {
        return Err(MetricsError::TotalTooSmall { total: truth.total_statements, changed });
    }
    if changed == 0 {
        return Ok(S::one());
    }
    let correct = correct_count(pred, truth)?;
    Ok(ratio(truth.total_statements - changed + correct, truth.total_statements))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<S> {
    pub acc_c: S,
    pub acc_a: S,
    pub correct: usize,
    pub changed: usize,
    pub total_statements: usize,
    pub concern_count: usize,
}

pub fn score<S: Scalar, K: Ord>(pred: &Prediction<K>, truth: &GroundTruth<K>) -> Result<MetricsReport<S>, MetricsError> {
    Ok(MetricsReport {
        acc_c: acc_changed(pred, truth)?,
        acc_a: acc_absolute(pred, truth)?,
        correct: correct_count(pred, truth)?,
        changed: truth.labels.len(),
        total_statements: truth.total_statements,
        concern_count: truth.concern_count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate<S> {
    pub oa: S,
    pub avg: S,
}

/// Statement-weighted accuracy over all commits.
pub fn overall_accuracy<S: Scalar>(reports: &[MetricsReport<S>]) -> Result<S, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct: usize = reports.iter().map(|r| r.correct).sum();
    let changed: usize = reports.iter().map(|r| r.changed).sum();
    if changed == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(ratio(correct, changed))
}

/// Mean of the per-bucket mean `acc_c` over 2-concern and 3-concern
/// commits; an empty bucket is left out.
pub fn bucket_average<S: Scalar>(reports: &[MetricsReport<S>]) -> Result<S, MetricsError> {
    let mut means = Vec::new();
    for k in [2, 3] {
        let bucket: Vec<&MetricsReport<S>> = reports.iter().filter(|r| r.concern_count == k).collect();
        if !bucket.is_empty() {
            let sum = bucket.iter().fold(S::zero(), |acc, r| acc + r.acc_c.clone());
            means.push(sum / S::from_usize(bucket.len()).expect("count fits the scalar type"));
        }
    }
    if means.is_empty() {
        return Err(MetricsError::NoEligibleCommits);
    }
    let count = S::from_usize(means.len()).expect("count fits the scalar type");
    Ok(means.into_iter().fold(S::zero(), |a, b| a + b) / count)
}

pub fn aggregate<S: Scalar>(reports: &[MetricsReport<S>]) -> Result<Aggregate<S>, MetricsError> {
    Ok(Aggregate { oa: overall_accuracy(reports)?, avg: bucket_average(reports)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    fn instance(pairs: &[(&str, Label)], total: usize) -> (Prediction<usize>, GroundTruth<usize>) {
        let assignment = pairs.iter().enumerate().map(|(i, (g, _))| (i, g.to_string())).collect();
        let labels = pairs.iter().enumerate().map(|(i, (_, l))| (i, *l)).collect();
        (Prediction { assignment }, GroundTruth { labels, total_statements: total })
    }

    #[test]
    fn worked_example_is_exact() {
        // 5 changed of 100: G1 = {a,a,b}, G2 = {a,b}. Best: G1->a, G2->b.
        let (p, t) = instance(&[("G1", 0), ("G1", 0), ("G2", 0), ("G1", 1), ("G2", 1)], 100);
        assert_eq!(acc_changed::<f64, _>(&p, &t).unwrap(), 0.60);
        assert_eq!(acc_absolute::<f64, _>(&p, &t).unwrap(), 0.98);
        assert_eq!(acc_changed::<Ratio<i64>, _>(&p, &t).unwrap(), Ratio::new(3, 5));
        assert_eq!(acc_absolute::<Ratio<i64>, _>(&p, &t).unwrap(), Ratio::new(49, 50));
        assert_eq!(acc_changed::<f32, _>(&p, &t).unwrap(), 0.6f32);
    }

    #[test]
    fn contingency_example() {
        // [[3,0],[1,1]]
        let (p, t) = instance(&[("G1", 0), ("G1", 0), ("G1", 0), ("G2", 0), ("G2", 1)], 5);
        let m = optimal_label_matching(&p, &t).unwrap();
        assert_eq!(m, BTreeMap::from([("G1".to_string(), 0), ("G2".to_string(), 1)]));
        assert_eq!(correct_count(&p, &t).unwrap(), 4);
    }

    #[test]
    fn one_group_for_two_concerns() {
        let pairs: Vec<(&str, Label)> = (0..8).map(|i| ("G1", i / 4)).collect();
        let (p, t) = instance(&pairs, 8);
        assert_eq!(acc_changed::<f64, _>(&p, &t).unwrap(), 0.5);
        // Tie between the two concerns goes to the first label.
        assert_eq!(optimal_label_matching(&p, &t).unwrap()["G1"], 0);
    }

    #[test]
    fn absolute_accuracy_cases() {
        let (p, t) = instance(&[("G1", 0), ("G1", 0), ("G2", 1), ("G3", 1)], 10);
        assert_eq!(correct_count(&p, &t).unwrap(), 3);
        let (p, t) = instance(&[("G1", 0), ("G2", 0), ("G3", 1), ("G4", 1)], 10);
        assert_eq!(acc_absolute::<f64, _>(&p, &t).unwrap(), 0.8);
        let (p, t) = instance(&[], 10);
        assert_eq!(acc_absolute::<f64, _>(&p, &t).unwrap(), 1.0);
        assert_eq!(acc_changed::<f64, _>(&p, &t), Err(MetricsError::EmptyGroundTruth));
    }

    #[test]
    fn mismatched_keys() {
        let (p, _) = instance(&[("G1", 0)], 3);
        let (_, t) = instance(&[("G1", 0), ("G1", 1)], 3);
        assert_eq!(optimal_label_matching(&p, &t), Err(MetricsError::KeyMismatch));
    }

    fn report(correct: usize, changed: usize, concerns: usize) -> MetricsReport<Ratio<i64>> {
        MetricsReport {
            acc_c: Ratio::new(correct as i64, changed as i64),
            acc_a: Ratio::from_integer(1),
            correct,
            changed,
            total_statements: changed,
            concern_count: concerns,
        }
    }

    #[test]
    fn overall_vs_bucket_average() {
        let agg = aggregate(&[report(8, 10, 2), report(0, 2, 3)]).unwrap();
        assert_eq!(agg.oa, Ratio::new(2, 3));
        assert_eq!(agg.avg, Ratio::new(2, 5));
        let single = aggregate(&[report(3, 4, 3)]).unwrap();
        assert_eq!(single.oa, single.avg);
        assert_eq!(bucket_average(&[report(1, 1, 4)]), Err(MetricsError::NoEligibleCommits));
        // Buckets, not commits, are averaged.
        let agg = aggregate(&[report(1, 1, 2), report(1, 1, 2), report(0, 1, 3)]).unwrap();
        assert_eq!(agg.avg, Ratio::new(1, 2));
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Exhaustive maximum over all injective group -> label maps, using
    /// padding so either side may be larger.
    fn brute_force(pairs: &[(usize, usize)]) -> usize {
        let groups = pairs.iter().map(|p| p.0).max().map_or(0, |m| m + 1);
        let labels = pairs.iter().map(|p| p.1).max().map_or(0, |m| m + 1);
        let n = groups.max(labels);
        permutations(n)
            .into_iter()
            .map(|perm| pairs.iter().filter(|(g, l)| perm[*g] == *l).count())
            .max()
            .unwrap_or(0)
    }

    fn random_instance() -> impl Strategy<Value = Vec<(usize, usize)>> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(g, c)| proptest::collection::vec((0..g, 0..c), 1..=30))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn matching_equals_permutation_oracle(pairs in random_instance()) {
            let named: Vec<(String, Label)> = pairs.iter().map(|(g, l)| (format!("G{}", g + 1), *l)).collect();
            let refs: Vec<(&str, Label)> = named.iter().map(|(g, l)| (g.as_str(), *l)).collect();
            let (p, t) = instance(&refs, 40);
            prop_assert_eq!(correct_count(&p, &t).unwrap(), brute_force(&pairs));
        }

        #[test]
        fn renaming_groups_keeps_scores(pairs in random_instance(), shift in 1usize..50) {
            let named: Vec<(String, Label)> = pairs.iter().map(|(g, l)| (format!("G{}", g + 1), *l)).collect();
            let renamed: Vec<(String, Label)> = pairs.iter().map(|(g, l)| (format!("X{}", (g + shift) * 7), *l)).collect();
            let a: Vec<(&str, Label)> = named.iter().map(|(g, l)| (g.as_str(), *l)).collect();
            let b: Vec<(&str, Label)> = renamed.iter().map(|(g, l)| (g.as_str(), *l)).collect();
            let (p1, t1) = instance(&a, 60);
            let (p2, t2) = instance(&b, 60);
            prop_assert_eq!(score::<Ratio<i64>, _>(&p1, &t1).unwrap(), score::<Ratio<i64>, _>(&p2, &t2).unwrap());
        }

        #[test]
        fn absolute_follows_from_changed(pairs in random_instance(), extra in 0usize..50) {
            let named: Vec<(String, Label)> = pairs.iter().map(|(g, l)| (format!("G{}", g + 1), *l)).collect();
            let refs: Vec<(&str, Label)> = named.iter().map(|(g, l)| (g.as_str(), *l)).collect();
            let total = pairs.len() + extra;
            let (p, t) = instance(&refs, total);
            let r = score::<Ratio<i64>, _>(&p, &t).unwrap();
            let changed = Ratio::from_integer(r.changed as i64);
            let total_r = Ratio::from_integer(total as i64);
            prop_assert_eq!(r.acc_a, (total_r - changed + r.acc_c * changed) / total_r);
        }
    }
}
