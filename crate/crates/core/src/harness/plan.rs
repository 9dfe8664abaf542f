//! Cross-validation split generators.
//!
//! A plan is a list of member splits; members sharing a `group` share a test
//! set and are fused into one ensemble prediction per test case.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Protocol};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub name: String,
    pub group: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub protocol: Protocol,
    pub splits: Vec<Split>,
}

impl ExperimentPlan {
    /// Checks every split is non-empty, disjoint and drawn from `known`, that
    /// members of a group agree on the test set, and that groups test
    /// disjoint cases.
    pub fn validate(&self, known: &[String]) -> Result<(), HarnessError> {
        let known: BTreeSet<&str> = known.iter().map(String::as_str).collect();
        if self.splits.is_empty() {
            return Err(HarnessError::Plan("no splits".into()));
        }
        let mut names = BTreeSet::new();
        let mut group_tests: BTreeMap<&str, &Vec<String>> = BTreeMap::new();
        for s in &self.splits {
            if !names.insert(s.name.as_str()) {
                return Err(HarnessError::Plan(format!("duplicate split name {:?}", s.name)));
            }
            for (what, set) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
                if set.is_empty() {
                    return Err(HarnessError::Plan(format!("{}: empty {what} set", s.name)));
                }
            }
            let mut seen = BTreeSet::new();
            for id in s.train.iter().chain(&s.val).chain(&s.test) {
                if !known.contains(id.as_str()) {
                    return Err(HarnessError::UnknownCase(id.clone()));
                }
                if !seen.insert(id.as_str()) {
                    return Err(HarnessError::Plan(format!("{}: {id:?} appears twice", s.name)));
                }
            }
            match group_tests.get(s.group.as_str()) {
                Some(t) if **t != s.test => {
                    return Err(HarnessError::Plan(format!("group {:?} has differing test sets", s.group)));
                }
                _ => {
                    group_tests.insert(&s.group, &s.test);
                }
            }
        }
        let mut tested = BTreeSet::new();
        for test in group_tests.values() {
            for id in test.iter() {
                if !tested.insert(id.as_str()) {
                    return Err(HarnessError::Plan(format!("{id:?} is tested by several groups")));
                }
            }
        }
        Ok(())
    }

    /// Splits grouped by `group`, in first-appearance order, with their
    /// member indices.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, s) in self.splits.iter().enumerate() {
            match out.iter_mut().find(|(g, _)| *g == s.group) {
                Some((_, v)) => v.push(i),
                None => out.push((s.group.clone(), vec![i])),
            }
        }
        out
    }
}

fn without(ids: &[String], drop: &[String]) -> Vec<String> {
    ids.iter().filter(|i| !drop.contains(i)).cloned().collect()
}

/// One member per (test, validation) pair; members with the same test case
/// form an ensemble. `n` ids give `n * (n - 1)` members.
pub fn plan_nested_loso(ids: &[String]) -> Result<ExperimentPlan, HarnessError> {
    if ids.len() < 3 {
        return Err(HarnessError::Plan(format!("nested-loso needs at least 3 ids, got {}", ids.len())));
    }
    let mut splits = Vec::new();
    for t in ids {
        for v in ids.iter().filter(|v| *v != t) {
            splits.push(Split {
                name: format!("test-{t}_val-{v}"),
                group: format!("test-{t}"),
                train: without(ids, &[t.clone(), v.clone()]),
                val: vec![v.clone()],
                test: vec![t.clone()],
            });
        }
    }
    Ok(ExperimentPlan {
        protocol: Protocol::NestedLoso,
        splits,
    })
}

/// One member per validation choice among `train_ids`, all evaluated on the
/// fixed `test_ids`.
pub fn plan_loso_ensemble(train_ids: &[String], test_ids: &[String]) -> Result<ExperimentPlan, HarnessError> {
    if train_ids.len() < 2 {
        return Err(HarnessError::Plan(format!(
            "loso-ensemble needs at least 2 training ids, got {}",
            train_ids.len()
        )));
    }
    if test_ids.is_empty() {
        return Err(HarnessError::Plan("loso-ensemble needs test ids".into()));
    }
    let splits = train_ids
        .iter()
        .map(|v| Split {
            name: format!("val-{v}"),
            group: "ensemble".into(),
            train: without(train_ids, std::slice::from_ref(v)),
            val: vec![v.clone()],
            test: test_ids.to_vec(),
        })
        .collect();
    Ok(ExperimentPlan {
        protocol: Protocol::LosoEnsemble,
        splits,
    })
}

/// Contiguous folds; the first `n % k` folds get one extra id.
pub fn partition(ids: &[String], k: usize) -> Vec<Vec<String>> {
    let k = k.max(1);
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let n = base + usize::from(i < extra);
        out.push(ids[at..at + n].to_vec());
        at += n;
    }
    out
}

/// Outer `k`-fold test partition; within each outer fold the remaining ids
/// are partitioned into `k` inner folds, each serving once as validation.
/// Gives `k²` members in `k` ensembles.
pub fn plan_nested_kfold(ids: &[String], k: usize) -> Result<ExperimentPlan, HarnessError> {
    if k < 2 {
        return Err(HarnessError::Plan(format!("nested-kfold needs k >= 2, got {k}")));
    }
    if ids.len() < k * k {
        return Err(HarnessError::Plan(format!(
            "nested-kfold with k = {k} needs at least {} ids, got {}",
            k * k,
            ids.len()
        )));
    }
    let mut splits = Vec::new();
    for (i, test) in partition(ids, k).into_iter().enumerate() {
        let rest = without(ids, &test);
        for (j, val) in partition(&rest, k).into_iter().enumerate() {
            splits.push(Split {
                name: format!("fold{i}-inner{j}"),
                group: format!("fold{i}"),
                train: without(&rest, &val),
                val,
                test: test.clone(),
            });
        }
    }
    Ok(ExperimentPlan {
        protocol: Protocol::NestedKfold,
        splits,
    })
}

/// Seeded random train/validation/test split; each part keeps input order.
pub fn fixed_split(ids: &[String], n_val: usize, n_test: usize, seed: u64) -> Result<Split, HarnessError> {
    if n_val == 0 || n_test == 0 || n_val + n_test >= ids.len() {
        return Err(HarnessError::Plan(format!(
            "cannot split {} ids into {n_val} validation and {n_test} test with a non-empty training set",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| {
        let mut sel: Vec<usize> = order[range].to_vec();
        sel.sort_unstable();
        sel.into_iter().map(|i| ids[i].clone()).collect::<Vec<_>>()
    };
    Ok(Split {
        name: "fixed".into(),
        group: "fixed".into(),
        test: pick(0..n_test),
        val: pick(n_test..n_test + n_val),
        train: pick(n_test + n_val..ids.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn partition_sizes() {
        let p = partition(&ids(10), 4);
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
        assert_eq!(p.concat(), ids(10));
    }

    #[test]
    fn kfold_rejects_small() {
        assert!(plan_nested_kfold(&ids(15), 4).is_err());
        assert!(plan_nested_kfold(&ids(16), 1).is_err());
        plan_nested_kfold(&ids(16), 4).unwrap().validate(&ids(16)).unwrap();
    }

    #[test]
    fn validate_catches_overlap() {
        let mut p = plan_nested_loso(&ids(3)).unwrap();
        p.validate(&ids(3)).unwrap();
        p.splits[0].train.push("c0".into());
        assert!(p.validate(&ids(3)).is_err());
    }
}
