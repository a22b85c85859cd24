use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Subtype, N_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerFold {
    pub fit_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OuterFold {
    pub test_ids: Vec<String>,
    pub train_ids: Vec<String>,
    pub inner: Vec<InnerFold>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub outer: Vec<OuterFold>,
    /// Folds whose held-out part lacks a class.
    pub warnings: Vec<String>,
}

/// Stratified split of `ids` into `k` parts. Within each class the ids are
/// shuffled and dealt round-robin; the dealing position carries over from
/// one class to the next so fold sizes stay balanced overall.
fn stratified_split(ids: &[(String, usize)], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); N_CLASSES];
    for (id, c) in ids {
        by_class[*c].push(id);
    }
    let mut parts = vec![Vec::new(); k];
    let mut next = 0;
    for members in &mut by_class {
        members.sort_unstable();
        members.shuffle(rng);
        for id in members.iter() {
            parts[next % k].push(id.to_string());
            next += 1;
        }
    }
    for p in &mut parts {
        p.sort();
    }
    parts
}

fn missing_classes(part: &[String], class_of: &BTreeMap<&str, usize>) -> Vec<&'static str> {
    let mut present = [false; N_CLASSES];
    for id in part {
        present[class_of[id.as_str()]] = true;
    }
    (0..N_CLASSES)
        .filter(|&c| !present[c])
        .map(|c| Subtype::ALL[c].name())
        .collect()
}

/// Deterministic nested stratified plan: `n_outer` test folds, each with
/// `n_inner` fit/validation splits of its training part.
pub fn make_fold_plan(
    labels: &BTreeMap<String, Subtype>,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if n_outer < 2 || n_inner < 2 {
        return Err(Error::Config(format!(
            "need at least 2 outer and 2 inner folds, got {n_outer} and {n_inner}"
        )));
    }
    if n_outer > labels.len() {
        return Err(Error::Data(format!(
            "{n_outer} outer folds requested for {} subjects",
            labels.len()
        )));
    }
    let all: Vec<(String, usize)> = labels.iter().map(|(id, s)| (id.clone(), s.index())).collect();
    let class_of: BTreeMap<&str, usize> = labels.iter().map(|(id, s)| (id.as_str(), s.index())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tests = stratified_split(&all, n_outer, &mut rng);

    let mut warnings = Vec::new();
    let mut outer = Vec::with_capacity(n_outer);
    for (o, test_ids) in tests.into_iter().enumerate() {
        let missing = missing_classes(&test_ids, &class_of);
        if !missing.is_empty() {
            warnings.push(format!("outer fold {o} test set has no {} subjects", missing.join("/")));
        }
        let train: Vec<(String, usize)> = all
            .iter()
            .filter(|(id, _)| test_ids.binary_search(id).is_err())
            .cloned()
            .collect();
        if train.len() < n_inner {
            return Err(Error::Data(format!(
                "outer fold {o} leaves {} training subjects for {n_inner} inner folds",
                train.len()
            )));
        }
        let mut inner_rng = ChaCha8Rng::seed_from_u64(seed);
        inner_rng.set_stream(o as u64 + 1);
        let vals = stratified_split(&train, n_inner, &mut inner_rng);
        let inner = vals
            .into_iter()
            .enumerate()
            .map(|(i, val_ids)| {
                let missing = missing_classes(&val_ids, &class_of);
                if !missing.is_empty() {
                    warnings.push(format!(
                        "outer fold {o} inner fold {i} validation set has no {} subjects",
                        missing.join("/")
                    ));
                }
                let fit_ids = train
                    .iter()
                    .filter(|(id, _)| val_ids.binary_search(id).is_err())
                    .map(|(id, _)| id.clone())
                    .collect();
                InnerFold { fit_ids, val_ids }
            })
            .collect();
        outer.push(OuterFold {
            test_ids,
            train_ids: train.into_iter().map(|(id, _)| id).collect(),
            inner,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FoldPlan {
        seed,
        outer,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn labels(counts: [usize; 3]) -> BTreeMap<String, Subtype> {
        let mut m = BTreeMap::new();
        let mut n = 0;
        for (c, &k) in counts.iter().enumerate() {
            for _ in 0..k {
                m.insert(format!("S{n:04}"), Subtype::ALL[c]);
                n += 1;
            }
        }
        m
    }

    fn set(v: &[String]) -> BTreeSet<&str> {
        v.iter().map(|s| s.as_str()).collect()
    }

    #[test]
    fn one_subject_per_fold() {
        let plan = make_fold_plan(&labels([4, 3, 3]), 10, 3, 0).unwrap();
        assert!(plan.outer.iter().all(|f| f.test_ids.len() == 1));
    }

    #[test]
    fn class_counts_per_fold() {
        let l = labels([60, 30, 10]);
        let plan = make_fold_plan(&l, 10, 5, 3).unwrap();
        for f in &plan.outer {
            let mut counts = [0i64; 3];
            for id in &f.test_ids {
                counts[l[id].index()] += 1;
            }
            for (got, want) in counts.iter().zip([6, 3, 1]) {
                assert!((got - want).abs() <= 1, "{counts:?}");
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let l = labels([20, 20, 5]);
        assert_eq!(make_fold_plan(&l, 5, 3, 9).unwrap(), make_fold_plan(&l, 5, 3, 9).unwrap());
        assert_ne!(make_fold_plan(&l, 5, 3, 9).unwrap(), make_fold_plan(&l, 5, 3, 10).unwrap());
    }

    #[test]
    fn minority_class_gaps_are_flagged() {
        let plan = make_fold_plan(&labels([177, 302, 15]), 10, 5, 0).unwrap();
        assert!(plan.warnings.is_empty() || plan.warnings.iter().all(|w| w.contains("fast")));
        let sparse = make_fold_plan(&labels([30, 30, 3]), 10, 5, 0).unwrap();
        assert!(sparse.warnings.iter().any(|w| w.contains("outer fold") && w.contains("fast")));
    }

    #[test]
    fn too_many_folds_is_fatal() {
        assert!(make_fold_plan(&labels([2, 2, 1]), 10, 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn leakage_free(seed in any::<u64>(), a in 5usize..40, b in 5usize..40, c in 1usize..10) {
            let l = labels([a, b, c]);
            let plan = make_fold_plan(&l, 5, 3, seed).unwrap();
            let mut seen = BTreeSet::new();
            for f in &plan.outer {
                let test = set(&f.test_ids);
                let train = set(&f.train_ids);
                prop_assert!(test.is_disjoint(&train));
                prop_assert_eq!(test.len() + train.len(), l.len());
                for id in &test {
                    prop_assert!(seen.insert(*id), "test sets overlap");
                }
                for inner in &f.inner {
                    let fit = set(&inner.fit_ids);
                    let val = set(&inner.val_ids);
                    prop_assert!(fit.is_disjoint(&val));
                    prop_assert!(fit.is_disjoint(&test));
                    prop_assert!(val.is_disjoint(&test));
                    prop_assert_eq!(fit.union(&val).copied().collect::<BTreeSet<_>>(), train.clone());
                }
            }
            prop_assert_eq!(seen.len(), l.len());
        }
    }
}
