use serde::{Deserialize, Serialize};

use crate::cohort::N_CLASSES;
use crate::error::{Error, Result};

/// One-vs-one AUROC averaged over the class pairs present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvoAuroc {
    pub value: f64,
    /// Unordered class pairs left out because a class had no samples.
    pub skipped_pairs: Vec<(usize, usize)>,
}

/// Probability that a member of `pos` outscores a member of `neg`, ties 0.5,
/// via the rank-sum identity with midranks.
fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

pub fn auroc_ovo(scores: &[[f64; 3]], labels: &[usize]) -> Result<OvoAuroc> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(Error::Data(format!("label {l} outside 0..3")));
    }
    if scores.iter().flatten().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped_pairs = Vec::new();
    for i in 0..N_CLASSES {
        for j in i + 1..N_CLASSES {
            let col = |c: usize, k: usize| -> Vec<f64> {
                scores
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(s, _)| s[k])
                    .collect()
            };
            let (ii, ji) = (col(i, i), col(j, i));
            if ii.is_empty() || ji.is_empty() {
                skipped_pairs.push((i, j));
                continue;
            }
            let (jj, ij) = (col(j, j), col(i, j));
            total += 0.5 * (pairwise_auc(&ii, &ji) + pairwise_auc(&jj, &ij));
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Data("AUROC needs at least two classes present".into()));
    }
    Ok(OvoAuroc {
        value: total / used as f64,
        skipped_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n²) enumeration of concordant, discordant and tied pairs.
    fn brute_force(scores: &[[f64; 3]], labels: &[usize]) -> f64 {
        let a = |p: usize, q: usize| -> Option<f64> {
            let mut num = 0.0;
            let mut den = 0.0;
            for (s1, &l1) in scores.iter().zip(labels) {
                for (s2, &l2) in scores.iter().zip(labels) {
                    if l1 == p && l2 == q {
                        den += 1.0;
                        if s1[p] > s2[p] {
                            num += 1.0;
                        } else if s1[p] == s2[p] {
                            num += 0.5;
                        }
                    }
                }
            }
            (den > 0.0).then(|| num / den)
        };
        let mut vals = Vec::new();
        for i in 0..3 {
            for j in i + 1..3 {
                if let (Some(x), Some(y)) = (a(i, j), a(j, i)) {
                    vals.push((x + y) / 2.0);
                }
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn perfect_and_tied() {
        let labels = [0, 0, 1, 1, 2, 2];
        let perfect: Vec<[f64; 3]> = labels
            .iter()
            .map(|&l| {
                let mut s = [0.0; 3];
                s[l] = 1.0;
                s
            })
            .collect();
        assert_eq!(auroc_ovo(&perfect, &labels).unwrap().value, 1.0);
        assert_eq!(auroc_ovo(&[[0.3; 3]; 6], &labels).unwrap().value, 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auroc_ovo(&[[0.1, 0.2, 0.7]; 4], &[1, 1, 1, 1]).is_err());
    }

    #[test]
    fn absent_class_pairs_are_skipped() {
        let r = auroc_ovo(&[[0.9, 0.1, 0.0], [0.2, 0.8, 0.0]], &[0, 1]).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.skipped_pairs, vec![(0, 2), (1, 2)]);
    }

    #[test]
    fn six_sample_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels = [0, 1, 2, 0, 1, 2];
        let scores: Vec<[f64; 3]> = (0..6).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let got = auroc_ovo(&scores, &labels).unwrap().value;
        assert!((got - brute_force(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn two_hundred_random_instances_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for _ in 0..200 {
            let n = rng.gen_range(2..=30);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            if labels.iter().all(|&l| l == labels[0]) {
                continue;
            }
            // coarse grid forces ties
            let scores: Vec<[f64; 3]> = (0..n)
                .map(|_| [0; 3].map(|_: i32| rng.gen_range(0..6) as f64 / 5.0))
                .collect();
            let got = auroc_ovo(&scores, &labels).unwrap().value;
            assert!((got - brute_force(&scores, &labels)).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            raw in prop::collection::vec((0usize..3, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 4..30)
        ) {
            let labels: Vec<usize> = raw.iter().map(|r| r.0).collect();
            prop_assume!(labels.iter().any(|&l| l != labels[0]));
            let scores: Vec<[f64; 3]> = raw.iter().map(|r| [r.1, r.2, r.3]).collect();
            let transformed: Vec<[f64; 3]> = scores
                .iter()
                .map(|s| [s[0].exp(), 3.0 * s[1] - 7.0, s[2].powi(3)])
                .collect();
            let a = auroc_ovo(&scores, &labels).unwrap().value;
            let b = auroc_ovo(&transformed, &labels).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
