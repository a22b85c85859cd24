use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ingest::DroppedSubject;
use super::{CohortTable, Subtype, Visit, N_CLASSES};
use crate::error::{Error, Result};

/// MMSE change from baseline at months 6, 12 and 24.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTrajectory {
    pub subject_id: String,
    pub deltas: [f64; 3],
}

/// Baseline-anchored MMSE deltas; subjects missing any visit are reported.
pub fn compute_mmse_deltas(cohort: &CohortTable) -> (Vec<DeltaTrajectory>, Vec<DroppedSubject>) {
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    for r in &cohort.records {
        let missing: Vec<String> = Visit::ALL
            .iter()
            .filter(|v| !r.mmse.contains_key(v))
            .map(|v| format!("{v:?}"))
            .collect();
        if !missing.is_empty() {
            dropped.push(DroppedSubject {
                subject_id: r.subject_id.clone(),
                reason: format!("missing mmse visit {}", missing.join(", ")),
            });
            continue;
        }
        let bl = r.mmse[&Visit::Baseline] as f64;
        out.push(DeltaTrajectory {
            subject_id: r.subject_id.clone(),
            deltas: [
                r.mmse[&Visit::M06] as f64 - bl,
                r.mmse[&Visit::M12] as f64 - bl,
                r.mmse[&Visit::M24] as f64 - bl,
            ],
        });
    }
    (out, dropped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 3,
            n_restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Restarts discarded because a cluster ended up empty.
    pub empty_restarts: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                pick = i;
                break;
            }
            target -= w;
            pick = i;
        }
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from one seeding. `None` when a cluster empties out.
fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> Option<KMeansFit> {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(&counts) {
            *c = s.into_iter().map(|v| v / *n as f64).collect();
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    if counts.contains(&0) {
        return None;
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    Some(KMeansFit {
        assignments,
        centroids,
        inertia,
        empty_restarts: 0,
    })
}

/// k-means++ seeded Lloyd's algorithm, best of `n_restarts` by inertia.
pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig, seed: u64) -> Result<KMeansFit> {
    let k = config.k;
    if k == 0 || config.n_restarts == 0 {
        return Err(Error::Config("k-means needs k ≥ 1 and n_restarts ≥ 1".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.contains(&p) {
            distinct.push(p);
            if distinct.len() >= k {
                break;
            }
        }
    }
    if distinct.len() < k {
        return Err(Error::Data(format!(
            "k-means needs at least {k} distinct points, found {}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    let mut empty = 0;
    for _ in 0..config.n_restarts {
        let init = plus_plus_init(points, k, &mut rng);
        match lloyd(points, init, config.max_iter) {
            Some(fit) => {
                if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
                    best = Some(fit);
                }
            }
            None => empty += 1,
        }
    }
    let mut fit = best.ok_or_else(|| {
        Error::Numeric(format!("all {} k-means restarts produced an empty cluster", config.n_restarts))
    })?;
    fit.empty_restarts = empty;
    Ok(fit)
}

/// Subtype assignment derived from MMSE trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub assignments: BTreeMap<String, usize>,
    pub class_names: Vec<String>,
    /// One row per class (slow, intermediate, fast): deltas at m06, m12, m24.
    pub centroids: Vec<[f64; 3]>,
    pub inertia: f64,
    pub seed: u64,
}

impl LabelSet {
    pub fn subtypes(&self) -> BTreeMap<String, Subtype> {
        self.assignments
            .iter()
            .map(|(k, &v)| (k.clone(), Subtype::from_index(v).expect("class index < 3")))
            .collect()
    }
}

/// Clusters trajectories and names clusters by decline at month 24.
pub fn cluster_subtypes(
    trajectories: &[DeltaTrajectory],
    config: &KMeansConfig,
    seed: u64,
) -> Result<LabelSet> {
    if config.k != N_CLASSES {
        return Err(Error::Config(format!(
            "subtype labelling uses k = {N_CLASSES}, got {}",
            config.k
        )));
    }
    let points: Vec<Vec<f64>> = trajectories.iter().map(|t| t.deltas.to_vec()).collect();
    let fit = kmeans(&points, config, seed)?;
    if fit.empty_restarts > 0 {
        log::warn!("{} k-means restarts discarded for empty clusters", fit.empty_restarts);
    }

    // slow = highest (least negative) m24 centroid coordinate
    let mut order: Vec<usize> = (0..N_CLASSES).collect();
    order.sort_by(|&a, &b| {
        fit.centroids[b][2]
            .partial_cmp(&fit.centroids[a][2])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut rename = [0usize; N_CLASSES];
    for (class, &cluster) in order.iter().enumerate() {
        rename[cluster] = class;
    }
    let centroids = order
        .iter()
        .map(|&c| [fit.centroids[c][0], fit.centroids[c][1], fit.centroids[c][2]])
        .collect();
    Ok(LabelSet {
        assignments: trajectories
            .iter()
            .zip(&fit.assignments)
            .map(|(t, &a)| (t.subject_id.clone(), rename[a]))
            .collect(),
        class_names: Subtype::ALL.iter().map(|s| s.name().to_string()).collect(),
        centroids,
        inertia: fit.inertia,
        seed,
    })
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as u64;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max = 0.5 * (sum_rows + sum_cols);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
