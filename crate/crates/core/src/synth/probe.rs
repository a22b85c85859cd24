//! Simple reference classifiers used to characterize a generated cohort.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, N_CLASSES};
use crate::error::{Error, Result};
use crate::harness::auroc_ovo;
use crate::nn::softmax;

pub const PROBE_FOLDS: usize = 5;
pub const PROBE_COMPONENTS: usize = 3;
const L2: f64 = 1e-2;
const ITERATIONS: usize = 400;
const STEP: f64 = 0.5;

/// Cross-validated OvO AUROC of the reference probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub imaging: f64,
    pub genetics: f64,
    pub clinical: f64,
    /// Logistic regression on the leading principal components of imaging
    /// and clinical features and all their pairwise products.
    pub imaging_clinical: f64,
    pub description: String,
}

fn standardize(train: &Array2<f64>, test: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).expect("non-empty train");
    let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    ((train - &mean) / &std, (test - &mean) / &std)
}

/// Multinomial logistic regression with an L2 penalty, fitted by full-batch
/// gradient descent. Returns test-set class probabilities.
pub fn logistic_probe(train: &Array2<f64>, labels: &[usize], test: &Array2<f64>) -> Vec<[f64; 3]> {
    let (xtr, xte) = standardize(train, test);
    let (n, d) = xtr.dim();
    let mut w = Array2::<f64>::zeros((d, N_CLASSES));
    let mut b = Array1::<f64>::zeros(N_CLASSES);
    let mut onehot = Array2::<f64>::zeros((n, N_CLASSES));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    for _ in 0..ITERATIONS {
        let mut p = xtr.dot(&w) + &b;
        for mut row in p.rows_mut() {
            let s = softmax(row.as_slice().expect("contiguous"));
            row.assign(&Array1::from(s));
        }
        let diff = (p - &onehot) / n as f64;
        let gw = xtr.t().dot(&diff) + &(&w * L2);
        let gb = diff.sum_axis(Axis(0));
        w -= &(gw * STEP);
        b -= &(gb * STEP);
    }
    let logits = xte.dot(&w) + &b;
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let s = softmax(r.as_slice().expect("contiguous"));
            [s[0], s[1], s[2]]
        })
        .collect()
}

/// Stratified k-fold out-of-fold probabilities followed by OvO AUROC.
pub fn cross_validated_auroc(x: &Array2<f64>, labels: &[usize], folds: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut offset = 0;
    for c in 0..N_CLASSES {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for m in members {
            fold_of[m] = offset % folds;
            offset += 1;
        }
    }
    let mut probs = vec![[0.0; 3]; labels.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let p = logistic_probe(&x.select(Axis(0), &train), &ytr, &x.select(Axis(0), &test));
        for (&i, pi) in test.iter().zip(p) {
            probs[i] = pi;
        }
    }
    Ok(auroc_ovo(&probs, labels)?.value)
}

/// Scores on the top `k` principal components (power iteration with
/// deflation on the covariance of standardized columns).
pub fn principal_components(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let (z, _) = standardize(x, x);
    let n = z.nrows() as f64;
    let mut cov = z.t().dot(&z) / n;
    let d = cov.nrows();
    let mut out = Array2::zeros((z.nrows(), k.min(d)));
    for c in 0..k.min(d) {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + (i % 7) as f64 * 0.1);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let next = cov.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm == 0.0 {
                break;
            }
            v = next / norm;
            lambda = norm;
        }
        out.column_mut(c).assign(&z.dot(&v));
        let vv = v.view().insert_axis(Axis(1));
        cov -= &(vv.dot(&vv.t()) * lambda);
    }
    out
}

fn modality_matrices(cohort: &CohortTable) -> [Array2<f64>; 3] {
    let n = cohort.len();
    let names = &cohort.feature_names;
    let img = Array2::from_shape_fn((n, names.rois.len() * names.imaging_traits.len()), |(i, j)| {
        cohort.records[i].imaging.as_slice().expect("standard layout")[j]
    });
    let gen = Array2::from_shape_fn((n, names.snps.len()), |(i, j)| cohort.records[i].genetics[j].dosage as f64);
    let clin = Array2::from_shape_fn((n, names.clinical.len()), |(i, j)| cohort.records[i].clinical[j]);
    [img, gen, clin]
}

pub fn probe_scores(cohort: &CohortTable, labels: &[usize], seed: u64) -> Result<ProbeScores> {
    if labels.len() != cohort.len() {
        return Err(Error::Shape("one label per subject expected".into()));
    }
    let [img, gen, clin] = modality_matrices(cohort);
    let pi = principal_components(&img, PROBE_COMPONENTS);
    let pc = principal_components(&clin, PROBE_COMPONENTS);
    let (a, b) = (pi.ncols(), pc.ncols());
    let joint = Array2::from_shape_fn((cohort.len(), a + b + a * b), |(i, j)| {
        if j < a {
            pi[[i, j]]
        } else if j < a + b {
            pc[[i, j - a]]
        } else {
            let q = j - a - b;
            pi[[i, q / b]] * pc[[i, q % b]]
        }
    });
    Ok(ProbeScores {
        imaging: cross_validated_auroc(&img, labels, PROBE_FOLDS, seed)?,
        genetics: cross_validated_auroc(&gen, labels, PROBE_FOLDS, seed)?,
        clinical: cross_validated_auroc(&clin, labels, PROBE_FOLDS, seed)?,
        imaging_clinical: cross_validated_auroc(&joint, labels, PROBE_FOLDS, seed)?,
        description: format!(
            "{PROBE_FOLDS}-fold stratified L2 ({L2}) multinomial logistic regression on standardized features; \
             two-modality probe uses the top {PROBE_COMPONENTS} principal components of imaging and clinical \
             features plus their pairwise products"
        ),
    })
}
