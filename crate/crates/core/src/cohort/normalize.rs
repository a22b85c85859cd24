use serde::{Deserialize, Serialize};

use super::CohortTable;
use crate::error::{Error, Result};

/// Per-feature z-score parameters for imaging and clinical features.
///
/// Imaging vectors are ROI-major (`roi * 4 + trait`). A zero standard
/// deviation marks a feature constant on the training rows; such features
/// are passed through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub imaging_mean: Vec<f64>,
    pub imaging_std: Vec<f64>,
    pub clinical_mean: Vec<f64>,
    pub clinical_std: Vec<f64>,
    pub constant_features: Vec<String>,
    pub n_train: usize,
}

fn mean_std(columns: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    columns
        .iter()
        .map(|col| {
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .unzip()
}

/// Fits population-convention z-score stats on `train_ids` only.
pub fn fit_normalizer(cohort: &CohortTable, train_ids: &[String]) -> Result<NormalizationStats> {
    if train_ids.is_empty() {
        return Err(Error::Data("normalizer needs at least one training subject".into()));
    }
    let index = cohort.index_of();
    let rows: Vec<_> = train_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| &cohort.records[i])
                .ok_or_else(|| Error::Data(format!("training subject {id:?} not in cohort")))
        })
        .collect::<Result<_>>()?;

    let n_img = rows[0].imaging.len();
    let n_cli = rows[0].clinical.len();
    let mut img_cols = vec![Vec::with_capacity(rows.len()); n_img];
    let mut cli_cols = vec![Vec::with_capacity(rows.len()); n_cli];
    for r in &rows {
        for (col, v) in img_cols.iter_mut().zip(r.imaging.iter()) {
            col.push(*v);
        }
        for (col, v) in cli_cols.iter_mut().zip(r.clinical.iter()) {
            col.push(*v);
        }
    }
    let (imaging_mean, imaging_std) = mean_std(&img_cols);
    let (clinical_mean, clinical_std) = mean_std(&cli_cols);

    let names = &cohort.feature_names;
    let mut constant_features: Vec<String> = names
        .imaging()
        .into_iter()
        .zip(&imaging_std)
        .filter(|(_, s)| **s == 0.0)
        .map(|(n, _)| n)
        .collect();
    constant_features.extend(
        names
            .clinical
            .iter()
            .zip(&clinical_std)
            .filter(|(_, s)| **s == 0.0)
            .map(|(n, _)| n.clone()),
    );
    if !constant_features.is_empty() {
        log::warn!(
            "constant on training rows, left unscaled: {}",
            constant_features.join(", ")
        );
    }
    Ok(NormalizationStats {
        imaging_mean,
        imaging_std,
        clinical_mean,
        clinical_std,
        constant_features,
        n_train: rows.len(),
    })
}

fn z(v: f64, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        (v - mean) / std
    } else {
        v
    }
}

/// Applies fitted stats to every subject; genetics is untouched.
pub fn apply_normalizer(cohort: &CohortTable, stats: &NormalizationStats) -> CohortTable {
    let mut out = cohort.clone();
    for r in &mut out.records {
        for ((v, m), s) in r
            .imaging
            .iter_mut()
            .zip(&stats.imaging_mean)
            .zip(&stats.imaging_std)
        {
            *v = z(*v, *m, *s);
        }
        for ((v, m), s) in r
            .clinical
            .iter_mut()
            .zip(&stats.clinical_mean)
            .zip(&stats.clinical_std)
        {
            *v = z(*v, *m, *s);
        }
    }
    out
}
