//! Subject-level multimodal data: ingestion, subtype labels and normalization.

mod ingest;
mod labels;
mod normalize;
mod schema;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use ingest::{load_cohort, write_cohort_csv, CohortPaths, DroppedSubject, IngestionReport};
pub use labels::{
    adjusted_rand_index, cluster_subtypes, compute_mmse_deltas, kmeans, DeltaTrajectory,
    KMeansConfig, KMeansFit, LabelSet,
};
pub use normalize::{apply_normalizer, fit_normalizer, NormalizationStats};
pub use schema::{parse_chromosome, SchemaConfig, MMSE_COLUMNS, SUBJECT_ID};

pub const N_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Imaging,
    Genetics,
    Clinical,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Imaging, Modality::Genetics, Modality::Clinical];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Imaging => "imaging",
            Modality::Genetics => "genetics",
            Modality::Clinical => "clinical",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cognitive-decline subtype, in canonical class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtype {
    Slow,
    Intermediate,
    Fast,
}

impl Subtype {
    pub const ALL: [Subtype; 3] = [Subtype::Slow, Subtype::Intermediate, Subtype::Fast];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtype::Slow => "slow",
            Subtype::Intermediate => "intermediate",
            Subtype::Fast => "fast",
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Visit {
    Baseline,
    M06,
    M12,
    M24,
}

impl Visit {
    pub const ALL: [Visit; 4] = [Visit::Baseline, Visit::M06, Visit::M12, Visit::M24];
}

/// One SNP token's raw attributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnpGenotype {
    pub dosage: u8,
    pub odds_ratio: f64,
    pub rare_allele_freq: f64,
    pub intergenic: bool,
    /// 1..=22, 23 = X
    pub chromosome: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// `n_rois × 4` trait matrix.
    pub imaging: Array2<f64>,
    pub genetics: Vec<SnpGenotype>,
    pub clinical: Array1<f64>,
    pub mmse: BTreeMap<Visit, u8>,
}

impl SubjectRecord {
    /// Scalar input features in canonical order: imaging (ROI-major),
    /// SNP dosages, clinical scores.
    pub fn flat_features(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.imaging.iter().copied().collect();
        v.extend(self.genetics.iter().map(|g| g.dosage as f64));
        v.extend(self.clinical.iter().copied());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNames {
    pub rois: Vec<String>,
    pub imaging_traits: Vec<String>,
    pub snps: Vec<String>,
    pub clinical: Vec<String>,
}

impl FeatureNames {
    pub fn from_schema(schema: &SchemaConfig) -> Self {
        Self {
            rois: schema.rois.clone(),
            imaging_traits: schema.imaging_traits.clone(),
            snps: schema.snps.clone(),
            clinical: schema.clinical.clone(),
        }
    }

    pub fn imaging(&self) -> Vec<String> {
        self.rois
            .iter()
            .flat_map(|r| self.imaging_traits.iter().map(move |t| format!("{r}_{t}")))
            .collect()
    }

    /// Names matching [`SubjectRecord::flat_features`], with their modality.
    pub fn flat(&self) -> Vec<(String, Modality)> {
        let mut v: Vec<(String, Modality)> = self
            .imaging()
            .into_iter()
            .map(|n| (n, Modality::Imaging))
            .collect();
        v.extend(self.snps.iter().map(|n| (n.clone(), Modality::Genetics)));
        v.extend(self.clinical.iter().map(|n| (n.clone(), Modality::Clinical)));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortTable {
    pub records: Vec<SubjectRecord>,
    pub labels: Option<BTreeMap<String, Subtype>>,
    pub feature_names: FeatureNames,
}

impl CohortTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.subject_id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&SubjectRecord> {
        self.records.iter().find(|r| r.subject_id == id)
    }

    pub fn index_of(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.subject_id.as_str(), i))
            .collect()
    }

    pub fn label_of(&self, id: &str) -> Option<Subtype> {
        self.labels.as_ref().and_then(|l| l.get(id).copied())
    }

    /// Attaches labels; every record must be covered.
    pub fn with_labels(mut self, labels: BTreeMap<String, Subtype>) -> crate::Result<Self> {
        let missing: Vec<&str> = self
            .records
            .iter()
            .filter(|r| !labels.contains_key(&r.subject_id))
            .map(|r| r.subject_id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(crate::Error::Data(format!(
                "labels missing for subjects: {}",
                missing.join(", ")
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Keeps only the given subjects (in cohort order).
    pub fn subset(&self, ids: &[String]) -> CohortTable {
        let keep: std::collections::HashSet<&str> = ids.iter().map(|s| s.as_str()).collect();
        CohortTable {
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(r.subject_id.as_str()))
                .cloned()
                .collect(),
            labels: self.labels.as_ref().map(|l| {
                l.iter()
                    .filter(|(k, _)| keep.contains(k.as_str()))
                    .map(|(k, v)| (k.clone(), *v))
                    .collect()
            }),
            feature_names: self.feature_names.clone(),
        }
    }
}
