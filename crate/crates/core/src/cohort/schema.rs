use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cortical parcellation labels used for the default imaging schema.
const CORTICAL_REGIONS: [&str; 36] = [
    "Bankssts",
    "CaudalAnteriorCingulate",
    "CaudalMiddleFrontal",
    "Cuneus",
    "Entorhinal",
    "Fusiform",
    "InferiorParietal",
    "InferiorTemporal",
    "IsthmusCingulate",
    "LateralOccipital",
    "LateralOrbitofrontal",
    "Lingual",
    "MedialOrbitofrontal",
    "MiddleTemporal",
    "Parahippocampal",
    "Paracentral",
    "ParsOpercularis",
    "ParsOrbitalis",
    "ParsTriangularis",
    "Pericalcarine",
    "Postcentral",
    "PosteriorCingulate",
    "Precentral",
    "Precuneus",
    "RostralAnteriorCingulate",
    "RostralMiddleFrontal",
    "SuperiorFrontal",
    "SuperiorParietal",
    "SuperiorTemporal",
    "Supramarginal",
    "FrontalPole",
    "TemporalPole",
    "TransverseTemporal",
    "Insula",
    "CorpusCallosum",
    "Unknown",
];

const DEFAULT_TRAITS: [&str; 4] = ["ThicknessAvg", "ThicknessStd", "SurfaceArea", "Volume"];

const DEFAULT_CLINICAL: [&str; 7] = [
    "LDELTOTAL",
    "DIGITSCOR",
    "TRABSCOR",
    "RAVLT_immediate",
    "RAVLT_learning",
    "RAVLT_forgetting",
    "RAVLT_perc_forgetting",
];

pub const MMSE_COLUMNS: [&str; 4] = ["MMSE_bl", "MMSE_m06", "MMSE_m12", "MMSE_m24"];

pub const SUBJECT_ID: &str = "subject_id";

/// Expected columns per modality. Feature order everywhere follows this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemaConfig {
    pub rois: Vec<String>,
    pub imaging_traits: Vec<String>,
    pub snps: Vec<String>,
    /// One entry per SNP: `1`..`22` or `X` (alias `23`).
    pub snp_chromosomes: Vec<String>,
    pub clinical: Vec<String>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        let rois = ["Left", "Right"]
            .iter()
            .flat_map(|h| CORTICAL_REGIONS.iter().map(move |r| format!("{h}{r}")))
            .collect();
        let snps: Vec<String> = (1..=70).map(|i| format!("SNP{i:02}")).collect();
        // spread over the autosomes, with the last two on X
        let snp_chromosomes = (0..70)
            .map(|i| {
                if i >= 68 {
                    "X".to_string()
                } else {
                    ((i * 7) % 22 + 1).to_string()
                }
            })
            .collect();
        Self {
            rois,
            imaging_traits: DEFAULT_TRAITS.iter().map(|s| s.to_string()).collect(),
            snps,
            snp_chromosomes,
            clinical: DEFAULT_CLINICAL.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Parses a chromosome label into 1..=23 (X = 23).
pub fn parse_chromosome(label: &str) -> Result<u8> {
    let t = label.trim();
    let t = t.strip_prefix("chr").unwrap_or(t);
    if t.eq_ignore_ascii_case("x") {
        return Ok(23);
    }
    match t.parse::<u8>() {
        Ok(c) if (1..=23).contains(&c) => Ok(c),
        _ => Err(Error::Config(format!("unknown chromosome label {label:?}"))),
    }
}

impl SchemaConfig {
    /// Miniature schema used by tests and quick experiments.
    pub fn small(n_rois: usize, n_snps: usize, n_clinical: usize) -> Self {
        let full = Self::default();
        Self {
            rois: (0..n_rois).map(|i| format!("ROI{i:02}")).collect(),
            imaging_traits: full.imaging_traits,
            snps: (0..n_snps).map(|i| format!("SNP{:02}", i + 1)).collect(),
            snp_chromosomes: (0..n_snps).map(|i| (i % 23 + 1).to_string()).collect(),
            clinical: (0..n_clinical).map(|i| format!("CLIN{i}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rois.is_empty() || self.snps.is_empty() || self.clinical.is_empty() {
            return Err(Error::Config(
                "schema needs at least one ROI, SNP and clinical feature".into(),
            ));
        }
        if self.imaging_traits.len() != 4 {
            return Err(Error::Config(format!(
                "imaging tokens carry exactly 4 traits, schema lists {}",
                self.imaging_traits.len()
            )));
        }
        if self.snp_chromosomes.len() != self.snps.len() {
            return Err(Error::Config(format!(
                "{} SNPs but {} chromosome labels",
                self.snps.len(),
                self.snp_chromosomes.len()
            )));
        }
        self.chromosomes()?;
        let mut seen = std::collections::HashSet::new();
        for c in self.all_feature_columns() {
            if !seen.insert(c.clone()) {
                return Err(Error::Config(format!("duplicate schema column {c:?}")));
            }
        }
        Ok(())
    }

    pub fn chromosomes(&self) -> Result<Vec<u8>> {
        self.snp_chromosomes
            .iter()
            .map(|c| parse_chromosome(c))
            .collect()
    }

    pub fn imaging_columns(&self) -> Vec<String> {
        self.rois
            .iter()
            .flat_map(|r| self.imaging_traits.iter().map(move |t| format!("{r}_{t}")))
            .collect()
    }

    /// Per SNP: dosage, odds ratio, rare allele frequency, intergenic flag.
    pub fn genetics_columns(&self) -> Vec<String> {
        self.snps
            .iter()
            .flat_map(|s| {
                [
                    s.clone(),
                    format!("{s}_OR"),
                    format!("{s}_RAF"),
                    format!("{s}_intergenic"),
                ]
            })
            .collect()
    }

    pub fn clinical_columns(&self) -> Vec<String> {
        self.clinical.clone()
    }

    pub fn mmse_columns(&self) -> Vec<String> {
        MMSE_COLUMNS.iter().map(|s| s.to_string()).collect()
    }

    fn all_feature_columns(&self) -> Vec<String> {
        let mut v = self.imaging_columns();
        v.extend(self.genetics_columns());
        v.extend(self.clinical_columns());
        v
    }
}
