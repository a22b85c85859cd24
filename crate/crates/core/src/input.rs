//! Model-ready view of one (normalized) subject.

use ndarray::{Array1, Array2};

use crate::cohort::{CohortTable, SubjectRecord};

/// Per-SNP attribute columns in token order.
pub const SNP_ATTRIBUTES: [&str; 4] = ["dosage", "odds_ratio", "rare_allele_freq", "intergenic"];

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectInput {
    /// `n_rois × 4`
    pub imaging: Array2<f64>,
    /// `n_snps × 4`: dosage, odds ratio, rare allele frequency, intergenic.
    pub snp_attributes: Array2<f64>,
    /// 1..=23 per SNP.
    pub chromosomes: Vec<u8>,
    pub clinical: Array1<f64>,
}

/// Gradient of a scalar w.r.t. every numeric input of a [`SubjectInput`].
#[derive(Clone, Debug, PartialEq)]
pub struct InputGradient {
    pub imaging: Array2<f64>,
    pub snp_attributes: Array2<f64>,
    pub clinical: Array1<f64>,
}

impl InputGradient {
    pub fn zeros_for(input: &SubjectInput) -> Self {
        Self {
            imaging: Array2::zeros(input.imaging.raw_dim()),
            snp_attributes: Array2::zeros(input.snp_attributes.raw_dim()),
            clinical: Array1::zeros(input.clinical.len()),
        }
    }

    /// Same ordering as [`SubjectInput::flat_features`] (dosage column only).
    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.imaging.iter().copied().collect();
        v.extend(self.snp_attributes.column(0).iter().copied());
        v.extend(self.clinical.iter().copied());
        v
    }

    pub fn add_(&mut self, other: &InputGradient) {
        self.imaging += &other.imaging;
        self.snp_attributes += &other.snp_attributes;
        self.clinical += &other.clinical;
    }
}

impl SubjectInput {
    pub fn from_record(record: &SubjectRecord) -> Self {
        let n = record.genetics.len();
        let mut snp_attributes = Array2::zeros((n, 4));
        for (mut row, g) in snp_attributes.rows_mut().into_iter().zip(&record.genetics) {
            row[0] = g.dosage as f64;
            row[1] = g.odds_ratio;
            row[2] = g.rare_allele_freq;
            row[3] = if g.intergenic { 1.0 } else { 0.0 };
        }
        Self {
            imaging: record.imaging.clone(),
            snp_attributes,
            chromosomes: record.genetics.iter().map(|g| g.chromosome).collect(),
            clinical: record.clinical.clone(),
        }
    }

    pub fn all_from(cohort: &CohortTable) -> Vec<SubjectInput> {
        cohort.records.iter().map(Self::from_record).collect()
    }

    pub fn n_features(&self) -> usize {
        self.imaging.len() + self.snp_attributes.nrows() + self.clinical.len()
    }

    /// Attributable scalar features: imaging (ROI-major), SNP dosages, clinical.
    pub fn flat_features(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.imaging.iter().copied().collect();
        v.extend(self.snp_attributes.column(0).iter().copied());
        v.extend(self.clinical.iter().copied());
        v
    }

    /// Copy with the attributable features replaced; fixed SNP attributes
    /// and chromosomes are kept.
    pub fn with_flat_features(&self, values: &[f64]) -> SubjectInput {
        assert_eq!(values.len(), self.n_features(), "feature vector length");
        let mut out = self.clone();
        let n_img = self.imaging.len();
        let n_snp = self.snp_attributes.nrows();
        for (dst, src) in out.imaging.iter_mut().zip(&values[..n_img]) {
            *dst = *src;
        }
        for (i, v) in values[n_img..n_img + n_snp].iter().enumerate() {
            out.snp_attributes[[i, 0]] = *v;
        }
        for (dst, src) in out.clinical.iter_mut().zip(&values[n_img + n_snp..]) {
            *dst = *src;
        }
        out
    }

    /// Raw flattened features for the stage-wise baseline:
    /// imaging `M·4`, genetics `N·5` (4 attributes + chromosome), clinical `B`.
    pub fn stagewise_blocks(&self) -> [Array1<f64>; 3] {
        let img = Array1::from_iter(self.imaging.iter().copied());
        let mut gen = Vec::with_capacity(self.snp_attributes.nrows() * 5);
        for (row, &c) in self.snp_attributes.rows().into_iter().zip(&self.chromosomes) {
            gen.extend(row.iter().copied());
            gen.push(c as f64);
        }
        [img, Array1::from(gen), self.clinical.clone()]
    }
}
