//! Small labelled cohorts for unit tests.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cohort::{CohortTable, FeatureNames, SchemaConfig, SnpGenotype, Subtype, SubjectRecord};
use crate::encoder::EncoderConfig;
use crate::models::{ModelConfig, ModelShape};

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        n_heads: 2,
        dim: 8,
        ff_hidden: 32,
        dropout: 0.0,
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        classifier_hidden: 8,
        stagewise_hidden: [6, 5, 4],
        ..Default::default()
    }
}

/// Cohort whose class shifts every imaging and clinical value by
/// `strength · (class − 1)`.
pub fn planted_cohort(counts: [usize; 3], shape: ModelShape, strength: f64, seed: u64) -> CohortTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut labels = BTreeMap::new();
    let mut n = 0;
    for (c, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            let id = format!("S{n:03}");
            n += 1;
            let shift = strength * (c as f64 - 1.0);
            records.push(SubjectRecord {
                subject_id: id.clone(),
                imaging: Array2::from_shape_fn((shape.n_rois, 4), |_| shift + rng.gen_range(-1.0..1.0)),
                genetics: (0..shape.n_snps)
                    .map(|i| SnpGenotype {
                        dosage: rng.gen_range(0..3),
                        odds_ratio: 1.1 + 0.05 * i as f64,
                        rare_allele_freq: 0.2,
                        intergenic: i % 2 == 0,
                        chromosome: (i % 23 + 1) as u8,
                    })
                    .collect(),
                clinical: Array1::from_shape_fn(shape.n_clinical, |_| 10.0 + shift + rng.gen_range(-1.0..1.0)),
                mmse: Default::default(),
            });
            labels.insert(id, Subtype::ALL[c]);
        }
    }
    CohortTable {
        records,
        labels: Some(labels),
        feature_names: FeatureNames::from_schema(&SchemaConfig::small(shape.n_rois, shape.n_snps, shape.n_clinical)),
    }
}
