use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cohort::{apply_normalizer, CohortTable, Modality, Subtype};
use crate::error::{Error, Result};
use crate::harness::FoldModel;
use crate::input::SubjectInput;
use crate::models::Model;
use crate::nn::{softmax, zeros_like};

/// A differentiable scalar function of a flat feature vector.
pub trait ScalarFunction {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// One logit of a model, seen as a function of the attributable features
/// of a fixed subject (fixed SNP attributes and chromosomes stay put).
pub struct ModelLogit<'a> {
    pub model: &'a Model,
    pub template: &'a SubjectInput,
    pub target: usize,
}

impl ScalarFunction for ModelLogit<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.model.logits(&self.template.with_flat_features(x))?[self.target])
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let input = self.template.with_flat_features(x);
        let (_, cache) = self.model.forward(&input, None)?;
        let mut dlogits = Array2::zeros((1, 3));
        dlogits[[0, self.target]] = 1.0;
        let mut scratch = zeros_like(self.model);
        Ok(self.model.backward(&input, &cache, &dlogits, &mut scratch).flat())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegratedGradients {
    pub attributions: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `|Σ IG − (F(x) − F(x'))|`
    pub completeness_residual: f64,
}

/// Midpoint-rule integrated gradients along the straight path from
/// `baseline` to `x`.
pub fn integrated_gradients(
    f: &dyn ScalarFunction,
    x: &[f64],
    baseline: &[f64],
    n_steps: usize,
) -> Result<IntegratedGradients> {
    if n_steps == 0 {
        return Err(Error::Config("integrated gradients needs n_steps ≥ 1".into()));
    }
    if x.len() != baseline.len() {
        return Err(Error::Shape(format!("input has {} features, baseline {}", x.len(), baseline.len())));
    }
    let delta: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mut sum = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for s in 0..n_steps {
        let alpha = (s as f64 + 0.5) / n_steps as f64;
        for ((p, b), d) in point.iter_mut().zip(baseline).zip(&delta) {
            *p = b + alpha * d;
        }
        let g = f.gradient(&point)?;
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for feature {i} at step {s}")));
        }
        for (acc, v) in sum.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let attributions: Vec<f64> = sum
        .iter()
        .zip(&delta)
        .map(|(g, d)| d * g / n_steps as f64)
        .collect();
    let f_input = f.value(x)?;
    let f_baseline = f.value(baseline)?;
    let completeness_residual = (attributions.iter().sum::<f64>() - (f_input - f_baseline)).abs();
    Ok(IntegratedGradients {
        attributions,
        f_input,
        f_baseline,
        completeness_residual,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub name: String,
    pub modality: Modality,
    /// Raw (pre-normalization) value.
    pub value: f64,
    pub attribution: f64,
    /// Deviation from the cohort mean on the raw scale; `None` for a feature
    /// that is constant across the cohort.
    pub z_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub subject_id: String,
    pub predicted_class: Subtype,
    pub probability: f64,
    pub probabilities: [f64; 3],
    pub outer_fold: usize,
    pub n_steps: usize,
    pub target_logit: f64,
    pub baseline_logit: f64,
    pub completeness_residual: f64,
    pub features: Vec<FeatureAttribution>,
}

/// Mean and population standard deviation of every raw flat feature.
pub fn cohort_feature_stats(cohort: &CohortTable) -> Vec<(f64, f64)> {
    let rows: Vec<Vec<f64>> = cohort.records.iter().map(|r| r.flat_features()).collect();
    let n = rows.len() as f64;
    let width = rows.first().map_or(0, Vec::len);
    (0..width)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Attributes the predicted-class logit of `subject_id` under the fold
/// model that held the subject out. The baseline is zero in normalized
/// space (the training mean for imaging and clinical features) with every
/// dosage set to 0.
pub fn attribute_subject(
    fold: &FoldModel,
    cohort: &CohortTable,
    feature_stats: &[(f64, f64)],
    subject_id: &str,
    n_steps: usize,
) -> Result<AttributionReport> {
    let raw = cohort
        .get(subject_id)
        .ok_or_else(|| Error::Data(format!("subject {subject_id} not in cohort")))?;
    let normalized = apply_normalizer(&cohort.subset(&[subject_id.to_string()]), &fold.meta.normalization);
    let input = SubjectInput::from_record(&normalized.records[0]);
    let logits = fold.model.logits(&input)?;
    let probabilities = softmax(logits.as_slice().expect("contiguous logits"));
    let target = (0..3)
        .max_by(|&a, &b| probabilities[a].total_cmp(&probabilities[b]).then(b.cmp(&a)))
        .expect("three classes");

    let x = input.flat_features();
    let baseline = vec![0.0; x.len()];
    let f = ModelLogit {
        model: &fold.model,
        template: &input,
        target,
    };
    let ig = integrated_gradients(&f, &x, &baseline, n_steps)?;

    let names = cohort.feature_names.flat();
    let values = raw.flat_features();
    if names.len() != x.len() || feature_stats.len() != x.len() {
        return Err(Error::Shape(format!(
            "{} feature names, {} cohort stats, {} model features",
            names.len(),
            feature_stats.len(),
            x.len()
        )));
    }
    let features = names
        .into_iter()
        .zip(values)
        .zip(&ig.attributions)
        .zip(feature_stats)
        .map(|((((name, modality), value), &attribution), &(mean, std))| FeatureAttribution {
            name,
            modality,
            value,
            attribution,
            z_score: (std > 0.0).then(|| (value - mean) / std),
        })
        .collect();
    Ok(AttributionReport {
        subject_id: subject_id.to_string(),
        predicted_class: Subtype::from_index(target).expect("class index"),
        probability: probabilities[target],
        probabilities: [probabilities[0], probabilities[1], probabilities[2]],
        outer_fold: fold.meta.outer_fold,
        n_steps,
        target_logit: ig.f_input,
        baseline_logit: ig.f_baseline,
        completeness_residual: ig.completeness_residual,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, ModelShape};
    use crate::nn::gradcheck::numeric_gradient;
    use crate::testutil::{planted_cohort, tiny_encoder, tiny_model};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Linear(Vec<f64>);

    impl ScalarFunction for Linear {
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(self.0.iter().zip(x).map(|(w, v)| w * v).sum())
        }
        fn gradient(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    struct Constant;

    impl ScalarFunction for Constant {
        fn value(&self, _: &[f64]) -> Result<f64> {
            Ok(3.5)
        }
        fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; x.len()])
        }
    }

    struct Poisoned;

    impl ScalarFunction for Poisoned {
        fn value(&self, _: &[f64]) -> Result<f64> {
            Ok(0.0)
        }
        fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            let mut g = vec![0.0; x.len()];
            g[2] = f64::NAN;
            Ok(g)
        }
    }

    const SHAPE: ModelShape = ModelShape {
        n_rois: 2,
        n_snps: 3,
        n_clinical: 2,
    };

    fn tiny(kind: ModelKind, seed: u64) -> (Model, SubjectInput) {
        let cohort = planted_cohort([1, 1, 1], SHAPE, 1.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(kind, SHAPE, &tiny_model(), &tiny_encoder(), &mut rng).unwrap();
        let mut input = SubjectInput::from_record(&cohort.records[0]);
        input.imaging.mapv_inplace(|v| v * 0.5);
        input.clinical.mapv_inplace(|v| v - 10.0);
        (model, input)
    }

    #[test]
    fn linear_function_is_exact() {
        let w = vec![0.3, -1.7, 2.0, 0.0];
        let x = [1.0, 2.0, -0.5, 9.0];
        for n in [1, 7, 256] {
            let ig = integrated_gradients(&Linear(w.clone()), &x, &[0.0; 4], n).unwrap();
            for i in 0..4 {
                assert!((ig.attributions[i] - w[i] * x[i]).abs() <= 1e-12);
            }
            assert!(ig.completeness_residual <= 1e-12);
        }
    }

    #[test]
    fn constant_function_gives_zero() {
        let ig = integrated_gradients(&Constant, &[1.0, -2.0], &[0.0, 0.0], 16).unwrap();
        assert_eq!(ig.attributions, vec![0.0, 0.0]);
        assert_eq!(ig.completeness_residual, 0.0);
    }

    #[test]
    fn bad_arguments() {
        assert!(matches!(integrated_gradients(&Constant, &[1.0], &[0.0], 0), Err(Error::Config(_))));
        assert!(matches!(integrated_gradients(&Constant, &[1.0], &[0.0, 0.0], 4), Err(Error::Shape(_))));
        let err = integrated_gradients(&Poisoned, &[1.0; 4], &[0.0; 4], 4).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("feature 2")));
    }

    #[test]
    fn model_logit_gradient_matches_finite_differences() {
        for kind in [ModelKind::Tricoat, ModelKind::Stagewise, ModelKind::Late] {
            let (model, input) = tiny(kind, 4);
            let f = ModelLogit {
                model: &model,
                template: &input,
                target: 1,
            };
            let x = input.flat_features();
            let analytic = f.gradient(&x).unwrap();
            let numeric = numeric_gradient(&x, |v| f.value(v).unwrap(), 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{kind}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn tricoat_256_steps_matches_high_resolution_sum() {
        let (model, input) = tiny(ModelKind::Tricoat, 8);
        let f = ModelLogit {
            model: &model,
            template: &input,
            target: 2,
        };
        let x = input.flat_features();
        let base = vec![0.0; x.len()];
        let coarse = integrated_gradients(&f, &x, &base, 256).unwrap();

        // left Riemann sum with 100 000 steps
        let n = 100_000;
        let mut fine = vec![0.0; x.len()];
        for s in 0..n {
            let a = s as f64 / n as f64;
            let p: Vec<f64> = x.iter().map(|v| a * v).collect();
            for (acc, g) in fine.iter_mut().zip(f.gradient(&p).unwrap()) {
                *acc += g;
            }
        }
        let fine: Vec<f64> = fine.iter().zip(&x).map(|(g, v)| g * v / n as f64).collect();
        let scale = fine.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (c, o) in coarse.attributions.iter().zip(&fine) {
            assert!((c - o).abs() <= 1e-3 * scale, "{c} vs {o}");
        }
    }

    #[test]
    fn completeness_on_random_miniature_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for draw in 0..5 {
            let (model, mut input) = tiny(ModelKind::Tricoat, 100 + draw);
            input.imaging.mapv_inplace(|v| v + rng.gen_range(-0.5..0.5));
            let f = ModelLogit {
                model: &model,
                template: &input,
                target: draw as usize % 3,
            };
            let x = input.flat_features();
            let base = vec![0.0; x.len()];
            let r32 = integrated_gradients(&f, &x, &base, 32).unwrap();
            let r512 = integrated_gradients(&f, &x, &base, 512).unwrap();
            let gap = (r512.f_input - r512.f_baseline).abs();
            assert!(r512.completeness_residual <= r32.completeness_residual.max(1e-12));
            assert!(r512.completeness_residual <= 1e-3f64.max(0.005 * gap));
        }
    }

    #[test]
    fn report_covers_every_feature() {
        use crate::harness::{make_fold_plan, train_outer_fold, ExperimentSettings, HarnessConfig, TrainConfig};
        let cohort = planted_cohort([4, 4, 4], SHAPE, 2.0, 6);
        let plan = make_fold_plan(cohort.labels.as_ref().unwrap(), 2, 2, 0).unwrap();
        let settings = ExperimentSettings {
            seed: 1,
            model: tiny_model(),
            encoder: tiny_encoder(),
            train: TrainConfig {
                epochs: 2,
                ..Default::default()
            },
            harness: HarnessConfig::default(),
        };
        let fold = train_outer_fold(&cohort, ModelKind::Tricoat, &plan, 1, &settings).unwrap();
        let stats = cohort_feature_stats(&cohort);
        let id = fold.meta.test_ids[0].clone();
        let report = attribute_subject(&fold, &cohort, &stats, &id, 64).unwrap();
        assert_eq!(report.features.len(), 2 * 4 + 3 + 2);
        assert_eq!(report.features[0].name, "ROI00_ThicknessAvg");
        assert_eq!(report.probability, report.probabilities[report.predicted_class.index()]);
        assert!(report.probabilities.iter().all(|&p| p <= report.probability));
        let raw = cohort.get(&id).unwrap().flat_features();
        for (f, (v, (m, s))) in report.features.iter().zip(raw.iter().zip(&stats)) {
            assert_eq!(f.value, *v);
            match f.z_score {
                Some(z) => assert!((z - (v - m) / s).abs() < 1e-12),
                None => assert_eq!(*s, 0.0),
            }
        }
        assert!(attribute_subject(&fold, &cohort, &stats, "nobody", 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn linear_heads_exact_for_any_baseline(
            w in prop::collection::vec(-3.0f64..3.0, 1..12),
            seed in 0u64..1000,
            steps in 1usize..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = w.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
            let b: Vec<f64> = w.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
            let ig = integrated_gradients(&Linear(w.clone()), &x, &b, steps).unwrap();
            for i in 0..w.len() {
                prop_assert!((ig.attributions[i] - w[i] * (x[i] - b[i])).abs() <= 1e-12);
            }
        }
    }
}
