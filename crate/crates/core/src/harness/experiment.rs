use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::FoldPlan;
use super::metrics::auroc_ovo;
use super::stats::paired_ttest;
use super::train::{evaluate, prepare_examples, train_model, TrainConfig, TrainMetadata};
use crate::checkpoint::Checkpoint;
use crate::cohort::{fit_normalizer, CohortTable, NormalizationStats, Subtype};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::models::{JointMode, Model, ModelConfig, ModelKind, ModelShape};

/// One entry of the inner-loop search grid; unset fields keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub joint_mode: Option<JointMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub n_outer: usize,
    pub n_inner: usize,
    pub alpha: f64,
    /// Models run by `train`/`evaluate` when `--models` is not given.
    pub models: Vec<String>,
    /// Inner-loop grid; with fewer than two points tuning is skipped.
    pub grid: Vec<GridPoint>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            n_outer: 10,
            n_inner: 5,
            alpha: 0.005,
            models: vec!["tricoat".into()],
            grid: Vec::new(),
        }
    }
}

/// Everything that determines how one model is built and trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub seed: u64,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub harness: HarnessConfig,
}

impl GridPoint {
    fn apply(&self, s: &ExperimentSettings) -> ExperimentSettings {
        let mut out = s.clone();
        if let Some(lr) = self.lr {
            out.train.lr = lr;
        }
        if let Some(d) = self.dropout {
            out.encoder.dropout = d;
        }
        if let Some(j) = self.joint_mode {
            out.model.joint_mode = j;
        }
        out
    }
}

/// SplitMix64 finaliser over a sequence of words.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn kind_tag(kind: ModelKind) -> u64 {
    ModelKind::ALL.iter().position(|&k| k == kind).expect("listed kind") as u64
}

/// Metadata stored alongside a fold model's tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldModelMeta {
    pub kind: ModelKind,
    pub outer_fold: usize,
    pub shape: ModelShape,
    pub model_config: ModelConfig,
    pub encoder_config: EncoderConfig,
    pub normalization: NormalizationStats,
    pub selected: GridPoint,
    pub test_ids: Vec<String>,
    pub train: TrainMetadata,
}

#[derive(Clone, Debug)]
pub struct FoldModel {
    pub model: Model,
    pub meta: FoldModelMeta,
}

impl FoldModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_params(&self.model, &self.meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: FoldModelMeta = ckpt.metadata_as()?;
        let mut model = Model::new(
            meta.kind,
            meta.shape,
            &meta.model_config,
            &meta.encoder_config,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        ckpt.load_into(&mut model)?;
        Ok(Self { model, meta })
    }

    pub fn file_name(kind: ModelKind, outer_fold: usize) -> String {
        format!("{kind}_fold{outer_fold:02}.tckp")
    }
}

fn fit_and_train(
    cohort: &CohortTable,
    kind: ModelKind,
    settings: &ExperimentSettings,
    stats_ids: &[String],
    fit_ids: &[String],
    val_ids: &[String],
    seed: u64,
) -> Result<(Model, NormalizationStats, TrainMetadata)> {
    let stats = fit_normalizer(cohort, stats_ids)?;
    let fit = prepare_examples(cohort, &stats, fit_ids)?;
    let val = prepare_examples(cohort, &stats, val_ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(kind, ModelShape::of_cohort(cohort), &settings.model, &settings.encoder, &mut rng)?;
    let outcome = train_model(model, &fit, &val, &settings.train, settings.encoder.dropout, seed)?;
    Ok((outcome.model, stats, outcome.metadata))
}

/// Inner-loop tuning (when the grid has several points) followed by the
/// final fit of one outer fold. The normalizer is fitted on the inner-fit
/// ids during tuning and on the whole outer-train part for the final model,
/// which trains on inner fold 0's fit ids and selects its epoch on that
/// fold's validation ids.
pub fn train_outer_fold(
    cohort: &CohortTable,
    kind: ModelKind,
    plan: &FoldPlan,
    outer: usize,
    settings: &ExperimentSettings,
) -> Result<FoldModel> {
    let fold = &plan.outer[outer];
    let grid = &settings.harness.grid;
    let selected = if grid.len() > 1 {
        let mut best: Option<(f64, usize)> = None;
        for (g, point) in grid.iter().enumerate() {
            let s = point.apply(settings);
            let mut scores = Vec::new();
            for (i, inner) in fold.inner.iter().enumerate() {
                let seed = derive_seed(settings.seed, &[kind_tag(kind), outer as u64, g as u64, i as u64, 1]);
                let (_, _, meta) = fit_and_train(cohort, kind, &s, &inner.fit_ids, &inner.fit_ids, &inner.val_ids, seed)?;
                if let Some(a) = meta.best_val_auroc {
                    scores.push(a);
                }
            }
            let mean = if scores.is_empty() {
                f64::NEG_INFINITY
            } else {
                scores.iter().sum::<f64>() / scores.len() as f64
            };
            log::info!("{kind} fold {outer} grid point {g}: mean inner AUROC {mean:.4}");
            if best.is_none_or(|(b, _)| mean > b) {
                best = Some((mean, g));
            }
        }
        grid[best.expect("non-empty grid").1].clone()
    } else {
        grid.first().cloned().unwrap_or_default()
    };

    let s = selected.apply(settings);
    let inner = &fold.inner[0];
    let seed = derive_seed(settings.seed, &[kind_tag(kind), outer as u64, 0]);
    let (model, normalization, train) =
        fit_and_train(cohort, kind, &s, &fold.train_ids, &inner.fit_ids, &inner.val_ids, seed)?;
    Ok(FoldModel {
        meta: FoldModelMeta {
            kind,
            outer_fold: outer,
            shape: ModelShape::of_cohort(cohort),
            model_config: s.model.clone(),
            encoder_config: s.encoder.clone(),
            normalization,
            selected,
            test_ids: fold.test_ids.clone(),
            train,
        },
        model,
    })
}

/// One model per outer fold; folds run concurrently, results in fold order.
pub fn train_all_folds(
    cohort: &CohortTable,
    kind: ModelKind,
    plan: &FoldPlan,
    settings: &ExperimentSettings,
) -> Result<Vec<FoldModel>> {
    (0..plan.outer.len())
        .into_par_iter()
        .map(|o| train_outer_fold(cohort, kind, plan, o, settings))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub outer_fold: usize,
    pub auroc: Option<f64>,
    pub skipped_pairs: Vec<(usize, usize)>,
    pub predictions: Vec<(String, [f64; 3])>,
}

fn score(outer_fold: usize, predictions: Vec<(String, [f64; 3])>, labels: &[usize]) -> FoldResult {
    let probs: Vec<[f64; 3]> = predictions.iter().map(|p| p.1).collect();
    let (auroc, skipped_pairs) = match auroc_ovo(&probs, labels) {
        Ok(a) => (Some(a.value), a.skipped_pairs),
        Err(e) => {
            log::warn!("outer fold {outer_fold}: {e}");
            (None, vec![(0, 1), (0, 2), (1, 2)])
        }
    };
    FoldResult {
        outer_fold,
        auroc,
        skipped_pairs,
        predictions,
    }
}

/// Test-set scoring of a trained fold model with its own normalizer.
pub fn score_fold_model(cohort: &CohortTable, fm: &FoldModel) -> Result<FoldResult> {
    let test = prepare_examples(cohort, &fm.meta.normalization, &fm.meta.test_ids)?;
    let (_, probs) = evaluate(&fm.model, &test)?;
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    let preds = test.iter().map(|e| e.subject_id.clone()).zip(probs).collect();
    Ok(score(fm.meta.outer_fold, preds, &labels))
}

/// Reads `subject_id, score_slow, score_intermediate, score_fast`.
pub fn read_external_predictions(path: &Path) -> Result<BTreeMap<String, [f64; 3]>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.clone();
    let expected = ["subject_id", "score_slow", "score_intermediate", "score_fast"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "{}: expected columns {expected:?}, found {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut s = [0.0; 3];
        for (k, v) in s.iter_mut().enumerate() {
            *v = rec[k + 1].trim().parse().map_err(|_| {
                Error::Data(format!("{} row {}: bad score {:?}", path.display(), line + 2, &rec[k + 1]))
            })?;
        }
        out.insert(rec[0].to_string(), s);
    }
    Ok(out)
}

/// Scores externally produced predictions on the same outer folds.
pub fn score_external(
    predictions: &BTreeMap<String, [f64; 3]>,
    labels: &BTreeMap<String, Subtype>,
    plan: &FoldPlan,
) -> Result<Vec<FoldResult>> {
    let missing: Vec<&str> = plan
        .outer
        .iter()
        .flat_map(|f| &f.test_ids)
        .filter(|id| !predictions.contains_key(*id))
        .map(|s| s.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "external predictions missing {} subjects: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    plan.outer
        .iter()
        .enumerate()
        .map(|(o, f)| {
            let preds: Vec<(String, [f64; 3])> = f.test_ids.iter().map(|id| (id.clone(), predictions[id])).collect();
            let y: Vec<usize> = f
                .test_ids
                .iter()
                .map(|id| labels.get(id).map(|s| s.index()).ok_or_else(|| Error::Data(format!("subject {id} has no label"))))
                .collect::<Result<_>>()?;
            Ok(score(o, preds, &y))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub fold_auroc: Vec<Option<f64>>,
    pub skipped_pairs: Vec<Vec<(usize, usize)>>,
    pub mean: f64,
    pub sd: f64,
    pub t_vs_tricoat: Option<f64>,
    pub p_vs_tricoat: Option<f64>,
    pub significant_vs_tricoat: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeMetadata {
    pub threads: usize,
    pub seconds: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alpha: f64,
    pub n_outer: usize,
    pub fold_seed: u64,
    pub models: Vec<ModelReport>,
    pub flags: Vec<String>,
    pub runtime: RuntimeMetadata,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Aggregates per-fold results; rows keep the given order and every model
/// is t-tested against `tricoat` on the folds where both are defined.
pub fn build_report(
    results: &[(String, Vec<FoldResult>)],
    plan: &FoldPlan,
    alpha: f64,
    seconds: BTreeMap<String, f64>,
) -> Result<MetricsReport> {
    let reference = results.iter().find(|(n, _)| n == "tricoat").map(|(_, r)| r);
    let mut flags = plan.warnings.clone();
    let mut models = Vec::with_capacity(results.len());
    for (name, folds) in results {
        let fold_auroc: Vec<Option<f64>> = folds.iter().map(|f| f.auroc).collect();
        let defined: Vec<f64> = fold_auroc.iter().flatten().copied().collect();
        let (mean, sd) = mean_sd(&defined);
        for f in folds {
            if !f.skipped_pairs.is_empty() {
                flags.push(format!(
                    "{name} fold {}: skipped class pairs {:?}",
                    f.outer_fold, f.skipped_pairs
                ));
            }
        }
        let (mut t, mut p, mut sig) = (None, None, None);
        if let Some(r) = reference.filter(|_| name != "tricoat") {
            let (a, b): (Vec<f64>, Vec<f64>) = r
                .iter()
                .zip(folds)
                .filter_map(|(x, y)| Some((x.auroc?, y.auroc?)))
                .unzip();
            if a.len() >= 2 {
                let test = paired_ttest(&a, &b, alpha)?;
                t = Some(test.t_stat);
                p = Some(test.p_value);
                sig = Some(test.significant);
            }
        }
        models.push(ModelReport {
            name: name.clone(),
            fold_auroc,
            skipped_pairs: folds.iter().map(|f| f.skipped_pairs.clone()).collect(),
            mean,
            sd,
            t_vs_tricoat: t,
            p_vs_tricoat: p,
            significant_vs_tricoat: sig,
        });
    }
    Ok(MetricsReport {
        alpha,
        n_outer: plan.outer.len(),
        fold_seed: plan.seed,
        models,
        flags,
        runtime: RuntimeMetadata {
            threads: rayon::current_num_threads(),
            seconds,
        },
    })
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>7} {:>7} {:>12}", "model", "mean", "sd", "p_vs_tricoat");
        for m in &self.models {
            let p = match m.p_vs_tricoat {
                Some(p) => format!("{p:.4}{}", if m.significant_vs_tricoat == Some(true) { "*" } else { "" }),
                None => "-".into(),
            };
            let _ = writeln!(s, "{:<18} {:>7.4} {:>7.4} {:>12}", m.name, m.mean, m.sd, p);
        }
        let _ = writeln!(s, "{}-fold cross-testing; * p < {}", self.n_outer, self.alpha);
        s
    }
}

/// A model in an experiment: built in, or a predictions file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    Builtin(ModelKind),
    External { name: String, path: PathBuf },
}

impl ModelSpec {
    pub fn name(&self) -> String {
        match self {
            ModelSpec::Builtin(k) => k.name().to_string(),
            ModelSpec::External { name, .. } => name.clone(),
        }
    }
}

/// Trains every built-in model on every outer fold, scores test folds and
/// external prediction files, and aggregates the report.
pub fn run_experiment(
    cohort: &CohortTable,
    models: &[ModelSpec],
    plan: &FoldPlan,
    settings: &ExperimentSettings,
) -> Result<MetricsReport> {
    let labels = cohort
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("cohort has no subtype labels".into()))?;
    let names: BTreeSet<String> = models.iter().map(|m| m.name()).collect();
    if names.len() != models.len() {
        return Err(Error::Config("duplicate model names in experiment".into()));
    }
    let mut results = Vec::with_capacity(models.len());
    let mut seconds = BTreeMap::new();
    for spec in models {
        let start = Instant::now();
        let folds = match spec {
            ModelSpec::Builtin(kind) => train_all_folds(cohort, *kind, plan, settings)?
                .iter()
                .map(|fm| score_fold_model(cohort, fm))
                .collect::<Result<Vec<_>>>()?,
            ModelSpec::External { path, .. } => score_external(&read_external_predictions(path)?, labels, plan)?,
        };
        seconds.insert(spec.name(), start.elapsed().as_secs_f64());
        results.push((spec.name(), folds));
    }
    build_report(&results, plan, settings.harness.alpha, seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::make_fold_plan;
    use crate::testutil::{planted_cohort, tiny_encoder, tiny_model};

    const SHAPE: ModelShape = ModelShape {
        n_rois: 2,
        n_snps: 2,
        n_clinical: 2,
    };

    fn settings() -> ExperimentSettings {
        ExperimentSettings {
            seed: 3,
            model: tiny_model(),
            encoder: tiny_encoder(),
            train: TrainConfig {
                lr: 5e-3,
                epochs: 4,
                batch_size: 8,
                ..Default::default()
            },
            harness: HarnessConfig {
                n_outer: 3,
                n_inner: 2,
                ..Default::default()
            },
        }
    }

    #[test]
    fn report_has_one_row_per_model_and_is_reproducible() {
        let cohort = planted_cohort([8, 8, 6], SHAPE, 2.0, 1);
        let plan = make_fold_plan(cohort.labels.as_ref().unwrap(), 3, 2, 5).unwrap();
        let models = [
            ModelSpec::Builtin(ModelKind::Tricoat),
            ModelSpec::Builtin(ModelKind::Early),
            ModelSpec::Builtin(ModelKind::Late),
        ];
        let a = run_experiment(&cohort, &models, &plan, &settings()).unwrap();
        let b = run_experiment(&cohort, &models, &plan, &settings()).unwrap();
        assert_eq!(a.models.iter().map(|m| m.name.as_str()).collect::<Vec<_>>(), ["tricoat", "early", "late"]);
        assert!(a.models[0].p_vs_tricoat.is_none());
        assert!(a.models[1].p_vs_tricoat.is_some());
        for (x, y) in a.models.iter().zip(&b.models) {
            assert_eq!(x.fold_auroc, y.fold_auroc);
            assert_eq!(x.p_vs_tricoat, y.p_vs_tricoat);
        }
        let table = a.to_table();
        assert!(table.contains("p_vs_tricoat") && table.lines().count() == 5);
        let json = serde_json::to_value(&a).unwrap();
        assert!(json["models"][1]["mean"].is_number());
    }

    #[test]
    fn grid_search_and_checkpoint_round_trip() {
        let cohort = planted_cohort([6, 6, 4], SHAPE, 2.0, 2);
        let plan = make_fold_plan(cohort.labels.as_ref().unwrap(), 2, 2, 1).unwrap();
        let mut s = settings();
        s.harness.grid = vec![
            GridPoint { lr: Some(1e-3), ..Default::default() },
            GridPoint { lr: Some(1e-2), dropout: Some(0.0), joint_mode: None },
        ];
        let fm = train_outer_fold(&cohort, ModelKind::Tricoat, &plan, 0, &s).unwrap();
        assert!(s.harness.grid.contains(&fm.meta.selected));
        let restored = FoldModel::from_checkpoint(&fm.to_checkpoint().unwrap()).unwrap();
        assert_eq!(restored.model, fm.model);
        assert_eq!(
            score_fold_model(&cohort, &restored).unwrap(),
            score_fold_model(&cohort, &fm).unwrap()
        );
    }

    #[test]
    fn external_predictions_are_scored_on_the_same_folds() {
        let cohort = planted_cohort([5, 5, 5], SHAPE, 2.0, 3);
        let labels = cohort.labels.clone().unwrap();
        let plan = make_fold_plan(&labels, 3, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svm.csv");
        let mut body = String::from("subject_id,score_slow,score_intermediate,score_fast\n");
        for (id, s) in &labels {
            let mut row = [0.1; 3];
            row[s.index()] = 0.8;
            body.push_str(&format!("{id},{},{},{}\n", row[0], row[1], row[2]));
        }
        std::fs::write(&path, &body).unwrap();
        let preds = read_external_predictions(&path).unwrap();
        let folds = score_external(&preds, &labels, &plan).unwrap();
        assert!(folds.iter().all(|f| f.auroc == Some(1.0)));

        let first = body.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
        let trimmed: String = body.lines().filter(|l| !l.starts_with(&format!("{first},"))).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, trimmed).unwrap();
        let err = score_external(&read_external_predictions(&path).unwrap(), &labels, &plan).unwrap_err();
        assert!(err.to_string().contains(&first));
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(derive_seed(1, &[0, 0]), derive_seed(1, &[0, 1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}
