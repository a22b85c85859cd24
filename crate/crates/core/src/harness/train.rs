use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::auroc_ovo;
use crate::cohort::{apply_normalizer, CohortTable, NormalizationStats};
use crate::error::{Error, Result};
use crate::input::SubjectInput;
use crate::models::Model;
use crate::nn::{cross_entropy, softmax, zeros_like, Adam, AdamConfig, Dropout, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointRule {
    BestValidationAuroc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: Loss,
    pub checkpoint_rule: CheckpointRule,
    /// Samples per gradient work unit; results are reduced in index order.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            epochs: 100,
            batch_size: 32,
            loss: Loss::CrossEntropy,
            checkpoint_rule: CheckpointRule::BestValidationAuroc,
            chunk_size: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("epochs, batch_size and chunk_size must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
        }
    }
}

/// A normalized subject with its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub subject_id: String,
    pub input: SubjectInput,
    pub label: usize,
}

/// Normalized inputs for `ids`; every id must be labelled.
pub fn prepare_examples(cohort: &CohortTable, stats: &NormalizationStats, ids: &[String]) -> Result<Vec<Example>> {
    let normalized = apply_normalizer(&cohort.subset(ids), stats);
    normalized
        .records
        .iter()
        .map(|r| {
            let label = normalized
                .label_of(&r.subject_id)
                .ok_or_else(|| Error::Data(format!("subject {} has no label", r.subject_id)))?;
            Ok(Example {
                subject_id: r.subject_id.clone(),
                input: SubjectInput::from_record(r),
                label: label.index(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub val_loss: f64,
}

/// Echoed into checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub optimizer: String,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: Loss,
    pub checkpoint_rule: CheckpointRule,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metadata: TrainMetadata,
}

/// Independent stream per (seed, epoch, sample) so dropout masks do not
/// depend on scheduling.
fn sample_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | sample as u64);
    rng
}

fn chunk_gradient(
    model: &Model,
    examples: &[&Example],
    dropout: f64,
    seed: u64,
    epoch: usize,
    indices: &[usize],
) -> Result<(Model, f64)> {
    let mut grad = zeros_like(model);
    let mut loss = 0.0;
    for (ex, &index) in examples.iter().zip(indices) {
        let mut drop = Dropout::new(dropout, sample_rng(seed, epoch, index));
        let (logits, cache) = model.forward(&ex.input, Some(&mut drop))?;
        let (l, dl) = cross_entropy(logits.as_slice().expect("contiguous"), ex.label);
        if !l.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss for subject {} in epoch {epoch}",
                ex.subject_id
            )));
        }
        loss += l;
        let dlogits = ndarray::Array2::from_shape_vec((1, 3), dl).expect("3 logits");
        model.backward(&ex.input, &cache, &dlogits, &mut grad);
    }
    Ok((grad, loss))
}

/// Mean cross-entropy and class probabilities at evaluation.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<(f64, Vec<[f64; 3]>)> {
    let out: Vec<(f64, [f64; 3])> = examples
        .par_iter()
        .map(|ex| {
            let logits = model.logits(&ex.input)?;
            let l = logits.as_slice().expect("contiguous");
            let (loss, _) = cross_entropy(l, ex.label);
            let p = softmax(l);
            Ok((loss, [p[0], p[1], p[2]]))
        })
        .collect::<Result<_>>()?;
    let n = out.len().max(1) as f64;
    Ok((out.iter().map(|o| o.0).sum::<f64>() / n, out.into_iter().map(|o| o.1).collect()))
}

/// Adam on mean cross-entropy; returns the parameters of the epoch with the
/// best validation OvO AUROC, the earliest epoch on ties. When validation
/// AUROC is undefined (a single class) the lowest validation loss decides.
pub fn train_model(
    mut model: Model,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    dropout: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut adam = Adam::new(config.adam(), &model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let val_labels: Vec<usize> = val.iter().map(|e| e.label).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let members: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
            let parts: Vec<(Model, f64)> = members
                .par_chunks(config.chunk_size)
                .zip(batch.par_chunks(config.chunk_size))
                .map(|(exs, idx)| chunk_gradient(&model, exs, dropout, seed, epoch, idx))
                .collect::<Result<_>>()?;
            let mut parts = parts.into_iter();
            let (mut grad, mut loss) = parts.next().expect("non-empty batch");
            for (g, l) in parts {
                grad.add_(&g);
                loss += l;
            }
            grad.scale_(1.0 / batch.len() as f64);
            if let Some(name) = grad.first_non_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name} at epoch {epoch}")));
            }
            adam.step(&mut model, &grad);
            if let Some(name) = model.first_non_finite() {
                return Err(Error::Numeric(format!("non-finite parameter {name} at epoch {epoch}")));
            }
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / train.len() as f64;

        let (val_loss, val_auroc) = if val.is_empty() {
            (f64::NAN, None)
        } else {
            let (loss, probs) = evaluate(&model, val)?;
            (loss, auroc_ovo(&probs, &val_labels).ok().map(|a| a.value))
        };
        let score = match (val_auroc, val.is_empty()) {
            (Some(a), _) => a,
            (None, false) => -val_loss,
            (None, true) => -train_loss,
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        log::debug!("epoch {epoch}: train loss {train_loss:.4}, val AUROC {val_auroc:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auroc,
            val_loss,
        });
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let best_val_auroc = history[best_epoch - 1].val_auroc;
    Ok(TrainOutcome {
        model: best_model,
        metadata: TrainMetadata {
            optimizer: "adam".into(),
            lr: config.lr,
            betas: config.betas,
            eps: config.eps,
            epochs: config.epochs,
            batch_size: config.batch_size,
            loss: config.loss,
            checkpoint_rule: config.checkpoint_rule,
            seed,
            best_epoch,
            best_val_auroc,
            history,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::fit_normalizer;
    use crate::models::{ModelKind, ModelShape};
    use crate::testutil::{planted_cohort, tiny_encoder, tiny_model};

    const SHAPE: ModelShape = ModelShape {
        n_rois: 2,
        n_snps: 2,
        n_clinical: 1,
    };

    fn examples(counts: [usize; 3], seed: u64) -> Vec<Example> {
        let cohort = planted_cohort(counts, SHAPE, 2.0, seed);
        let ids = cohort.ids();
        let stats = fit_normalizer(&cohort, &ids).unwrap();
        prepare_examples(&cohort, &stats, &ids).unwrap()
    }

    fn tricoat(seed: u64) -> Model {
        Model::new(
            ModelKind::Tricoat,
            SHAPE,
            &tiny_model(),
            &tiny_encoder(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let data = examples([4, 4, 4], 1);
        let model = tricoat(3);
        let config = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 5,
            ..Default::default()
        };
        let out = train_model(model.clone(), &data, &data, &config, 0.1, 7).unwrap();
        let before = model.flatten();
        let after = out.model.flatten();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn default_config_is_echoed_into_metadata() {
        let data = examples([2, 2, 2], 2);
        let config = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let out = train_model(tricoat(0), &data, &data, &config, 0.0, 1).unwrap();
        let m = out.metadata;
        assert_eq!((m.lr, m.loss), (1e-4, Loss::CrossEntropy));
        assert_eq!(TrainConfig::default().epochs, 100);
        assert_eq!(m.betas, [0.9, 0.999]);
        assert_eq!(m.history.len(), 2);
        let json = serde_json::to_value(&m).unwrap();
        assert_eq!(json["loss"], "cross_entropy");
        assert_eq!(json["checkpoint_rule"], "best_validation_auroc");
    }

    #[test]
    fn best_epoch_is_the_earliest_maximum() {
        let data = examples([3, 3, 3], 4);
        let config = TrainConfig {
            lr: 0.0,
            epochs: 4,
            ..Default::default()
        };
        // nothing changes, so every epoch ties
        let out = train_model(tricoat(1), &data, &data, &config, 0.0, 1).unwrap();
        assert_eq!(out.metadata.best_epoch, 1);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = examples([2, 2, 2], 5);
        let mut model = tricoat(2);
        if let Model::TriCoat(m) = &mut model {
            m.classifier.output.bias[0] = f64::NAN;
        }
        let err = train_model(model, &data, &data, &TrainConfig::default(), 0.0, 0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn training_is_reproducible() {
        let data = examples([3, 3, 3], 6);
        let config = TrainConfig {
            lr: 1e-2,
            epochs: 3,
            batch_size: 4,
            chunk_size: 1,
            ..Default::default()
        };
        let a = train_model(tricoat(5), &data, &data, &config, 0.2, 9).unwrap();
        let b = train_model(tricoat(5), &data, &data, &config, 0.2, 9).unwrap();
        assert_eq!(a.model, b.model);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| train_model(tricoat(5), &data, &data, &config, 0.2, 9).unwrap());
        assert_eq!(a.model, c.model);
    }

    #[test]
    fn miniature_tricoat_overfits_eight_subjects() {
        let data = examples([3, 3, 2], 8);
        let config = TrainConfig {
            lr: 1e-2,
            epochs: 500,
            batch_size: 8,
            ..Default::default()
        };
        let out = train_model(tricoat(8), &data, &data, &config, 0.0, 8).unwrap();
        let last = out.metadata.history.iter().map(|h| h.train_loss).fold(f64::INFINITY, f64::min);
        assert!(last < 0.05, "lowest training loss {last}");
    }
}
