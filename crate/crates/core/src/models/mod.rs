//! Fusion models producing 3-class logits (slow, intermediate, fast).

pub mod coattention;
mod fusion;
mod stagewise;
mod tricoat;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use coattention::{coattend, coattend_backward, CoAttention, CoAttentionCache};
pub use fusion::{EarlyCache, EarlyFusion, LateFusion, ModalityTokenizer, SingleCache, SingleModality};
pub use stagewise::{Stagewise, StagewiseCache};
pub use tricoat::{TriCoat, TriCoatCache};

use crate::cohort::{CohortTable, Modality};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::input::{InputGradient, SubjectInput};
use crate::nn::{softmax, Dropout, NamedView, NamedViewMut, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMode {
    ClassTokens,
    FlattenAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub joint_mode: JointMode,
    pub use_class_tokens: bool,
    pub classifier_hidden: usize,
    pub stagewise_hidden: [usize; 3],
    pub coattention_identity_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joint_mode: JointMode::ClassTokens,
            use_class_tokens: true,
            classifier_hidden: 256,
            stagewise_hidden: [64, 32, 16],
            coattention_identity_init: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tricoat,
    Early,
    Late,
    Stagewise,
    SingleImaging,
    SingleGenetics,
    SingleClinical,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Tricoat,
        ModelKind::Early,
        ModelKind::Late,
        ModelKind::Stagewise,
        ModelKind::SingleImaging,
        ModelKind::SingleGenetics,
        ModelKind::SingleClinical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Tricoat => "tricoat",
            ModelKind::Early => "early",
            ModelKind::Late => "late",
            ModelKind::Stagewise => "stagewise",
            ModelKind::SingleImaging => "single_imaging",
            ModelKind::SingleGenetics => "single_genetics",
            ModelKind::SingleClinical => "single_clinical",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

/// Per-modality input sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_rois: usize,
    pub n_snps: usize,
    pub n_clinical: usize,
}

impl ModelShape {
    pub fn of_cohort(cohort: &CohortTable) -> Self {
        let f = &cohort.feature_names;
        Self {
            n_rois: f.rois.len(),
            n_snps: f.snps.len(),
            n_clinical: f.clinical.len(),
        }
    }

    pub fn stagewise_widths(&self) -> [usize; 3] {
        [self.n_rois * 4, self.n_snps * 5, self.n_clinical]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    TriCoat(TriCoat),
    Early(EarlyFusion),
    Late(LateFusion),
    Single(SingleModality),
    Stagewise(Stagewise),
}

#[derive(Clone, Debug)]
pub enum ModelCache {
    TriCoat(Box<TriCoatCache>),
    Early(EarlyCache),
    Late(Vec<SingleCache>),
    Single(SingleCache),
    Stagewise(StagewiseCache),
}

impl ModelCache {
    /// All self-attention and co-attention weight matrices of one forward pass.
    pub fn attention_weights(&self) -> Vec<&Array2<f64>> {
        match self {
            ModelCache::TriCoat(c) => c
                .encoders()
                .iter()
                .flat_map(|e| e.all_attention())
                .chain([c.attn_imaging(), c.attn_genetics()])
                .collect(),
            ModelCache::Early(c) => c.encoder().all_attention().collect(),
            ModelCache::Late(cs) => cs.iter().flat_map(|c| c.encoder().all_attention()).collect(),
            ModelCache::Single(c) => c.encoder().all_attention().collect(),
            ModelCache::Stagewise(_) => Vec::new(),
        }
    }
}

impl Model {
    pub fn new(
        kind: ModelKind,
        shape: ModelShape,
        config: &ModelConfig,
        encoder: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        encoder.validate()?;
        Ok(match kind {
            ModelKind::Tricoat => Model::TriCoat(TriCoat::new(shape, config, encoder, rng)?),
            ModelKind::Early => Model::Early(EarlyFusion::new(shape, config, encoder, rng)?),
            ModelKind::Late => Model::Late(LateFusion::new(shape, config, encoder, rng)?),
            ModelKind::Stagewise => Model::Stagewise(Stagewise::new(
                shape.stagewise_widths(),
                config.stagewise_hidden,
                rng,
            )),
            ModelKind::SingleImaging => {
                Model::Single(SingleModality::new(Modality::Imaging, shape, config, encoder, rng)?)
            }
            ModelKind::SingleGenetics => {
                Model::Single(SingleModality::new(Modality::Genetics, shape, config, encoder, rng)?)
            }
            ModelKind::SingleClinical => {
                Model::Single(SingleModality::new(Modality::Clinical, shape, config, encoder, rng)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::TriCoat(_) => ModelKind::Tricoat,
            Model::Early(_) => ModelKind::Early,
            Model::Late(_) => ModelKind::Late,
            Model::Stagewise(_) => ModelKind::Stagewise,
            Model::Single(s) => match s.modality() {
                Modality::Imaging => ModelKind::SingleImaging,
                Modality::Genetics => ModelKind::SingleGenetics,
                Modality::Clinical => ModelKind::SingleClinical,
            },
        }
    }

    /// Logits as a `1 × 3` row plus the backward cache.
    pub fn forward(&self, input: &SubjectInput, drop: Option<&mut Dropout>) -> Result<(Array2<f64>, ModelCache)> {
        let (logits, cache) = match self {
            Model::TriCoat(m) => m
                .forward(input, drop)
                .map(|(l, c)| (l, ModelCache::TriCoat(Box::new(c))))?,
            Model::Early(m) => m.forward(input, drop).map(|(l, c)| (l, ModelCache::Early(c)))?,
            Model::Late(m) => m.forward(input, drop).map(|(l, c)| (l, ModelCache::Late(c)))?,
            Model::Single(m) => m.forward(input, drop).map(|(l, c)| (l, ModelCache::Single(c)))?,
            Model::Stagewise(m) => {
                let widths = m.input_widths();
                let blocks = input.stagewise_blocks();
                if widths.iter().zip(&blocks).any(|(w, b)| *w != b.len()) {
                    return Err(Error::Shape(format!(
                        "stage-wise input widths {:?}, model expects {widths:?}",
                        blocks.iter().map(|b| b.len()).collect::<Vec<_>>()
                    )));
                }
                let (l, c) = m.forward(input);
                (l, ModelCache::Stagewise(c))
            }
        };
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite {} logits", self.kind())));
        }
        Ok((logits, cache))
    }

    /// Gradient w.r.t. parameters (accumulated into `grad`) and inputs.
    pub fn backward(
        &self,
        input: &SubjectInput,
        cache: &ModelCache,
        dlogits: &Array2<f64>,
        grad: &mut Model,
    ) -> InputGradient {
        match (self, cache, grad) {
            (Model::TriCoat(m), ModelCache::TriCoat(c), Model::TriCoat(g)) => m.backward(input, c, dlogits, g),
            (Model::Early(m), ModelCache::Early(c), Model::Early(g)) => m.backward(input, c, dlogits, g),
            (Model::Late(m), ModelCache::Late(c), Model::Late(g)) => m.backward(input, c, dlogits, g),
            (Model::Single(m), ModelCache::Single(c), Model::Single(g)) => {
                let mut out = InputGradient::zeros_for(input);
                m.backward(input, c, dlogits, g, &mut out);
                out
            }
            (Model::Stagewise(m), ModelCache::Stagewise(c), Model::Stagewise(g)) => m.backward(input, c, dlogits, g),
            _ => panic!("model, cache and gradient variants disagree"),
        }
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, input: &SubjectInput) -> Result<Array1<f64>> {
        self.forward(input, None).map(|(l, _)| l.row(0).to_owned())
    }

    pub fn probabilities(&self, input: &SubjectInput) -> Result<[f64; 3]> {
        let p = softmax(self.logits(input)?.as_slice().expect("contiguous logits"));
        Ok([p[0], p[1], p[2]])
    }
}

impl Parameters for Model {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        match self {
            Model::TriCoat(m) => m.collect(prefix, out),
            Model::Early(m) => m.collect(prefix, out),
            Model::Late(m) => m.collect(prefix, out),
            Model::Single(m) => m.collect(prefix, out),
            Model::Stagewise(m) => m.collect(prefix, out),
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        match self {
            Model::TriCoat(m) => m.collect_mut(prefix, out),
            Model::Early(m) => m.collect_mut(prefix, out),
            Model::Late(m) => m.collect_mut(prefix, out),
            Model::Single(m) => m.collect_mut(prefix, out),
            Model::Stagewise(m) => m.collect_mut(prefix, out),
        }
    }
}
