//! The single configuration document that drives every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{KMeansConfig, SchemaConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::explain::LlmConfig;
use crate::harness::{ExperimentSettings, HarnessConfig, TrainConfig};
use crate::models::ModelConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding the four cohort CSVs; relative to the output
    /// directory unless absolute.
    pub cohort_dir: PathBuf,
    /// Use the generator's planted classes instead of clustering MMSE
    /// trajectories in `labels`.
    pub planted_labels: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cohort_dir: PathBuf::from("synth"),
            planted_labels: false,
        }
    }
}

/// Feature schema. `dims = [rois, snps, clinical]` selects generated names;
/// any explicit list overrides the corresponding default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemaSection {
    pub dims: Option<[usize; 3]>,
    pub rois: Option<Vec<String>>,
    pub imaging_traits: Option<Vec<String>>,
    pub snps: Option<Vec<String>>,
    pub snp_chromosomes: Option<Vec<String>>,
    pub clinical: Option<Vec<String>>,
}

impl SchemaSection {
    pub fn resolve(&self) -> Result<SchemaConfig> {
        let mut s = match self.dims {
            Some([r, n, c]) => SchemaConfig::small(r, n, c),
            None => SchemaConfig::default(),
        };
        let fields = [
            (&self.rois, &mut s.rois),
            (&self.imaging_traits, &mut s.imaging_traits),
            (&self.snps, &mut s.snps),
            (&self.snp_chromosomes, &mut s.snp_chromosomes),
            (&self.clinical, &mut s.clinical),
        ];
        for (src, dst) in fields {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub n_steps: usize,
    pub top_k: usize,
    /// Prompt template file; the bundled template when unset.
    pub template: Option<PathBuf>,
    /// Subjects to attribute and explain; every subject when empty.
    pub subjects: Vec<String>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            n_steps: 256,
            top_k: 10,
            template: None,
            subjects: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub schema: SchemaSection,
    pub synth: SynthConfig,
    pub labels: KMeansConfig,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub harness: HarnessConfig,
    pub explain: ExplainConfig,
    pub llm: LlmConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            schema: SchemaSection::default(),
            synth: SynthConfig::default(),
            labels: KMeansConfig::default(),
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            harness: HarnessConfig::default(),
            explain: ExplainConfig::default(),
            llm: LlmConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.resolve()?;
        self.synth.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.harness.n_outer < 2 || self.harness.n_inner < 2 {
            return Err(Error::Config("harness needs n_outer ≥ 2 and n_inner ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&self.harness.alpha) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.harness.alpha)));
        }
        if self.explain.n_steps == 0 {
            return Err(Error::Config("explain.n_steps must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Model, encoder, training and harness sections under the document seed.
    pub fn settings(&self) -> ExperimentSettings {
        ExperimentSettings {
            seed: self.seed,
            model: self.model.clone(),
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            harness: self.harness.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
