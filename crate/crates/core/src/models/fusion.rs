//! Early-fusion, late-fusion and single-modality baselines.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;

use super::{ModelConfig, ModelShape};
use crate::cohort::Modality;
use crate::encoder::{Encoder, EncoderCache, EncoderConfig};
use crate::error::Result;
use crate::input::{InputGradient, SubjectInput};
use crate::nn::{join, Dropout, Mlp, MlpCache, NamedView, NamedViewMut, Parameters};
use crate::tokenize::{
    class_token_init, ClinicalTokenizer, GeneticsTokenizer, ImagingTokenizer, TokenizerParams,
    TokenizerShape,
};

#[derive(Clone, Debug, PartialEq)]
pub enum ModalityTokenizer {
    Imaging(ImagingTokenizer),
    Genetics(GeneticsTokenizer),
    Clinical(ClinicalTokenizer),
}

impl ModalityTokenizer {
    pub fn new(modality: Modality, shape: ModelShape, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(match modality {
            Modality::Imaging => Self::Imaging(ImagingTokenizer::new(shape.n_rois, dim, true, rng)),
            Modality::Genetics => {
                Self::Genetics(GeneticsTokenizer::new(shape.n_snps, dim, true, rng)?)
            }
            Modality::Clinical => {
                Self::Clinical(ClinicalTokenizer::new(shape.n_clinical, dim, true, rng))
            }
        })
    }

    pub fn modality(&self) -> Modality {
        match self {
            Self::Imaging(_) => Modality::Imaging,
            Self::Genetics(_) => Modality::Genetics,
            Self::Clinical(_) => Modality::Clinical,
        }
    }

    pub fn tokenize(&self, input: &SubjectInput) -> Result<Array2<f64>> {
        Ok(match self {
            Self::Imaging(t) => t.tokenize(&input.imaging)?.tokens,
            Self::Genetics(t) => t.tokenize(&input.snp_attributes, &input.chromosomes)?.tokens,
            Self::Clinical(t) => t.tokenize(&input.clinical)?.tokens,
        })
    }

    /// Accumulates into `out` the input gradient of this modality only.
    pub fn backward(
        &self,
        input: &SubjectInput,
        dtokens: &Array2<f64>,
        grad: &mut ModalityTokenizer,
        out: &mut InputGradient,
    ) {
        match (self, grad) {
            (Self::Imaging(t), Self::Imaging(g)) => {
                out.imaging += &t.backward(&input.imaging, dtokens, g);
            }
            (Self::Genetics(t), Self::Genetics(g)) => {
                out.snp_attributes +=
                    &t.backward(&input.snp_attributes, &input.chromosomes, dtokens, g);
            }
            (Self::Clinical(t), Self::Clinical(g)) => {
                out.clinical += &t.backward(&input.clinical, dtokens, g);
            }
            _ => panic!("gradient layout does not match tokenizer"),
        }
    }
}

impl Parameters for ModalityTokenizer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        let p = join(prefix, self.modality().name());
        match self {
            Self::Imaging(t) => t.collect(&p, out),
            Self::Genetics(t) => t.collect(&p, out),
            Self::Clinical(t) => t.collect(&p, out),
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        let p = join(prefix, self.modality().name());
        match self {
            Self::Imaging(t) => t.collect_mut(&p, out),
            Self::Genetics(t) => t.collect_mut(&p, out),
            Self::Clinical(t) => t.collect_mut(&p, out),
        }
    }
}

/// One modality: tokenizer with class token, encoder, MLP on the class token.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleModality {
    pub tokenizer: ModalityTokenizer,
    pub encoder: Encoder,
    pub classifier: Mlp,
}

#[derive(Clone, Debug)]
pub struct SingleCache {
    encoder: EncoderCache,
    classifier: MlpCache,
    seq_len: usize,
}

impl SingleCache {
    pub fn encoder(&self) -> &EncoderCache {
        &self.encoder
    }
}

impl SingleModality {
    pub fn new(
        modality: Modality,
        shape: ModelShape,
        config: &ModelConfig,
        encoder: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            tokenizer: ModalityTokenizer::new(modality, shape, encoder.dim, rng)?,
            encoder: Encoder::new(encoder, rng)?,
            classifier: Mlp::xavier(encoder.dim, config.classifier_hidden, 3, rng),
        })
    }

    pub fn modality(&self) -> Modality {
        self.tokenizer.modality()
    }

    pub fn forward(&self, input: &SubjectInput, drop: Option<&mut Dropout>) -> Result<(Array2<f64>, SingleCache)> {
        let tokens = self.tokenizer.tokenize(input)?;
        let (h, encoder) = self.encoder.forward(&tokens, drop)?;
        let (logits, classifier) = self.classifier.forward(&h.slice(s![0..1, ..]).to_owned());
        Ok((
            logits,
            SingleCache {
                encoder,
                classifier,
                seq_len: tokens.nrows(),
            },
        ))
    }

    pub fn backward(
        &self,
        input: &SubjectInput,
        cache: &SingleCache,
        dlogits: &Array2<f64>,
        grad: &mut SingleModality,
        out: &mut InputGradient,
    ) {
        let dcls = self.classifier.backward(&cache.classifier, dlogits, &mut grad.classifier);
        let mut dh = Array2::zeros((cache.seq_len, dcls.ncols()));
        dh.row_mut(0).assign(&dcls.row(0));
        let dtokens = self.encoder.backward(&cache.encoder, &dh, &mut grad.encoder);
        self.tokenizer.backward(input, &dtokens, &mut grad.tokenizer, out);
    }
}

impl Parameters for SingleModality {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.tokenizer.collect(&join(prefix, "tokenizer"), out);
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.classifier.collect(&join(prefix, "classifier"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.tokenizer.collect_mut(&join(prefix, "tokenizer"), out);
        self.encoder.collect_mut(&join(prefix, "encoder"), out);
        self.classifier.collect_mut(&join(prefix, "classifier"), out);
    }
}

/// Mean of three single-modality branch logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LateFusion {
    pub branches: Vec<SingleModality>,
}

impl LateFusion {
    pub fn new(shape: ModelShape, config: &ModelConfig, encoder: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            branches: Modality::ALL
                .iter()
                .map(|&m| SingleModality::new(m, shape, config, encoder, rng))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, input: &SubjectInput, mut drop: Option<&mut Dropout>) -> Result<(Array2<f64>, Vec<SingleCache>)> {
        let mut sum = Array2::zeros((1, 3));
        let mut caches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (l, c) = b.forward(input, drop.as_deref_mut())?;
            sum += &l;
            caches.push(c);
        }
        Ok((sum / self.branches.len() as f64, caches))
    }

    pub fn backward(
        &self,
        input: &SubjectInput,
        caches: &[SingleCache],
        dlogits: &Array2<f64>,
        grad: &mut LateFusion,
    ) -> InputGradient {
        let share = dlogits / self.branches.len() as f64;
        let mut out = InputGradient::zeros_for(input);
        for ((b, c), g) in self.branches.iter().zip(caches).zip(grad.branches.iter_mut()) {
            b.backward(input, c, &share, g, &mut out);
        }
        out
    }
}

impl Parameters for LateFusion {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        for b in &self.branches {
            b.collect(&join(prefix, b.modality().name()), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        for b in &mut self.branches {
            let p = join(prefix, b.modality().name());
            b.collect_mut(&p, out);
        }
    }
}

/// All tokens of all modalities in one sequence behind a shared class token.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyFusion {
    pub tokenizers: TokenizerParams,
    pub class_token: Array1<f64>,
    pub encoder: Encoder,
    pub classifier: Mlp,
}

#[derive(Clone, Debug)]
pub struct EarlyCache {
    encoder: EncoderCache,
    classifier: MlpCache,
    lens: [usize; 3],
}

impl EarlyCache {
    pub fn encoder(&self) -> &EncoderCache {
        &self.encoder
    }
}

impl EarlyFusion {
    pub fn new(shape: ModelShape, config: &ModelConfig, encoder: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let tokenizers = TokenizerParams::new(
            TokenizerShape {
                n_rois: shape.n_rois,
                n_snps: shape.n_snps,
                n_clinical: shape.n_clinical,
                dim: encoder.dim,
                class_tokens: false,
            },
            rng,
        )?;
        Ok(Self {
            tokenizers,
            class_token: class_token_init(encoder.dim, rng),
            encoder: Encoder::new(encoder, rng)?,
            classifier: Mlp::xavier(encoder.dim, config.classifier_hidden, 3, rng),
        })
    }

    pub fn sequence(&self, input: &SubjectInput) -> Result<Array2<f64>> {
        let [i, g, c] = self.tokenizers.tokenize(input)?;
        Ok(concatenate![
            Axis(0),
            self.class_token.view().insert_axis(Axis(0)),
            i.tokens,
            g.tokens,
            c.tokens
        ])
    }

    pub fn forward(&self, input: &SubjectInput, drop: Option<&mut Dropout>) -> Result<(Array2<f64>, EarlyCache)> {
        let tokens = self.sequence(input)?;
        let (h, encoder) = self.encoder.forward(&tokens, drop)?;
        let (logits, classifier) = self.classifier.forward(&h.slice(s![0..1, ..]).to_owned());
        Ok((
            logits,
            EarlyCache {
                encoder,
                classifier,
                lens: [
                    input.imaging.nrows(),
                    input.snp_attributes.nrows(),
                    input.clinical.len(),
                ],
            },
        ))
    }

    pub fn backward(
        &self,
        input: &SubjectInput,
        cache: &EarlyCache,
        dlogits: &Array2<f64>,
        grad: &mut EarlyFusion,
    ) -> InputGradient {
        let dcls = self.classifier.backward(&cache.classifier, dlogits, &mut grad.classifier);
        let [ni, ng, nc] = cache.lens;
        let mut dh = Array2::zeros((1 + ni + ng + nc, dcls.ncols()));
        dh.row_mut(0).assign(&dcls.row(0));
        let dt = self.encoder.backward(&cache.encoder, &dh, &mut grad.encoder);
        grad.class_token += &dt.row(0);
        let di = dt.slice(s![1..1 + ni, ..]).to_owned();
        let dg = dt.slice(s![1 + ni..1 + ni + ng, ..]).to_owned();
        let dc = dt.slice(s![1 + ni + ng.., ..]).to_owned();
        self.tokenizers.backward(input, [&di, &dg, &dc], &mut grad.tokenizers)
    }
}

impl Parameters for EarlyFusion {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.tokenizers.collect(&join(prefix, "tokenizers"), out);
        out.push((join(prefix, "class_token"), self.class_token.view().into_dyn()));
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.classifier.collect(&join(prefix, "classifier"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.tokenizers.collect_mut(&join(prefix, "tokenizers"), out);
        out.push((join(prefix, "class_token"), self.class_token.view_mut().into_dyn()));
        self.encoder.collect_mut(&join(prefix, "encoder"), out);
        self.classifier.collect_mut(&join(prefix, "classifier"), out);
    }
}
