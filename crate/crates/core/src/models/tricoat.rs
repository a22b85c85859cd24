use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use super::coattention::{coattend, coattend_backward, CoAttention, CoAttentionCache};
use super::{JointMode, ModelConfig, ModelShape};
use crate::encoder::{Encoder, EncoderCache, EncoderConfig};
use crate::error::{Error, Result};
use crate::input::{InputGradient, SubjectInput};
use crate::nn::{join, Dropout, Mlp, MlpCache, NamedView, NamedViewMut, Parameters};
use crate::tokenize::{TokenizerParams, TokenizerShape};

/// Three modality encoders joined by clinical-keyed co-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct TriCoat {
    pub tokenizers: TokenizerParams,
    pub encoder_imaging: Encoder,
    pub encoder_genetics: Encoder,
    pub encoder_clinical: Encoder,
    pub coattention: CoAttention,
    pub classifier: Mlp,
    pub joint_mode: JointMode,
}

#[derive(Clone, Debug)]
pub struct TriCoatCache {
    encoders: [EncoderCache; 3],
    pub genetics: CoAttentionCache,
    pub imaging: CoAttentionCache,
    joint: Array2<f64>,
    classifier: MlpCache,
    rows: (usize, usize),
}

impl TriCoatCache {
    /// Imaging, genetics and clinical encoder caches.
    pub fn encoders(&self) -> &[EncoderCache; 3] {
        &self.encoders
    }

    /// `S_G × C` genetics-to-clinical attention, class-token rows included.
    pub fn attn_genetics(&self) -> &Array2<f64> {
        &self.genetics.attn
    }

    /// `S_I × C` imaging-to-clinical attention, class-token rows included.
    pub fn attn_imaging(&self) -> &Array2<f64> {
        &self.imaging.attn
    }
}

impl TriCoat {
    pub fn new(
        shape: ModelShape,
        config: &ModelConfig,
        encoder: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.joint_mode == JointMode::ClassTokens && !config.use_class_tokens {
            return Err(Error::Config(
                "joint_mode = \"class_tokens\" requires use_class_tokens = true".into(),
            ));
        }
        let k = encoder.dim;
        let tokenizers = TokenizerParams::new(
            TokenizerShape {
                n_rois: shape.n_rois,
                n_snps: shape.n_snps,
                n_clinical: shape.n_clinical,
                dim: k,
                class_tokens: config.use_class_tokens,
            },
            rng,
        )?;
        let encoder_imaging = Encoder::new(encoder, rng)?;
        let encoder_genetics = Encoder::new(encoder, rng)?;
        let encoder_clinical = Encoder::new(encoder, rng)?;
        let coattention = if config.coattention_identity_init {
            CoAttention::identity(k)
        } else {
            CoAttention::xavier(k, rng)
        };
        let extra = usize::from(config.use_class_tokens);
        let joint = match config.joint_mode {
            JointMode::ClassTokens => 2 * k,
            JointMode::FlattenAll => (shape.n_snps + shape.n_rois + 2 * extra) * k,
        };
        Ok(Self {
            tokenizers,
            encoder_imaging,
            encoder_genetics,
            encoder_clinical,
            coattention,
            classifier: Mlp::xavier(joint, config.classifier_hidden, 3, rng),
            joint_mode: config.joint_mode,
        })
    }

    pub fn joint_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn forward(&self, input: &SubjectInput, mut drop: Option<&mut Dropout>) -> Result<(Array2<f64>, TriCoatCache)> {
        let [img, gen, cli] = self.tokenizers.tokenize(input)?;
        let (ei, ci) = self.encoder_imaging.forward(&img.tokens, drop.as_deref_mut())?;
        let (eg, cg) = self.encoder_genetics.forward(&gen.tokens, drop.as_deref_mut())?;
        let (ec, cc) = self.encoder_clinical.forward(&cli.tokens, drop)?;
        let co = &self.coattention;
        let (fg, cache_g) = coattend(&eg, &ec, &co.query_genetics, &co.key_clinical, &co.value_clinical);
        let (fi, cache_i) = coattend(&ei, &ec, &co.query_imaging, &co.key_clinical, &co.value_clinical);
        let joint = match self.joint_mode {
            JointMode::ClassTokens => {
                concatenate![Axis(1), fg.slice(s![0..1, ..]), fi.slice(s![0..1, ..])]
            }
            JointMode::FlattenAll => {
                let flat: Vec<f64> = fg.iter().chain(fi.iter()).copied().collect();
                Array2::from_shape_vec((1, flat.len()), flat).expect("joint shape")
            }
        };
        if joint.ncols() != self.joint_dim() {
            return Err(Error::Shape(format!(
                "joint representation of length {}, classifier expects {}",
                joint.ncols(),
                self.joint_dim()
            )));
        }
        let (logits, classifier) = self.classifier.forward(&joint);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Tri-COAT logits".into()));
        }
        Ok((
            logits,
            TriCoatCache {
                encoders: [ci, cg, cc],
                genetics: cache_g,
                imaging: cache_i,
                joint,
                classifier,
                rows: (fg.nrows(), fi.nrows()),
            },
        ))
    }

    pub fn backward(
        &self,
        input: &SubjectInput,
        cache: &TriCoatCache,
        dlogits: &Array2<f64>,
        grad: &mut TriCoat,
    ) -> InputGradient {
        let djoint = self.classifier.backward(&cache.classifier, dlogits, &mut grad.classifier);
        debug_assert_eq!(djoint.ncols(), cache.joint.ncols());
        let (sg, si) = cache.rows;
        let k = self.coattention.key_clinical.output_dim();
        let mut dfg = Array2::zeros((sg, k));
        let mut dfi = Array2::zeros((si, k));
        match self.joint_mode {
            JointMode::ClassTokens => {
                dfg.row_mut(0).assign(&djoint.slice(s![0, ..k]));
                dfi.row_mut(0).assign(&djoint.slice(s![0, k..]));
            }
            JointMode::FlattenAll => {
                let flat = djoint.row(0);
                for (d, s) in dfg.iter_mut().zip(flat.iter()) {
                    *d = *s;
                }
                for (d, s) in dfi.iter_mut().zip(flat.iter().skip(sg * k)) {
                    *d = *s;
                }
            }
        }
        let co = &self.coattention;
        let gco = &mut grad.coattention;
        let (deg, mut dec) = coattend_backward(
            &cache.genetics,
            &dfg,
            (&co.query_genetics, &co.key_clinical, &co.value_clinical),
            (&mut gco.query_genetics, &mut gco.key_clinical, &mut gco.value_clinical),
        );
        let (dei, dec_i) = coattend_backward(
            &cache.imaging,
            &dfi,
            (&co.query_imaging, &co.key_clinical, &co.value_clinical),
            (&mut gco.query_imaging, &mut gco.key_clinical, &mut gco.value_clinical),
        );
        dec += &dec_i;
        let dti = self.encoder_imaging.backward(&cache.encoders[0], &dei, &mut grad.encoder_imaging);
        let dtg = self.encoder_genetics.backward(&cache.encoders[1], &deg, &mut grad.encoder_genetics);
        let dtc = self.encoder_clinical.backward(&cache.encoders[2], &dec, &mut grad.encoder_clinical);
        self.tokenizers.backward(input, [&dti, &dtg, &dtc], &mut grad.tokenizers)
    }
}

impl Parameters for TriCoat {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.tokenizers.collect(&join(prefix, "tokenizers"), out);
        self.encoder_imaging.collect(&join(prefix, "encoder_imaging"), out);
        self.encoder_genetics.collect(&join(prefix, "encoder_genetics"), out);
        self.encoder_clinical.collect(&join(prefix, "encoder_clinical"), out);
        self.coattention.collect(&join(prefix, "coattention"), out);
        self.classifier.collect(&join(prefix, "classifier"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.tokenizers.collect_mut(&join(prefix, "tokenizers"), out);
        self.encoder_imaging.collect_mut(&join(prefix, "encoder_imaging"), out);
        self.encoder_genetics.collect_mut(&join(prefix, "encoder_genetics"), out);
        self.encoder_clinical.collect_mut(&join(prefix, "encoder_clinical"), out);
        self.coattention.collect_mut(&join(prefix, "coattention"), out);
        self.classifier.collect_mut(&join(prefix, "classifier"), out);
    }
}
