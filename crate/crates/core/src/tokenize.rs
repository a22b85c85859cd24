//! Modality tokenizers.
//!
//! Imaging: one token per ROI from its 4 traits (affine 4→k).
//! Genetics: one token per SNP, `[affine(attributes) 4→k/2 ‖ chromosome embedding k/2]`.
//! Clinical: one token per score (affine 1→k).
//! Each modality optionally prepends a learnable class token.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;

use crate::cohort::Modality;
use crate::error::{Error, Result};
use crate::input::{InputGradient, SubjectInput};
use crate::nn::{join, Linear, NamedView, NamedViewMut, Parameters};

pub const N_CHROMOSOMES: usize = 23;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `(T + 1) × k` with a class token in row 0, `T × k` otherwise.
    pub tokens: Array2<f64>,
    pub modality: Modality,
    pub has_class_token: bool,
}

impl TokenSequence {
    pub fn seq_len(&self) -> usize {
        self.tokens.nrows() - usize::from(self.has_class_token)
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

pub(crate) fn class_token_init(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.gen_range(-0.1..0.1))
}

fn prepend(class_token: Option<&Array1<f64>>, body: Array2<f64>) -> Array2<f64> {
    match class_token {
        Some(c) => concatenate![Axis(0), c.view().insert_axis(Axis(0)), body],
        None => body,
    }
}

/// Splits token gradients into class-token row and body rows.
fn split_grad(dtokens: &Array2<f64>, has_class: bool) -> (Option<Array1<f64>>, Array2<f64>) {
    if has_class {
        (
            Some(dtokens.row(0).to_owned()),
            dtokens.slice(s![1.., ..]).to_owned(),
        )
    } else {
        (None, dtokens.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagingTokenizer {
    pub projection: Linear,
    pub class_token: Option<Array1<f64>>,
    pub n_rois: usize,
}

impl ImagingTokenizer {
    pub fn new(n_rois: usize, dim: usize, class_token: bool, rng: &mut impl Rng) -> Self {
        Self {
            projection: Linear::xavier_uniform_bias(4, dim, rng),
            class_token: class_token.then(|| class_token_init(dim, rng)),
            n_rois,
        }
    }

    pub fn tokenize(&self, imaging: &Array2<f64>) -> Result<TokenSequence> {
        if imaging.dim() != (self.n_rois, 4) {
            return Err(Error::Shape(format!(
                "imaging input {:?}, expected ({}, 4)",
                imaging.dim(),
                self.n_rois
            )));
        }
        Ok(TokenSequence {
            tokens: prepend(self.class_token.as_ref(), self.projection.forward(imaging)),
            modality: Modality::Imaging,
            has_class_token: self.class_token.is_some(),
        })
    }

    pub fn backward(
        &self,
        imaging: &Array2<f64>,
        dtokens: &Array2<f64>,
        grad: &mut ImagingTokenizer,
    ) -> Array2<f64> {
        let (dcls, dbody) = split_grad(dtokens, self.class_token.is_some());
        if let (Some(d), Some(g)) = (dcls, grad.class_token.as_mut()) {
            *g += &d;
        }
        self.projection.backward(imaging, &dbody, &mut grad.projection)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneticsTokenizer {
    /// attributes 4 → k/2
    pub projection: Linear,
    /// 23 × k/2, row `c - 1` for chromosome `c`.
    pub chromosome_embedding: Array2<f64>,
    pub class_token: Option<Array1<f64>>,
    pub n_snps: usize,
}

impl GeneticsTokenizer {
    pub fn new(n_snps: usize, dim: usize, class_token: bool, rng: &mut impl Rng) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("model dimension {dim} must be even")));
        }
        let half = dim / 2;
        let bound = (6.0 / (N_CHROMOSOMES + half) as f64).sqrt();
        Ok(Self {
            projection: Linear::xavier_uniform_bias(4, half, rng),
            chromosome_embedding: Array2::from_shape_fn((N_CHROMOSOMES, half), |_| {
                rng.gen_range(-bound..bound)
            }),
            class_token: class_token.then(|| class_token_init(dim, rng)),
            n_snps,
        })
    }

    pub fn tokenize(&self, attributes: &Array2<f64>, chromosomes: &[u8]) -> Result<TokenSequence> {
        if attributes.dim() != (self.n_snps, 4) || chromosomes.len() != self.n_snps {
            return Err(Error::Shape(format!(
                "genetics input {:?} with {} chromosomes, expected ({}, 4)",
                attributes.dim(),
                chromosomes.len(),
                self.n_snps
            )));
        }
        let half = self.chromosome_embedding.ncols();
        let snp = self.projection.forward(attributes);
        let mut chr = Array2::zeros((self.n_snps, half));
        for (mut row, &c) in chr.rows_mut().into_iter().zip(chromosomes) {
            if !(1..=N_CHROMOSOMES as u8).contains(&c) {
                return Err(Error::Data(format!("chromosome {c} outside 1..=23")));
            }
            row.assign(&self.chromosome_embedding.row(c as usize - 1));
        }
        let body = concatenate![Axis(1), snp, chr];
        Ok(TokenSequence {
            tokens: prepend(self.class_token.as_ref(), body),
            modality: Modality::Genetics,
            has_class_token: self.class_token.is_some(),
        })
    }

    pub fn backward(
        &self,
        attributes: &Array2<f64>,
        chromosomes: &[u8],
        dtokens: &Array2<f64>,
        grad: &mut GeneticsTokenizer,
    ) -> Array2<f64> {
        let (dcls, dbody) = split_grad(dtokens, self.class_token.is_some());
        if let (Some(d), Some(g)) = (dcls, grad.class_token.as_mut()) {
            *g += &d;
        }
        let half = self.chromosome_embedding.ncols();
        let dsnp = dbody.slice(s![.., ..half]).to_owned();
        for (row, &c) in dbody.slice(s![.., half..]).rows().into_iter().zip(chromosomes) {
            let mut dst = grad.chromosome_embedding.row_mut(c as usize - 1);
            dst += &row;
        }
        self.projection.backward(attributes, &dsnp, &mut grad.projection)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalTokenizer {
    /// 1 → k
    pub projection: Linear,
    pub class_token: Option<Array1<f64>>,
    pub n_clinical: usize,
}

impl ClinicalTokenizer {
    pub fn new(n_clinical: usize, dim: usize, class_token: bool, rng: &mut impl Rng) -> Self {
        Self {
            projection: Linear::xavier_uniform_bias(1, dim, rng),
            class_token: class_token.then(|| class_token_init(dim, rng)),
            n_clinical,
        }
    }

    pub fn tokenize(&self, clinical: &Array1<f64>) -> Result<TokenSequence> {
        if clinical.len() != self.n_clinical {
            return Err(Error::Shape(format!(
                "clinical input of length {}, expected {}",
                clinical.len(),
                self.n_clinical
            )));
        }
        let column = clinical.view().insert_axis(Axis(1)).to_owned();
        Ok(TokenSequence {
            tokens: prepend(self.class_token.as_ref(), self.projection.forward(&column)),
            modality: Modality::Clinical,
            has_class_token: self.class_token.is_some(),
        })
    }

    pub fn backward(
        &self,
        clinical: &Array1<f64>,
        dtokens: &Array2<f64>,
        grad: &mut ClinicalTokenizer,
    ) -> Array1<f64> {
        let (dcls, dbody) = split_grad(dtokens, self.class_token.is_some());
        if let (Some(d), Some(g)) = (dcls, grad.class_token.as_mut()) {
            *g += &d;
        }
        let column = clinical.view().insert_axis(Axis(1)).to_owned();
        self.projection
            .backward(&column, &dbody, &mut grad.projection)
            .column(0)
            .to_owned()
    }
}

fn collect_class<'a>(t: &'a Option<Array1<f64>>, prefix: &str, out: &mut Vec<NamedView<'a>>) {
    if let Some(c) = t {
        out.push((join(prefix, "class_token"), c.view().into_dyn()));
    }
}

fn collect_class_mut<'a>(
    t: &'a mut Option<Array1<f64>>,
    prefix: &str,
    out: &mut Vec<NamedViewMut<'a>>,
) {
    if let Some(c) = t {
        out.push((join(prefix, "class_token"), c.view_mut().into_dyn()));
    }
}

impl Parameters for ImagingTokenizer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.projection.collect(&join(prefix, "projection"), out);
        collect_class(&self.class_token, prefix, out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.projection.collect_mut(&join(prefix, "projection"), out);
        collect_class_mut(&mut self.class_token, prefix, out);
    }
}

impl Parameters for GeneticsTokenizer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.projection.collect(&join(prefix, "projection"), out);
        out.push((
            join(prefix, "chromosome_embedding"),
            self.chromosome_embedding.view().into_dyn(),
        ));
        collect_class(&self.class_token, prefix, out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.projection.collect_mut(&join(prefix, "projection"), out);
        out.push((
            join(prefix, "chromosome_embedding"),
            self.chromosome_embedding.view_mut().into_dyn(),
        ));
        collect_class_mut(&mut self.class_token, prefix, out);
    }
}

impl Parameters for ClinicalTokenizer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.projection.collect(&join(prefix, "projection"), out);
        collect_class(&self.class_token, prefix, out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.projection.collect_mut(&join(prefix, "projection"), out);
        collect_class_mut(&mut self.class_token, prefix, out);
    }
}

/// All three modality tokenizers.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerParams {
    pub imaging: ImagingTokenizer,
    pub genetics: GeneticsTokenizer,
    pub clinical: ClinicalTokenizer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenizerShape {
    pub n_rois: usize,
    pub n_snps: usize,
    pub n_clinical: usize,
    pub dim: usize,
    pub class_tokens: bool,
}

impl TokenizerParams {
    pub fn new(shape: TokenizerShape, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            imaging: ImagingTokenizer::new(shape.n_rois, shape.dim, shape.class_tokens, rng),
            genetics: GeneticsTokenizer::new(shape.n_snps, shape.dim, shape.class_tokens, rng)?,
            clinical: ClinicalTokenizer::new(shape.n_clinical, shape.dim, shape.class_tokens, rng),
        })
    }

    /// `[imaging, genetics, clinical]` token sequences.
    pub fn tokenize(&self, input: &SubjectInput) -> Result<[TokenSequence; 3]> {
        Ok([
            self.imaging.tokenize(&input.imaging)?,
            self.genetics.tokenize(&input.snp_attributes, &input.chromosomes)?,
            self.clinical.tokenize(&input.clinical)?,
        ])
    }

    pub fn backward(
        &self,
        input: &SubjectInput,
        dtokens: [&Array2<f64>; 3],
        grad: &mut TokenizerParams,
    ) -> InputGradient {
        InputGradient {
            imaging: self.imaging.backward(&input.imaging, dtokens[0], &mut grad.imaging),
            snp_attributes: self.genetics.backward(
                &input.snp_attributes,
                &input.chromosomes,
                dtokens[1],
                &mut grad.genetics,
            ),
            clinical: self.clinical.backward(&input.clinical, dtokens[2], &mut grad.clinical),
        }
    }
}

impl Parameters for TokenizerParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.imaging.collect(&join(prefix, "imaging"), out);
        self.genetics.collect(&join(prefix, "genetics"), out);
        self.clinical.collect(&join(prefix, "clinical"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.imaging.collect_mut(&join(prefix, "imaging"), out);
        self.genetics.collect_mut(&join(prefix, "genetics"), out);
        self.clinical.collect_mut(&join(prefix, "clinical"), out);
    }
}
