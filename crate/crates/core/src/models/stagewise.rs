//! Stage-wise MLP baseline on raw flattened modality features:
//! per-modality layer, then two shared stages, then a linear output.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use crate::input::{InputGradient, SubjectInput};
use crate::nn::{gelu, gelu_grad, join, Linear, NamedView, NamedViewMut, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct Stagewise {
    pub imaging: Linear,
    pub genetics: Linear,
    pub clinical: Linear,
    pub stage2: Linear,
    pub stage3: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
struct Dense {
    input: Array2<f64>,
    pre: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct StagewiseCache {
    branches: [Dense; 3],
    joint: Array2<f64>,
    stage2: Dense,
    stage3: Dense,
    last: Array2<f64>,
}

fn dense(layer: &Linear, x: Array2<f64>) -> (Array2<f64>, Dense) {
    let pre = layer.forward(&x);
    (pre.mapv(gelu), Dense { input: x, pre })
}

fn dense_backward(layer: &Linear, cache: &Dense, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
    let dpre = dy * &cache.pre.mapv(gelu_grad);
    layer.backward(&cache.input, &dpre, grad)
}

impl Stagewise {
    /// `widths` are the raw block sizes (imaging, genetics, clinical);
    /// `hidden` the three stage sizes.
    pub fn new(widths: [usize; 3], hidden: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            imaging: Linear::xavier(widths[0], hidden[0], rng),
            genetics: Linear::xavier(widths[1], hidden[0], rng),
            clinical: Linear::xavier(widths[2], hidden[0], rng),
            stage2: Linear::xavier(3 * hidden[0], hidden[1], rng),
            stage3: Linear::xavier(hidden[1], hidden[2], rng),
            output: Linear::xavier(hidden[2], 3, rng),
        }
    }

    pub fn input_widths(&self) -> [usize; 3] {
        [
            self.imaging.input_dim(),
            self.genetics.input_dim(),
            self.clinical.input_dim(),
        ]
    }

    pub fn forward(&self, input: &SubjectInput) -> (Array2<f64>, StagewiseCache) {
        let blocks = input.stagewise_blocks();
        let row = |b: &ndarray::Array1<f64>| b.view().insert_axis(Axis(0)).to_owned();
        let (hi, ci) = dense(&self.imaging, row(&blocks[0]));
        let (hg, cg) = dense(&self.genetics, row(&blocks[1]));
        let (hc, cc) = dense(&self.clinical, row(&blocks[2]));
        let joint = concatenate![Axis(1), hi, hg, hc];
        let (h2, c2) = dense(&self.stage2, joint.clone());
        let (h3, c3) = dense(&self.stage3, h2);
        let logits = self.output.forward(&h3);
        (
            logits,
            StagewiseCache {
                branches: [ci, cg, cc],
                joint,
                stage2: c2,
                stage3: c3,
                last: h3,
            },
        )
    }

    pub fn backward(
        &self,
        input: &SubjectInput,
        cache: &StagewiseCache,
        dlogits: &Array2<f64>,
        grad: &mut Stagewise,
    ) -> InputGradient {
        let dh3 = self.output.backward(&cache.last, dlogits, &mut grad.output);
        let dh2 = dense_backward(&self.stage3, &cache.stage3, &dh3, &mut grad.stage3);
        let djoint = dense_backward(&self.stage2, &cache.stage2, &dh2, &mut grad.stage2);
        debug_assert_eq!(djoint.ncols(), cache.joint.ncols());
        let h = self.imaging.output_dim();
        let di = dense_backward(&self.imaging, &cache.branches[0], &djoint.slice(s![.., ..h]).to_owned(), &mut grad.imaging);
        let dg = dense_backward(&self.genetics, &cache.branches[1], &djoint.slice(s![.., h..2 * h]).to_owned(), &mut grad.genetics);
        let dc = dense_backward(&self.clinical, &cache.branches[2], &djoint.slice(s![.., 2 * h..]).to_owned(), &mut grad.clinical);

        let mut out = InputGradient::zeros_for(input);
        for (dst, src) in out.imaging.iter_mut().zip(di.row(0)) {
            *dst = *src;
        }
        // genetics block is SNP-major, 4 attributes then the chromosome index
        for i in 0..out.snp_attributes.nrows() {
            for a in 0..4 {
                out.snp_attributes[[i, a]] = dg[[0, i * 5 + a]];
            }
        }
        out.clinical.assign(&dc.row(0));
        out
    }
}

impl Parameters for Stagewise {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.imaging.collect(&join(prefix, "imaging"), out);
        self.genetics.collect(&join(prefix, "genetics"), out);
        self.clinical.collect(&join(prefix, "clinical"), out);
        self.stage2.collect(&join(prefix, "stage2"), out);
        self.stage3.collect(&join(prefix, "stage3"), out);
        self.output.collect(&join(prefix, "output"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.imaging.collect_mut(&join(prefix, "imaging"), out);
        self.genetics.collect_mut(&join(prefix, "genetics"), out);
        self.clinical.collect_mut(&join(prefix, "clinical"), out);
        self.stage2.collect_mut(&join(prefix, "stage2"), out);
        self.stage3.collect_mut(&join(prefix, "stage3"), out);
        self.output.collect_mut(&join(prefix, "output"), out);
    }
}
