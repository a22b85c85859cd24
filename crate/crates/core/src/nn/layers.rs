use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{join, NamedView, NamedViewMut, Parameters};

/// Affine map `y = x W + b` applied row-wise. `weight` is `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight = Array2::from_shape_fn((input, output), |_| rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(output),
        }
    }

    /// Xavier weights with bias drawn from `U(±1/√input)`.
    pub fn xavier_uniform_bias(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut out = Self::xavier(input, output, rng);
        let bound = 1.0 / (input as f64).sqrt();
        out.bias.mapv_inplace(|_| rng.gen_range(-bound..bound));
        out
    }

    /// Identity weights (requires a square map), zero bias.
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates weight/bias gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl Parameters for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learnable gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / dim;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
            *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let k = *s;
            row.mapv_inplace(|v| v * k);
        }
        let y = &normalized * &self.gain + &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gain += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gain;
        let dim = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), s) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / dim;
            let mean_gx = g.dot(&xh) / dim;
            for ((o, gi), xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = s * (gi - mean_g - xi * mean_gx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        out.push((join(prefix, "gain"), self.gain.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        out.push((join(prefix, "gain"), self.gain.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x * INV_SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Numerically stable softmax over each row, in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Backward pass through a row-wise softmax given its output `probs`.
pub fn softmax_rows_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut ds = probs * dprobs;
    for (mut row, p) in ds.rows_mut().into_iter().zip(probs.rows()) {
        let s = row.sum();
        for (r, pi) in row.iter_mut().zip(p.iter()) {
            *r -= pi * s;
        }
    }
    ds
}

/// Random state for inverted dropout during training. Evaluation passes `None`.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    /// Mask of `0` or `1/(1-rate)` entries, or `None` when dropout is inactive.
    pub fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let rng = &mut self.rng;
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep
            }
        }))
    }
}

pub fn dropout_mask(drop: Option<&mut Dropout>, rows: usize, cols: usize) -> Option<Array2<f64>> {
    drop.and_then(|d| d.mask(rows, cols))
}

/// Two-layer perceptron `in → hidden (GELU) → out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn xavier(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::xavier(input, hidden, rng),
            output: Linear::xavier(hidden, output, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.hidden.forward(x);
        let act = pre.mapv(gelu);
        let y = self.output.forward(&act);
        (
            y,
            MlpCache {
                input: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let dact = self.output.backward(&cache.act, dy, &mut grad.output);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        self.hidden.backward(&cache.input, &dpre, &mut grad.hidden)
    }
}

impl Parameters for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.hidden.collect(&join(prefix, "hidden"), out);
        self.output.collect(&join(prefix, "output"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.hidden.collect_mut(&join(prefix, "hidden"), out);
        self.output.collect_mut(&join(prefix, "output"), out);
    }
}

/// Mean cross-entropy of one sample and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
    let mut grad = probs;
    grad[target] -= 1.0;
    (loss, grad)
}

/// Adam optimizer state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<ndarray::ArrayD<f64>>,
    second: Vec<ndarray::ArrayD<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<_> = params
            .named()
            .iter()
            .map(|(_, v)| ndarray::ArrayD::zeros(v.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let g = grads.named();
        for ((((_, mut p), (_, g)), m), v) in params
            .named_mut()
            .into_iter()
            .zip(g)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn softmax_rows_are_distributions() {
        let mut x = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(x[[1, 0]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm::new(4);
        let (y, _) = ln.forward(&array![[1.0, 2.0, 3.0, 4.0]]);
        assert_abs_diff_eq!(y.sum(), 0.0, epsilon = 1e-12);
        let var = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn adam_with_zero_lr_keeps_parameters() {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let mut lin = Linear::xavier(3, 2, &mut rng);
        let before = lin.clone();
        let mut grad = Linear::zeros(3, 2);
        grad.weight.fill(0.5);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &lin,
        );
        opt.step(&mut lin, &grad);
        assert_eq!(lin, before);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = cross_entropy(&[0.2, -1.0, 3.0], 1);
        assert!(loss > 0.0);
        assert_abs_diff_eq!(g.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
    }
}
