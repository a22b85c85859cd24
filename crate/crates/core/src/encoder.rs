//! Pre-norm transformer encoder.
//!
//! Each layer computes
//! `F' = MHA(LN(F)) + F` followed by `F_out = FF(LN(F')) + F'`.
//! There is no final normalization after the last layer and no positional
//! encoding, so the stack is permutation-equivariant over tokens.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    dropout_mask, gelu, gelu_grad, join, softmax_rows, softmax_rows_backward, Dropout, LayerNorm,
    LayerNormCache, Linear, NamedView, NamedViewMut, Parameters,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub dim: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            dim: 256,
            ff_hidden: 1024,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model dimension {} not divisible by {} heads",
                self.dim, self.n_heads
            )));
        }
        if self.ff_hidden < self.dim {
            return Err(Error::Config(format!(
                "feed-forward width {} below model dimension {}",
                self.ff_hidden, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per head, softmax probabilities before dropout.
    pub weights: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::xavier(dim, dim, rng),
            key: Linear::xavier(dim, dim, rng),
            value: Linear::xavier(dim, dim, rng),
            output: Linear::xavier(dim, dim, rng),
            n_heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.query.output_dim() / self.n_heads
    }

    pub fn forward(&self, x: &Array2<f64>, mut drop: Option<&mut Dropout>) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let t = x.nrows();
        let mut concat = Array2::zeros((t, dh * self.n_heads));
        let mut weights = Vec::with_capacity(self.n_heads);
        let mut masks = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut a);
            let mask = dropout_mask(drop.as_deref_mut(), t, t);
            let out = match &mask {
                Some(m) => (&a * m).dot(&v.slice(cols)),
                None => a.dot(&v.slice(cols)),
            };
            concat.slice_mut(cols).assign(&out);
            weights.push(a);
            masks.push(mask);
        }
        let y = self.output.forward(&concat);
        (
            y,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                weights,
                masks,
                concat,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        grad: &mut MultiHeadAttention,
    ) -> Array2<f64> {
        let dconcat = self.output.backward(&cache.concat, dy, &mut grad.output);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dout = dconcat.slice(cols);
            let a = &cache.weights[h];
            let (dropped, da) = match &cache.masks[h] {
                Some(m) => {
                    let dropped = a * m;
                    let da = dout.dot(&cache.v.slice(cols).t()) * m;
                    (dropped, da)
                }
                None => (a.clone(), dout.dot(&cache.v.slice(cols).t())),
            };
            dv.slice_mut(cols).assign(&dropped.t().dot(&dout));
            let ds = softmax_rows_backward(a, &da) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.query.backward(&cache.input, &dq, &mut grad.query);
        dx += &self.key.backward(&cache.input, &dk, &mut grad.key);
        dx += &self.value.backward(&cache.input, &dv, &mut grad.value);
        dx
    }
}

/// Evaluation-mode self-attention: output and per-head weights.
pub fn self_attention(x: &Array2<f64>, attention: &MultiHeadAttention) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (y, cache) = attention.forward(x, None);
    (y, cache.weights)
}

impl Parameters for MultiHeadAttention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.query.collect(&join(prefix, "query"), out);
        self.key.collect(&join(prefix, "key"), out);
        self.value.collect(&join(prefix, "value"), out);
        self.output.collect(&join(prefix, "output"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.query.collect_mut(&join(prefix, "query"), out);
        self.key.collect_mut(&join(prefix, "key"), out);
        self.value.collect_mut(&join(prefix, "value"), out);
        self.output.collect_mut(&join(prefix, "output"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    norm1: LayerNormCache,
    pub attention: AttentionCache,
    norm2: LayerNormCache,
    norm2_out: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
}

impl EncoderLayer {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(config.dim),
            attention: MultiHeadAttention::new(config.dim, config.n_heads, rng),
            norm2: LayerNorm::new(config.dim),
            ff_in: Linear::xavier(config.dim, config.ff_hidden, rng),
            ff_out: Linear::xavier(config.ff_hidden, config.dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, mut drop: Option<&mut Dropout>) -> (Array2<f64>, LayerCache) {
        let (n1, norm1) = self.norm1.forward(x);
        let (attn, attention) = self.attention.forward(&n1, drop.as_deref_mut());
        let mid = attn + x;
        let (norm2_out, norm2) = self.norm2.forward(&mid);
        let ff_pre = self.ff_in.forward(&norm2_out);
        let ff_act = ff_pre.mapv(gelu);
        let mut ff = self.ff_out.forward(&ff_act);
        let ff_mask = dropout_mask(drop, ff.nrows(), ff.ncols());
        if let Some(m) = &ff_mask {
            ff *= m;
        }
        let y = ff + &mid;
        (
            y,
            LayerCache {
                norm1,
                attention,
                norm2,
                norm2_out,
                ff_pre,
                ff_act,
                ff_mask,
            },
        )
    }

    pub fn backward(&self, cache: &LayerCache, dy: &Array2<f64>, grad: &mut EncoderLayer) -> Array2<f64> {
        let dff = match &cache.ff_mask {
            Some(m) => dy * m,
            None => dy.clone(),
        };
        let dact = self.ff_out.backward(&cache.ff_act, &dff, &mut grad.ff_out);
        let dpre = dact * &cache.ff_pre.mapv(gelu_grad);
        let dn2 = self.ff_in.backward(&cache.norm2_out, &dpre, &mut grad.ff_in);
        let dmid = self.norm2.backward(&cache.norm2, &dn2, &mut grad.norm2) + dy;
        let dn1 = self.attention.backward(&cache.attention, &dmid, &mut grad.attention);
        self.norm1.backward(&cache.norm1, &dn1, &mut grad.norm1) + &dmid
    }
}

impl Parameters for EncoderLayer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.attention.collect(&join(prefix, "attention"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.ff_in.collect(&join(prefix, "ff_in"), out);
        self.ff_out.collect(&join(prefix, "ff_out"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.attention.collect_mut(&join(prefix, "attention"), out);
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.ff_in.collect_mut(&join(prefix, "ff_in"), out);
        self.ff_out.collect_mut(&join(prefix, "ff_out"), out);
    }
}

/// A stack of pre-norm layers; `EncoderParams` in configuration terms.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

pub type EncoderParams = Encoder;

#[derive(Clone, Debug)]
pub struct EncoderCache {
    pub layers: Vec<LayerCache>,
}

impl EncoderCache {
    /// Per-head attention weights of one layer.
    pub fn attention(&self, layer: usize) -> &[Array2<f64>] {
        &self.layers[layer].attention.weights
    }

    /// Every head of every layer, in layer order.
    pub fn all_attention(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.layers.iter().flat_map(|l| l.attention.weights.iter())
    }
}

impl Encoder {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            layers: (0..config.n_layers)
                .map(|_| EncoderLayer::new(config, rng))
                .collect(),
        })
    }

    pub fn forward(&self, x: &Array2<f64>, mut drop: Option<&mut Dropout>) -> Result<(Array2<f64>, EncoderCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = layer.forward(&h, drop.as_deref_mut());
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in encoder layer {i}")));
            }
            h = next;
            caches.push(cache);
        }
        Ok((h, EncoderCache { layers: caches }))
    }

    pub fn backward(&self, cache: &EncoderCache, dy: &Array2<f64>, grad: &mut Encoder) -> Array2<f64> {
        let mut d = dy.clone();
        for ((layer, c), g) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            d = layer.backward(c, &d, g);
        }
        d
    }
}

/// Evaluation-mode encoding of a token matrix.
pub fn encode(tokens: &Array2<f64>, params: &Encoder, config: &EncoderConfig) -> Result<Array2<f64>> {
    if params.layers.len() != config.n_layers {
        return Err(Error::Config(format!(
            "encoder has {} layers, config says {}",
            params.layers.len(),
            config.n_layers
        )));
    }
    if tokens.ncols() != config.dim {
        return Err(Error::Shape(format!(
            "token width {} vs model dimension {}",
            tokens.ncols(),
            config.dim
        )));
    }
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite encoder input".into()));
    }
    params.forward(tokens, None).map(|(y, _)| y)
}

impl Parameters for Encoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&join(prefix, &format!("layer{i}")), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&join(prefix, &format!("layer{i}")), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::nn::zeros_like;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(n_layers: usize, n_heads: usize, dim: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers,
            n_heads,
            dim,
            ff_hidden: 4 * dim,
            dropout: 0.0,
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn reference_shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = EncoderConfig {
            dropout: 0.0,
            ..Default::default()
        };
        let enc = Encoder::new(&config, &mut rng).unwrap();
        let x = random_matrix(73, 256, &mut rng);
        assert_eq!(encode(&x, &enc, &config).unwrap().dim(), (73, 256));
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = small_config(0, 2, 8);
        let enc = Encoder::new(&config, &mut rng).unwrap();
        let x = random_matrix(5, 8, &mut rng);
        assert_eq!(encode(&x, &enc, &config).unwrap(), x);
    }

    #[test]
    fn zeroed_sublayers_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = small_config(2, 2, 8);
        let mut enc = Encoder::new(&config, &mut rng).unwrap();
        for l in &mut enc.layers {
            l.attention.output.zero_();
            l.ff_out.zero_();
        }
        let x = random_matrix(4, 8, &mut rng);
        assert_eq!(encode(&x, &enc, &config).unwrap(), x);
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(6, 2, &mut rng);
        let x = random_matrix(1, 6, &mut rng);
        let (y, w) = self_attention(&x, &mha);
        assert!(w.iter().all(|a| a[[0, 0]] == 1.0));
        // oracle: out = (x Wv + bv) Wo + bo, computed by explicit loops
        let mut v = [0.0; 6];
        for j in 0..6 {
            v[j] = mha.value.bias[j] + (0..6).map(|i| x[[0, i]] * mha.value.weight[[i, j]]).sum::<f64>();
        }
        for j in 0..6 {
            let o = mha.output.bias[j] + (0..6).map(|i| v[i] * mha.output.weight[[i, j]]).sum::<f64>();
            assert!((y[[0, j]] - o).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = MultiHeadAttention::new(8, 4, &mut rng);
        let row = random_matrix(1, 8, &mut rng);
        let x = Array2::from_shape_fn((5, 8), |(_, j)| row[[0, j]]);
        let (_, w) = self_attention(&x, &mha);
        for a in w {
            assert!(a.iter().all(|&p| (p - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn two_token_hand_computed_attention() {
        // one head, k = 2, identity projections
        let mha = MultiHeadAttention {
            query: Linear::identity(2),
            key: Linear::identity(2),
            value: Linear::identity(2),
            output: Linear::identity(2),
            n_heads: 1,
        };
        let x = array![[1.0, 0.0], [0.0, 2.0]];
        let (y, w) = self_attention(&x, &mha);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // row 0 logits: (1, 0)/√2; row 1 logits: (0, 4)/√2
        let p0 = 1.0 / (1.0 + (-r).exp());
        let p1 = 1.0 / (1.0 + (4.0 * r).exp());
        assert!((w[0][[0, 0]] - p0).abs() < 1e-14);
        assert!((w[0][[1, 0]] - p1).abs() < 1e-14);
        assert!((y[[0, 0]] - p0).abs() < 1e-14);
        assert!((y[[0, 1]] - 2.0 * (1.0 - p0)).abs() < 1e-14);
        assert!((y[[1, 1]] - 2.0 * (1.0 - p1)).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(small_config(1, 3, 8).validate().is_err());
        let mut c = small_config(1, 2, 8);
        c.ff_hidden = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let config = small_config(1, 2, 8);
        for draw in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
            let enc = Encoder::new(&config, &mut rng).unwrap();
            let x = random_matrix(3, 8, &mut rng);
            let w = random_matrix(3, 8, &mut rng);
            let loss = |e: &Encoder| (e.forward(&x, None).unwrap().0 * &w).sum();
            let (_, cache) = enc.forward(&x, None).unwrap();
            let mut grad = zeros_like(&enc);
            let dx = enc.backward(&cache, &w, &mut grad);
            let report = check_gradients(&enc, &grad, loss, 1e-5);
            assert!(report.worst_relative_error <= 1e-4, "{report:?}");
            // input gradient
            let num = crate::nn::gradcheck::numeric_gradient(
                x.as_slice().unwrap(),
                |v| (enc.forward(&Array2::from_shape_vec((3, 8), v.to_vec()).unwrap(), None).unwrap().0 * &w).sum(),
                1e-5,
            );
            let err = Array1::from(num) - Array1::from_iter(dx.iter().copied());
            assert!(err.iter().map(|e| e.abs()).fold(0.0, f64::max) < 1e-7);
        }
    }

    #[test]
    fn dropout_masks_are_respected_by_backward() {
        let config = EncoderConfig {
            dropout: 0.3,
            ..small_config(1, 2, 8)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Encoder::new(&config, &mut rng).unwrap();
        let x = random_matrix(4, 8, &mut rng);
        let w = random_matrix(4, 8, &mut rng);
        let run = |e: &Encoder| {
            let mut d = Dropout::new(0.3, ChaCha8Rng::seed_from_u64(77));
            (e.forward(&x, Some(&mut d)).unwrap().0 * &w).sum()
        };
        let mut d = Dropout::new(0.3, ChaCha8Rng::seed_from_u64(77));
        let (_, cache) = enc.forward(&x, Some(&mut d)).unwrap();
        let mut grad = zeros_like(&enc);
        enc.backward(&cache, &w, &mut grad);
        let report = check_gradients(&enc, &grad, run, 1e-5);
        assert!(report.worst_relative_error <= 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn attention_rows_are_distributions(seed in 0u64..10_000, t in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mha = MultiHeadAttention::new(8, 2, &mut rng);
            let x = random_matrix(t, 8, &mut rng) * 4.0;
            let (_, w) = self_attention(&x, &mha);
            for a in w {
                for row in a.rows() {
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let config = small_config(2, 2, 8);
            let enc = Encoder::new(&config, &mut rng).unwrap();
            let x = random_matrix(5, 8, &mut rng);
            let perm = [2usize, 4, 0, 1, 3];
            let px = Array2::from_shape_fn((5, 8), |(i, j)| x[[perm[i], j]]);
            let y = encode(&x, &enc, &config).unwrap();
            let py = encode(&px, &enc, &config).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                for j in 0..8 {
                    prop_assert!((py[[i, j]] - y[[src, j]]).abs() < 1e-12);
                }
            }
        }
    }
}
