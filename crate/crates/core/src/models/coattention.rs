//! Single-head co-attention: queries from imaging or genetics, keys and
//! values from the clinical sequence.

use ndarray::Array2;
use rand::Rng;

use crate::nn::{join, softmax_rows, softmax_rows_backward, Linear, NamedView, NamedViewMut, Parameters};

/// `W_Q^G`, `W_Q^I`, `W_K^C`, `W_V^C`, each an affine `k → k` map.
#[derive(Clone, Debug, PartialEq)]
pub struct CoAttention {
    pub query_genetics: Linear,
    pub query_imaging: Linear,
    pub key_clinical: Linear,
    pub value_clinical: Linear,
}

#[derive(Clone, Debug)]
pub struct CoAttentionCache {
    source: Array2<f64>,
    clinical: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `S × C`, rows are distributions over clinical tokens.
    pub attn: Array2<f64>,
}

impl CoAttention {
    pub fn xavier(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query_genetics: Linear::xavier(dim, dim, rng),
            query_imaging: Linear::xavier(dim, dim, rng),
            key_clinical: Linear::xavier(dim, dim, rng),
            value_clinical: Linear::xavier(dim, dim, rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            query_genetics: Linear::identity(dim),
            query_imaging: Linear::identity(dim),
            key_clinical: Linear::identity(dim),
            value_clinical: Linear::identity(dim),
        }
    }
}

/// `softmax(Q Kᵀ / √d_k) V` with `Q = source·W_Q`, `K = clinical·W_K`,
/// `V = clinical·W_V`. Returns the fused `S × k` matrix and its cache,
/// which holds the `S × C` attention.
pub fn coattend(
    source: &Array2<f64>,
    clinical: &Array2<f64>,
    query: &Linear,
    key: &Linear,
    value: &Linear,
) -> (Array2<f64>, CoAttentionCache) {
    let q = query.forward(source);
    let k = key.forward(clinical);
    let v = value.forward(clinical);
    let scale = 1.0 / (k.ncols() as f64).sqrt();
    let mut attn = q.dot(&k.t()) * scale;
    softmax_rows(&mut attn);
    let fused = attn.dot(&v);
    (
        fused,
        CoAttentionCache {
            source: source.clone(),
            clinical: clinical.clone(),
            q,
            k,
            v,
            attn,
        },
    )
}

/// Returns `(d source, d clinical)`; projection gradients accumulate into
/// the given gradient layers.
pub fn coattend_backward(
    cache: &CoAttentionCache,
    dfused: &Array2<f64>,
    (query, key, value): (&Linear, &Linear, &Linear),
    (gquery, gkey, gvalue): (&mut Linear, &mut Linear, &mut Linear),
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (cache.k.ncols() as f64).sqrt();
    let dattn = dfused.dot(&cache.v.t());
    let dv = cache.attn.t().dot(dfused);
    let ds = softmax_rows_backward(&cache.attn, &dattn) * scale;
    let dq = ds.dot(&cache.k);
    let dk = ds.t().dot(&cache.q);
    let dsource = query.backward(&cache.source, &dq, gquery);
    let mut dclinical = key.backward(&cache.clinical, &dk, gkey);
    dclinical += &value.backward(&cache.clinical, &dv, gvalue);
    (dsource, dclinical)
}

impl Parameters for CoAttention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.query_genetics.collect(&join(prefix, "query_genetics"), out);
        self.query_imaging.collect(&join(prefix, "query_imaging"), out);
        self.key_clinical.collect(&join(prefix, "key_clinical"), out);
        self.value_clinical.collect(&join(prefix, "value_clinical"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.query_genetics.collect_mut(&join(prefix, "query_genetics"), out);
        self.query_imaging.collect_mut(&join(prefix, "query_imaging"), out);
        self.key_clinical.collect_mut(&join(prefix, "key_clinical"), out);
        self.value_clinical.collect_mut(&join(prefix, "value_clinical"), out);
    }
}
