//! Dense double-precision building blocks with hand-written backward passes.

pub mod gradcheck;
pub mod layers;
pub mod params;

pub use layers::{
    cross_entropy, dropout_mask, gelu, gelu_grad, softmax, softmax_rows, softmax_rows_backward,
    Adam, AdamConfig, Dropout, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache,
};
pub use params::{join, zeros_like, NamedView, NamedViewMut, Parameters};
