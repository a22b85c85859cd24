//! Integrated-gradients attribution and explanation prompts.

pub mod ig;
pub mod llm;
pub mod prompt;

pub use ig::{
    attribute_subject, cohort_feature_stats, integrated_gradients, AttributionReport, FeatureAttribution,
    IntegratedGradients, ModelLogit, ScalarFunction,
};
pub use llm::{prompt_hash, LlmClient, LlmConfig, LlmMode, LlmResponse, API_KEY_VAR, ENDPOINT_VAR};
pub use prompt::{
    build_prompt, rank_salient_features, Direction, PromptDocument, PromptTemplate, RankedFeature, Ranking,
    DEFAULT_TEMPLATE,
};
