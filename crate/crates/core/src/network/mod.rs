//! Backbone, heads, parameter storage and class embeddings.

pub mod config;
pub mod embedding;
pub mod model;
pub mod params;

pub use config::{Alignment, ModelConfig};
pub use embedding::EmbeddingTable;
pub use model::{
    argmax_rows, condition_of_param, is_head_param, is_no_decay_param, layer_normalize,
    prompted_norm, Graph, PreparedScan, SegModel, INITIAL_LOGIT_SCALE, NORM_EPS,
};
pub use params::{ParamGrads, ParamStore};

#[cfg(test)]
mod tests;
