//! MlTr network assembly and the attention cost model.

pub mod cost;
mod mltr;
mod variant;

pub use cost::{flops_analytical, flops_measured, polynomial_degree, AttentionMode, CostReport};
pub use mltr::{
    cosine, patch_map, patch_project, space_to_depth, space_to_depth_map, Inference, MlTr, Output,
};
pub use variant::{LayerShape, VariantSpec, N_LAYERS};
