//! GCN experts, sparse top-K gating, and the GraphMoE model.

mod checkpoint;
mod gate;
mod moe;

pub use checkpoint::{Checkpoint, GatingConfig, NamedTensor};
pub use gate::{assign, top_k_mask, GateAssignment};
pub(crate) use moe::glorot;
pub use moe::{
    ExpertPass, ExpertVars, ForwardPass, GatingNetwork, GcnExpert, GraphView, LayerPass, LayerVars, ModelConfig,
    ModelVars, MoeLayer, MoeModel, Trainable,
};
