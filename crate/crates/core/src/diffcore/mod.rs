//! Small reverse-mode differentiation substrate: dense layers, single-head
//! cross-attention, sinusoidal time features and Adam.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use layers::{
    attend, cross_attention, dense, dense_forward, project_kv, register_attention,
    register_dense, sinusoidal_embed, Activation, Attended, KeyValues, TimeEmbedding,
};
pub use params::{Adam, ParamStore};
pub use tensor::Tensor2;
