//! Conditioned velocity-field model and its training losses.

pub mod conditions;
pub mod loss;
pub mod model;

pub use conditions::{ConditionSet, ConditionType};
pub use loss::{energy, energy_graph, rf_loss, rf_loss_graph, rfe_loss, rfe_loss_graph, FlowBatch};
pub use model::{
    FlowState, ModelConfig, Normalizer, PreparedScene, SceneInput, VelocityModel, FLOW_SCALE,
    MIN_SCALE,
};
