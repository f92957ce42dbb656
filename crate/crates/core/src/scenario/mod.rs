//! Synthetic 2D driving scenes, expert demonstrations, scene tokens,
//! constraint penalties and the ego-progress reward.

pub mod constraint;
pub mod dataset;
pub mod ep;
pub mod expert;
pub mod geometry;
pub mod scene;
pub mod tokens;
pub mod trajectory;

pub use constraint::{
    constraint_eval, hard_collision, road_compliant, ConstraintEval, ConstraintParams,
    ConstraintScore,
};
pub use dataset::{dataset_build, Dataset, DatasetConfig, Record, SceneSample};
pub use ep::{ep_reward, EpScore};
pub use expert::{expert_trajectories, Command};
pub use geometry::{Polyline, Vec2};
pub use scene::{generate_scene, EgoState, Lane, Obstacle, ScenarioKind, Scene};
pub use tokens::{scene_tokens, SceneTokens, TOKEN_DIM};
pub use trajectory::{Trajectory, DT, HORIZON};

pub const V_MAX: f64 = 20.0;
pub const KAPPA_MAX: f64 = 0.3;
pub const EGO_RADIUS: f64 = 1.0;
