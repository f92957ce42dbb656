//! Training loops, evaluation, baselines and the ablation suite.

pub mod ablation;
pub mod eval;
pub mod metrics;
pub mod parallel;
pub mod report;
pub mod train;

pub use eval::{chain_seed, evaluate, evaluate_imitation, evaluate_random_walk, generate, random_walk};
pub use metrics::{composite, nearest_expert, score, CollisionRates, Metrics};
pub use parallel::{map_ordered, worker_count};
pub use train::{log_csv, train, train_from, train_imitation, EpochLog, ImitationBaseline, TrainConfig, Trained};
pub use ablation::{
    ablation_suite, hex12, rows_csv, AblationConfig, AblationRow, Checkpoints, ExperimentSpec, ModuleList, Modules,
};
pub use report::{mode_collapse_report, ModeCollapseReport, ModelModes, COLLAPSE_FREQUENCY};
