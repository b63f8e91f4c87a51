//! Decision transformer with hyper-network-initialized adapter layers.
//!
//! The crate provides the full stack: a minimal f64 autodiff engine, the
//! causal decision-transformer policy, bottleneck+FiLM adapters and their
//! IA3 variant, the demonstration-conditioned hyper-network, a pointmaze
//! task suite with a scripted expert, the training/adaptation loops, and
//! binary persistence plus evaluation metrics.

pub mod adapt;
pub mod error;
pub mod eval;
pub mod hypernet;
pub mod maze;
pub mod model;
pub mod optim;
pub mod pca;
pub mod plot;
pub mod replay;
pub mod storage;
pub mod tape;
pub mod tensor;
pub mod train;

pub use adapt::{count_adaptation_params, AdaptationKind, AdapterParams, Ia3Params};
pub use error::{Error, Result};
pub use eval::{
    data_efficiency, evaluate_policy, DataEfficiency, MetricsRecord, PolicySpec, RolloutLog,
};
pub use hypernet::{Demonstration, HyperNetConfig, HyperNetVariant};
pub use maze::{EnvState, MazeEnv, MazeLayout, StepResult, TaskSpec};
pub use model::{AdaptationParams, DTConfig, PromptData, TrajectorySegment};
pub use optim::{adam_step, evaluate_with_gradients, grad_check, AdamState, ParamSet};
pub use replay::{relabel_rtg, ReplayBuffer, Trajectory};
pub use storage::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use tape::{SoftmaxMask, Tape, Var};
pub use tensor::Tensor;
pub use train::{
    adapt_meta_il, adapt_meta_lfo, pretrain_dt, run_baseline, train_hypernet, AdaptInputs,
    AdaptMode, AdaptOutcome, AdaptSetting, TaskDataset, TrainBudget,
};
