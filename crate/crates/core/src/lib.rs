//! Multi-turn on-policy distillation over tabular categorical policies,
//! with forward and backward temporal curricula and staleness-bounded
//! sub-trajectory replay.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod curriculum;
pub mod distill;
pub mod env;
pub mod error;
pub mod metrics;
pub mod par;
pub mod policy;
pub mod replay;
pub mod runtime;
pub mod seed;

pub use curriculum::{b2f_prefix_len, horizon_at, CurriculumSchedule};
pub use distill::{
    collect_teacher_trajectories, learner_step, rollout_b2f, rollout_f2b, rollout_opd,
    trajectory_loss, TeacherTrajectoryStore, Trajectory,
};
pub use env::{Action, Env, EnvConfig, EnvKind, EnvState, Observation, StepResult};
pub use error::{Error, Result};
pub use metrics::{EvalRecord, MetricsLog, TrainRecord};
pub use policy::{
    forward_kl, CategoricalDistribution, Checkpoint, History, HistoryKey, Policy, PolicyParams,
    TeacherConfig, TeacherPolicy,
};
pub use replay::{ExperienceEntry, RingBuffer};
pub use runtime::{evaluate, run_training, Algo, Mode, RunConfig};
