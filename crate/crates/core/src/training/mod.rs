//! Teacher pretraining and student distillation with SGD, plateau learning
//! rate reduction, early stopping, checkpoints and run directories.

mod checkpoint;
mod config;
mod history;
mod optim;
mod runner;
mod schedule;

pub use self::checkpoint::{load_checkpoint, peek_version, save_checkpoint, Checkpoint, Role, CHECKPOINT_VERSION, MAGIC};
pub use self::config::{DistillConfig, Method, OptimizerConfig, ScheduleConfig, SelfSupervisionConfig, TOY_LAMBDA_CRKD};
pub use self::history::{read_history, EpochRecord, RunDir, ValMetrics, BEST, CONFIG_SNAPSHOT, HISTORY, LAST, REPORT};
pub use self::optim::Sgd;
pub use self::runner::{distill_student, distill_student_from, pretrain_teacher, pretrain_teacher_from, resume_run, TrainOutcome};
pub use self::schedule::{schedule_step, Action, TrainState, IMPROVEMENT_TOLERANCE};
