//! Joint training of both heads, gradient suppression, descriptor
//! teachers and the intermediate-feature probe.

mod loss;
mod optim;
mod probe;
mod teacher;
mod trainer;

pub use loss::{match_loss, spoof_loss, total_loss, LossWeights, SuppressionFlags};
pub use optim::{Adam, PlateauScheduler};
pub use probe::{train_probe, ProbeConfig, ProbeHead, ProbeResult};
pub use teacher::{FileTeacher, PseudoTeacher, TeacherOracle};
pub use trainer::{
    backward_step, evaluate_losses, loss_and_gradients, new_optimizer, train_joint, train_joint_with_progress,
    EpochRecord, Gradients, LossBreakdown, PatchSet, Sample, StopReason, TrainConfig, TrainHistory,
};
