//! Training objectives and their gradients.

pub mod consistency;
mod fdcheck;
mod grad;
mod supervised;

pub use consistency::{consistency_loss, consistency_row, ConsistencyVariant, MARGINAL_FLOOR};
pub use fdcheck::{finite_difference_check, FdReport};
pub use grad::{
    compute_gradients, minibatch_loss, AnchorSample, GradientSet, LossConfig, Minibatch, RoiSample, TrainStage,
};
pub use supervised::{
    supervised_detection_losses, total_finetune_loss, LossBreakdown, SupervisedInputs, SupervisedLosses,
};
