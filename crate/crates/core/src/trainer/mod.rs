//! Two-stage training: base pretraining, then k-shot finetuning of three
//! layers.

mod assign;
mod config;
mod log;
mod run;
mod sgd;

pub use assign::{assign_targets, AssignMode, Assignment, TargetLabel};
pub use config::{Convergence, IouThresholds, RoiSampling, RpnSampling, TrainConfig};
pub use log::{StopReason, TrainLog, TrainRecord};
pub use run::{build_minibatch, dataset_features, finetune, pretrain, sample_image, TrainOutcome};
pub use sgd::{sgd_step, Velocity};
