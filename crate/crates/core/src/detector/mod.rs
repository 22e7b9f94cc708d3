//! Model assembly and forward passes: the base detector, the ensembled
//! (bias-balanced) RPN, the dual-head re-detector and merged inference.

pub(crate) use model::closed_set;

mod checkpoint;
mod heads;
mod inference;
mod model;
pub mod params;
mod rpn;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_digest, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use heads::{head_deltas, head_logits, pad_base_logits, roi_features, roi_head_forward};
pub use inference::{DetectConfig, DetectOutput, Detection};
pub use model::{
    ArchConfig, ClassifierKind, HeadDomain, HeadKind, ImageFeatures, Model, ModelMeta, NovelHeadSpec, Stage,
    HEAD_INIT_STD,
};
pub use params::{layers, Param, ParamSet};
pub use rpn::{
    bias_balanced_objectness, model_proposals, objectness_logits, propose, rpn_deltas, rpn_forward,
    ProposalConfig, Proposals, RpnStrategy,
};
