//! Deterministic numeric kernels shared by the detector, losses and evaluator.
//!
//! Every function here is pure. Reductions run in a fixed serial order so that
//! repeated calls are bitwise identical regardless of how callers parallelise.

mod anchors;
mod boxes;
pub(crate) mod featurizer;
mod linalg;
mod roi;

pub use anchors::{generate_anchors, AnchorGrid};
pub use boxes::{decode_box, encode_box, iou, nms, BBox};
pub use featurizer::{fixed_featurizer, Featurizer, FeaturizerConfig};
pub use linalg::{
    cosine_logits, dot, linear_forward, log_softmax_row, norm, sigmoid, smooth_l1, smooth_l1_grad, softmax,
    softmax_row, COSINE_EPS,
};
pub use roi::roi_pool;
