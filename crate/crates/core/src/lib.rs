//! Retentive R-CNN for generalized few-shot detection at desk scale.
//!
//! A frozen featurizer feeds a Faster R-CNN style detector whose linear heads
//! are trained in two stages: pretraining on abundant base-class data, then
//! finetuning on a balanced k-shot set with only three layers unfrozen. The
//! finetuned model keeps the pretrained heads intact and ensembles them with
//! the finetuned ones (max-combined objectness, dual classification heads
//! tied together by a consistency loss).

pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod ops;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use ops::BBox;
pub use synthgen::{ClassId, ClassSplit, Dataset, GroundTruth};
pub use tensor::Tensor;
