//! Receptive-field-block detection at desk scale.
//!
//! A from-scratch dense-tensor engine with reverse-mode differentiation, the
//! multi-branch dilated blocks built on it, an SSD-style detection head, a
//! synthetic-scene dataset generator, the SGD training schedule, effective
//! receptive field analysis, and VOC-style evaluation.

pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ConvParams, Graph, NodeId, PoolKind, Scalar, Shape, Tensor};
