//! Hierarchical attention network (H-vector) for weakly supervised
//! multi-speaker identification, with X-vector and attentive X-vector
//! baselines, synthetic Concat/Overlap data, training and EER evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod par;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
