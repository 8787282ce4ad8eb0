//! Cross-modal shape retrieval.
//!
//! Point clouds and per-view image features are embedded onto a shared unit
//! hypersphere by two small encoders, trained with a symmetric InfoNCE
//! objective or a hard contrastive variant that reweights in-batch negatives
//! with a von Mises-Fisher kernel around each anchor. Shapes are then
//! retrieved for image queries by exact cosine k-NN.

pub mod datasets;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod index;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod trainer;

pub use encoders::{Embedding, EncoderDims, EncoderParams, Gradients};
pub use error::{Error, Result};
