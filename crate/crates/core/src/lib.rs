//! Incremental online domain-adaptive batch normalization.
//!
//! A small convolutional activity-recognition network whose fully
//! connected block normalizes each source user with that user's own batch
//! statistics during training, and which adapts its normalization
//! statistics to an unseen user one window at a time while streaming.
//!
//! * [`bn`] holds the statistics mathematics.
//! * [`model`] the network, its training loop and checkpoint format.
//! * [`data`] CSV ingest, preprocessing, windowing, batching and the
//!   synthetic covariate-shift generator.
//! * [`online`] the streaming adapter.
//! * [`eval`] leave-one-person-out experiments and summaries.

pub mod bn;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod online;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
