//! Matching camera frames of projected presentations to the originating
//! slide images, following a boosted siamese training scheme.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense tensors with reverse-mode autodiff, Adam, He init
//! * [`model`] — feature-extraction (FEN) and similarity-discrimination
//!   (SDN) networks, hinge losses, pair scoring
//! * [`boosting`] — persistent sample weights and the boosting round driver
//! * [`loader`] — balanced, weight-biased batch construction with
//!   prefetching
//! * [`synth`] — procedural slides and corrupted query generation
//!   (projective warps + block noise)
//! * [`quality`] — legibility scoring of corrupted queries and decile
//!   binning
//! * [`eval`] — retrieval ranking and stratified hit-rate reports
//! * [`dataset`] — on-disk corpus layout (manifest + PNG images)
//! * [`checkpoint`] — binary model checkpoints
//! * [`pipeline`] — end-to-end training driver tying it all together

pub mod boosting;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loader;
pub mod model;
pub mod pipeline;
pub mod quality;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
