//! Body part-based person re-identification at desk scale.
//!
//! The crate covers the full pipeline: coarse human parsing labels derived
//! from body-region confidence fields ([`fields`]), a procedural occluded
//! person corpus with ground truth ([`synthgen`]), a small trainable model
//! with part attention and weighted pooling ([`net`]), the training losses
//! including the part-averaged batch-hard triplet ([`objectives`]),
//! visibility-gated part-to-part matching with CMC/mAP evaluation
//! ([`retrieval`]), and the training/ablation harness behind the `reidkit`
//! CLI ([`harness`]).

pub mod error;
pub mod fields;
pub mod harness;
pub mod net;
pub mod objectives;
pub mod retrieval;
pub mod synthgen;

pub use error::{Error, Result};
