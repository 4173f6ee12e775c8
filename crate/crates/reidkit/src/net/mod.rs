//! The trainable model: a small convolutional backbone, the pixel-wise part
//! classifier, attention-weighted pooling into holistic and part embeddings,
//! and per-part visibility scores.

pub mod checkpoint;
pub mod layers;
pub mod model;
mod ops;

pub use model::{
    BatchEmbeddings, Heads, IdentityHead, Model, ModelConfig, ModelOutput, PoolGrads, TrainForward,
};
pub use ops::{
    classify_pixels, foreground_map, gwap, pool_embeddings, visibility, PooledEmbeddings,
    GWAP_DENOM_GUARD,
};
