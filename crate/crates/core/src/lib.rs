//! Detection of age-inappropriate comments on children's videos.
//!
//! Five per-category binary networks score each comment from pooled word
//! embeddings; their OR forms the verdict. Around the models sit loaders,
//! threshold calibration, evaluation and exposure analytics.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the pipeline uses.

pub mod corpus;
pub mod embed;
pub mod ensemble;
pub mod error;
pub mod measure;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod synthetic;
pub mod text;

pub use corpus::{AgeBins, AgeGroup, Category, Comment, Format, LabelVector, LabeledComment, VideoMeta};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model = nn::MlpModel<f64>;
pub type Model32 = nn::MlpModel<f32>;
pub type Table = embed::EmbeddingTable<f64>;
pub type Table32 = embed::EmbeddingTable<f32>;
pub type Ensemble = ensemble::EnsembleSpec<f64>;
pub type Ensemble32 = ensemble::EnsembleSpec<f32>;
