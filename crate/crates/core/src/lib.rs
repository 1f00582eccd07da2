//! Open-vocabulary object recognition: mask localization, region and category
//! embeddings, an optional z-score + SVD latent projection, cosine/softmax
//! matching and detection-style evaluation.

pub mod align_mlp;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod matcher;
pub mod overlay;
pub mod ovt;
pub mod pipeline;
pub mod prompts;
pub mod regions;
pub mod shared_space;
pub mod synthetic;

pub use align_mlp::{Distance, MlpDims, MlpParams, TrainConfig, TrainSample};
pub use config::{EncoderKind, Overrides, RunConfig, SvdScope};
pub use encoders::{Embedding, Encoder, FeatureMap, RegionKey};
pub use error::{Error, Result};
pub use eval::{Detection, GroundTruth, MatchMode, Metrics, SomethingElsePolicy};
pub use matcher::{Prediction, PredictionLine, Similarity};
pub use ovt::Tensor;
pub use prompts::{CategorySpec, CategoryTable, PhraseMode};
pub use regions::{BBox, Connectivity, LabelMask, Region};
