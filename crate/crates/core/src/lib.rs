//! Part-aware prototype engine for few-shot semantic segmentation.
//!
//! The engine works on precomputed feature grids. Per episode it clusters the
//! labeled support features of every class into part prototypes, adds
//! class-level context, refines the parts with regions pooled from unlabeled
//! grids, and labels query cells by their best-matching part.

pub mod archive;
pub mod clustering;
pub mod episode;
pub mod error;
pub mod eval;
pub mod matcher;
pub mod metrics;
pub mod npy;
pub mod pipeline;
pub mod prototype;
pub mod refine;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;

pub use episode::{Episode, HyperParams, LabeledImage};
pub use error::{Error, Result};
pub use pipeline::{predict_episode, EpisodeForward};
pub use prototype::{PrototypeSet, Stage};
pub use refine::MessageWeights;
pub use tensor::{cosine_similarity, FeatureGrid, LabelGrid, ScoreStack, IGNORE};
