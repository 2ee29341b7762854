//! Crowd-guided keyword expansion and keyword-aware text classification.
//!
//! A small sample of training texts is annotated with keywords (by people
//! through the annotation service, or by a simulated annotator), the seed
//! keywords are expanded to whole clusters of the embedding space, and the
//! expanded set guides two classifiers: an attention GRU whose loss rewards
//! attention on keywords, and a hybrid network with a dedicated keyword
//! branch.

pub mod annotation;
pub mod autodiff;
pub mod clustering;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod kea;
pub mod models;
pub mod pipeline;
pub mod synthetic;
pub mod trainer;

pub use annotation::{AnnotationRecord, AnnotationService, AnnotationTask, Oracle, Progress};
pub use clustering::{ClusterAssignment, ClusterConfig, ClusterMethod};
pub use corpus::{Corpus, Document, Split, TokenId, Vocabulary};
pub use embeddings::EmbeddingTable;
pub use error::{Error, Result};
pub use kea::{KeywordSets, Provenance};
pub use models::{Example, Model, ModelKind};
pub use pipeline::{Manifest, PipelineConfig, Stage, StageStatus};
pub use trainer::{Ablation, TrainConfig, TrainReport};
