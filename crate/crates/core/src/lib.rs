//! Compact image-descriptor toolkit: embedding storage, PCA reduction,
//! descriptor pipelines, exact top-k retrieval, mean Precision@k, weight
//! averaging of checkpoints and a sub-center ArcFace trainer.
//!
//! Numeric kernels are generic over [`Real`] (`f32` / `f64`); the aliases
//! below pin the precision used by the file formats and pipelines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding_store;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod matrix;
pub mod metric_learning;
pub mod pca;
pub mod pipeline;
pub mod retrieval;
pub mod scalar;
pub mod soup;
pub mod synthetic;

pub use embedding_store::{inspect_embeddings, read_embeddings, validate, write_embeddings, EmbeddingSet, Violation};
pub use error::{Error, Result};
pub use eval::{mean_precision_at_k, per_query_precision, GroundTruth};
pub use pipeline::{apply_pipeline, build_pipeline, DescriptorPipeline, PipelineSpec, Stage};
pub use retrieval::{build_index, search, search_reference, RankedResult, RetrievalIndex, SearchOptions};
pub use scalar::Real;
pub use soup::{read_checkpoint, soup_uniform, write_checkpoint, Checkpoint, TensorEntry};

/// PCA model as stored and applied by pipelines.
pub type Pca = pca::PcaModel<f64>;
pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type Head = metric_learning::ArcFaceHead<f64>;
