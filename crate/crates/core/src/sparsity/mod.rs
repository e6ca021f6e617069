//! Store–reactivate sparsity over image tokens and object queries.

pub mod camera;
pub mod heads;
pub mod model;
pub mod pipeline;
pub mod queries;
pub mod relevance;
pub mod schedule;
pub mod stream;
pub mod training;

use thiserror::Error;

use crate::numeric::NumericError;

pub use camera::ToyCamera;
pub use model::{BlockKind, ModelConfig, ModelParams};
pub use pipeline::{run_frame, run_pipeline, run_scene, PipelineOptions, PipelineOutput, RunMode, SparsityTrace};
pub use queries::{init_queries, propagate_queries};
pub use relevance::{query_relevance, token_relevance, RelevanceHead, RelevanceKind, RelevanceScores};
pub use schedule::{layer_keep_ratio, training_keep_ratio, ScheduleConfig, StageSchedule};
pub use stream::{reactivate, select_and_store, QuerySet, StorageBuffer, TokenStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsityError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("keep count {k} exceeds the {n} available rows")]
    KTooLarge { k: usize, n: usize },
    #[error("top-k set is empty")]
    EmptyTopK,
    #[error("original index {0} appears twice")]
    IndexCollision(usize),
    #[error("index {index} breaks the active/buffer partition at layer {layer}")]
    ConservationViolated { layer: usize, index: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

impl From<SparsityError> for NumericError {
    fn from(e: SparsityError) -> Self {
        NumericError::InvalidArgument(e.to_string())
    }
}
