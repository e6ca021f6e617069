//! Dense numeric kernels in double precision.

pub mod attention;
pub mod encoding;
pub mod gradcheck;
pub mod gumbel;
pub mod mlp;
pub mod sampling;
pub mod tensor;
pub mod weights;

use thiserror::Error;

pub use attention::{attention, grouped_attention, windowed_attention, AttentionTrace};
pub use encoding::positional_encoding;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use gumbel::{gumbel_topk, GumbelTopk, GumbelTopkConfig, TopkMode};
pub use mlp::{gelu, Linear, Mlp};
pub use sampling::{bilinear_sample, deformable_cross_attention, DeformableParams, FeatureMap, Footprint};
pub use tensor::{mac_count, reset_mac_count, sigmoid, softmax, with_mac_count, Tensor2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("k = {k} exceeds the {n} available items")]
    KTooLarge { k: usize, n: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("weight file: {0}")]
    Io(String),
}
