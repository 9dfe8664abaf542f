//! Dense tensors with a reverse-mode tape and the layer set used by the
//! segmentation network.

mod adam;
mod graph;
mod kernels;
mod params;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, adam_step_store, AdamConfig, AdamState};
pub use graph::{BatchStats, Graph, NodeId};
pub use params::{ParamEntry, ParamStore, CHECKPOINT_MAGIC};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch norm over an empty batch")]
    EmptyBatch,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph")]
    AlreadyBackpropagated,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
