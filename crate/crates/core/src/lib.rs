//! Differential checkpointing with hash-block change detection.
//!
//! Protected memory is split into fixed-size hash blocks. At each checkpoint
//! only blocks whose digest changed (or that have never been written) are
//! copied into a duplicate of the previous checkpoint file, which is then
//! committed with an atomic rename. See [`Engine`] for the entry point.

pub mod block_tracker;
pub mod container;
pub mod cost_model;
pub mod engine;
pub mod hashing;
pub mod bench;
pub mod scalar;

pub use block_tracker::{DatasetDescriptor, DatasetId, DirtyRegion, HashBlockMeta};
pub use container::{FileLayout, FormatError};
pub use engine::{
    DatasetStats,
    shared_region, CheckpointKind, CheckpointMeta, Engine, EngineConfig, EngineError, RecoveryReport, SharedRegion,
};
pub use hashing::{hash_block, Digest, HashAlgorithm};
pub use scalar::Real;

pub type CostModel = cost_model::CostModelParams<f64>;
pub type CostModelF32 = cost_model::CostModelParams<f32>;
pub type Corrections = cost_model::CorrectionTerms<f64>;
