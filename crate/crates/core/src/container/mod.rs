//! Checkpoint file layout.
//!
//! Every dataset owns one or more immutable virtual containers. A container is
//! created with a fixed size at a fixed file offset and never moves; when a
//! dataset outgrows its containers a new one holding the excess is appended
//! at the tail of the file. A dataset's containers, taken in creation order,
//! form one contiguous logical address range that is filled linearly.
//!
//! On-disk format (all integers little-endian):
//!
//! ```text
//! FileMeta   magic[8] "DCPKT\0\0\x01" | version u32 | pad u32 | block_size u64
//!            | alg u8 | pad[7] | checkpoint_id u64 | dataset_count u64
//!            | dataset_count x (dataset_id u64, committed_size u64)
//!            | meta_checksum[16]
//! entry*     ChunkMeta[64]: dataset_id u64 | container_index u32 | pad u32
//!            | chunk_size u64 | container_size u64 | payload_checksum[16]
//!            | reserved[16]
//!            payload[container_size]
//! ```
//!
//! `meta_checksum` covers the FileMeta bytes before it followed by every
//! ChunkMeta record in file order. `payload_checksum` covers the first
//! `chunk_size` payload bytes. Both use the file's hash algorithm and are
//! zero-padded to 16 bytes.

mod io;
mod layout;

pub use io::{inspect_file, read_dataset, read_layout, write_layout, Inspection, LayoutSource};
pub use layout::{
    logical_to_physical, plan_layout, ChunkMeta, FileLayout, FileMeta, LayoutEntry, VirtualContainer,
};

use crate::block_tracker::DatasetId;

pub const MAGIC: [u8; 8] = *b"DCPKT\0\0\x01";
pub const FORMAT_VERSION: u32 = 1;
pub const CHUNK_META_LEN: u64 = 64;
/// Fixed part of FileMeta before the dataset table.
pub const FILE_META_FIXED_LEN: u64 = 48;
pub const CHECKSUM_FIELD_LEN: u64 = 16;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown hash algorithm tag {0}")]
    UnknownAlgorithm(u8),
    #[error("metadata checksum mismatch")]
    MetaChecksum,
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("payload checksum mismatch in container {index} of dataset {dataset}")]
    PayloadChecksum { dataset: DatasetId, index: u32 },
    #[error("inconsistent layout: {0}")]
    Inconsistent(String),
    #[error("dataset {0} is not present in the layout")]
    UnknownDataset(DatasetId),
    #[error("range {offset}+{len} exceeds the {capacity} bytes of container capacity of dataset {dataset}")]
    Capacity { dataset: DatasetId, offset: u64, len: u64, capacity: u64 },
    #[error("dataset {0} disappeared from the protected set")]
    DatasetDropped(DatasetId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
