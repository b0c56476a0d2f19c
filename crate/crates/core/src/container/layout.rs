use std::collections::BTreeMap;

use super::{FormatError, CHECKSUM_FIELD_LEN, CHUNK_META_LEN, FILE_META_FIXED_LEN, FORMAT_VERSION, MAGIC};
use crate::block_tracker::DatasetId;
use crate::hashing::{hash_block, Digest, HashAlgorithm, MAX_DIGEST_LEN};

/// An immutable slice of the checkpoint file holding part of one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualContainer {
    pub dataset: DatasetId,
    /// Creation order within the dataset, starting at 0.
    pub index: u32,
    pub size: u64,
    /// Absolute offset of the payload (the ChunkMeta record sits just before).
    pub file_offset: u64,
}

impl VirtualContainer {
    pub fn meta_offset(&self) -> u64 {
        self.file_offset - CHUNK_META_LEN
    }

    pub fn end(&self) -> u64 {
        self.file_offset + self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkMeta {
    pub dataset: DatasetId,
    pub index: u32,
    /// Live bytes stored in the container as of the last commit.
    pub chunk_size: u64,
    pub container_size: u64,
    pub payload_checksum: Digest,
}

impl ChunkMeta {
    pub fn encode(&self) -> [u8; CHUNK_META_LEN as usize] {
        let mut out = [0u8; CHUNK_META_LEN as usize];
        out[0..8].copy_from_slice(&self.dataset.0.to_le_bytes());
        out[8..12].copy_from_slice(&self.index.to_le_bytes());
        out[16..24].copy_from_slice(&self.chunk_size.to_le_bytes());
        out[24..32].copy_from_slice(&self.container_size.to_le_bytes());
        out[32..48].copy_from_slice(&self.payload_checksum.padded());
        out
    }

    pub fn decode(bytes: &[u8; CHUNK_META_LEN as usize], algorithm: HashAlgorithm) -> Self {
        ChunkMeta {
            dataset: DatasetId(le_u64(&bytes[0..8])),
            index: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            chunk_size: le_u64(&bytes[16..24]),
            container_size: le_u64(&bytes[24..32]),
            payload_checksum: Digest::from_bytes(algorithm, &bytes[32..48]).expect("16-byte field"),
        }
    }
}

pub(super) fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileMeta {
    pub version: u32,
    pub block_size: u64,
    pub algorithm: HashAlgorithm,
    pub checkpoint_id: u64,
    /// `(dataset, committed size)` in table order.
    pub datasets: Vec<(DatasetId, u64)>,
}

impl FileMeta {
    pub fn encoded_len(&self) -> u64 {
        Self::encoded_len_for(self.datasets.len())
    }

    pub fn encoded_len_for(dataset_count: usize) -> u64 {
        FILE_META_FIXED_LEN + 16 * dataset_count as u64 + CHECKSUM_FIELD_LEN
    }

    /// Header bytes up to (not including) the checksum field.
    pub(super) fn encode_body(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len() as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&[0u8; 4]);
        out.extend_from_slice(&self.block_size.to_le_bytes());
        out.push(self.algorithm.tag());
        out.extend_from_slice(&[0u8; 7]);
        out.extend_from_slice(&self.checkpoint_id.to_le_bytes());
        out.extend_from_slice(&(self.datasets.len() as u64).to_le_bytes());
        for (id, size) in &self.datasets {
            out.extend_from_slice(&id.0.to_le_bytes());
            out.extend_from_slice(&size.to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutEntry {
    pub meta: ChunkMeta,
    pub container: VirtualContainer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileLayout {
    pub file_meta: FileMeta,
    /// In ascending file order.
    pub entries: Vec<LayoutEntry>,
}

impl FileLayout {
    pub fn algorithm(&self) -> HashAlgorithm {
        self.file_meta.algorithm
    }

    pub fn file_len(&self) -> u64 {
        self.entries
            .last()
            .map_or(self.file_meta.encoded_len(), |e| e.container.end())
    }

    pub fn committed_size(&self, dataset: DatasetId) -> Option<u64> {
        self.file_meta.datasets.iter().find(|(id, _)| *id == dataset).map(|&(_, s)| s)
    }

    /// Containers of one dataset in creation order.
    pub fn containers(&self, dataset: DatasetId) -> impl Iterator<Item = &LayoutEntry> {
        let mut v: Vec<&LayoutEntry> = self.entries.iter().filter(|e| e.container.dataset == dataset).collect();
        v.sort_by_key(|e| e.container.index);
        v.into_iter()
    }

    pub fn capacity(&self, dataset: DatasetId) -> u64 {
        self.containers(dataset).map(|e| e.container.size).sum()
    }

    /// Full header including the metadata checksum.
    pub fn encode_file_meta(&self) -> Vec<u8> {
        let mut out = self.file_meta.encode_body();
        out.extend_from_slice(&self.meta_checksum().padded());
        out
    }

    pub fn meta_checksum(&self) -> Digest {
        let mut bytes = self.file_meta.encode_body();
        for e in &self.entries {
            bytes.extend_from_slice(&e.meta.encode());
        }
        hash_block(self.file_meta.algorithm, &bytes)
    }

    /// True when every container of `previous` is present here unchanged.
    pub fn preserves(&self, previous: &FileLayout) -> bool {
        previous.entries.iter().all(|old| {
            self.entries
                .iter()
                .any(|new| new.container == old.container)
        })
    }

    /// Structural invariants: contiguous container indices, non-overlapping
    /// ascending extents, chunk sizes within container sizes and summing to
    /// the committed size.
    pub fn validate(&self) -> Result<(), FormatError> {
        let bad = |msg: String| Err(FormatError::Inconsistent(msg));
        let mut cursor = self.file_meta.encoded_len();
        for e in &self.entries {
            if e.container.meta_offset() != cursor {
                return bad(format!(
                    "container {} of dataset {} at offset {} but expected {}",
                    e.container.index,
                    e.container.dataset,
                    e.container.meta_offset(),
                    cursor
                ));
            }
            if e.meta.dataset != e.container.dataset
                || e.meta.index != e.container.index
                || e.meta.container_size != e.container.size
            {
                return bad("chunk metadata disagrees with container".into());
            }
            if e.meta.chunk_size > e.meta.container_size {
                return bad(format!("chunk size exceeds container size in dataset {}", e.meta.dataset));
            }
            if e.meta.payload_checksum.algorithm() != self.file_meta.algorithm {
                return bad("payload checksum algorithm differs from file algorithm".into());
            }
            cursor = e.container.end();
        }
        let mut seen = BTreeMap::new();
        for &(id, committed) in &self.file_meta.datasets {
            if seen.insert(id, ()).is_some() {
                return bad(format!("dataset {id} listed twice"));
            }
            let mut live = 0;
            for (expected, e) in self.containers(id).enumerate() {
                if e.container.index as usize != expected {
                    return bad(format!("dataset {id} container indices are not contiguous"));
                }
                live += e.meta.chunk_size;
            }
            if live != committed {
                return bad(format!("dataset {id}: chunks hold {live} bytes, committed size is {committed}"));
            }
        }
        if let Some(e) = self.entries.iter().find(|e| !seen.contains_key(&e.container.dataset)) {
            return bad(format!("container for unlisted dataset {}", e.container.dataset));
        }
        Ok(())
    }
}

fn placeholder_checksum(algorithm: HashAlgorithm) -> Digest {
    Digest::from_bytes(algorithm, &[0u8; MAX_DIGEST_LEN]).unwrap()
}

/// Plans the container layout for the given `(dataset, current size)` set.
///
/// Without a previous layout, or when the set gained datasets (which grows
/// the header and would move every container), a fresh compact layout with
/// one container per dataset is produced. Otherwise existing containers are
/// carried over unchanged and a dataset that outgrew its capacity gets one
/// new container with the excess, appended at the file tail. Chunk sizes are
/// set to the live prefix of each container; payload checksums are
/// placeholders until the file is written.
pub fn plan_layout(
    previous: Option<&FileLayout>,
    datasets: &[(DatasetId, u64)],
    block_size: u64,
    algorithm: HashAlgorithm,
    checkpoint_id: u64,
) -> Result<FileLayout, FormatError> {
    let mut sorted: Vec<(DatasetId, u64)> = datasets.to_vec();
    sorted.sort_by_key(|&(id, _)| id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(FormatError::Inconsistent(format!("dataset {} given twice", w[0].0)));
    }

    let file_meta = FileMeta {
        version: FORMAT_VERSION,
        block_size,
        algorithm,
        checkpoint_id,
        datasets: sorted.clone(),
    };

    let reuse = match previous {
        Some(prev) => {
            for &(id, _) in &prev.file_meta.datasets {
                if sorted.binary_search_by_key(&id, |&(i, _)| i).is_err() {
                    return Err(FormatError::DatasetDropped(id));
                }
            }
            (prev.file_meta.datasets.len() == sorted.len() && prev.algorithm() == algorithm).then_some(prev)
        }
        None => None,
    };

    let mut containers: Vec<VirtualContainer> = Vec::new();
    let mut tail = file_meta.encoded_len();
    if let Some(prev) = reuse {
        containers.extend(prev.entries.iter().map(|e| e.container));
        tail = prev.file_len();
    }
    for &(id, size) in &sorted {
        let capacity: u64 = containers.iter().filter(|c| c.dataset == id).map(|c| c.size).sum();
        let count = containers.iter().filter(|c| c.dataset == id).count() as u32;
        if size > capacity || (count == 0 && reuse.is_none()) {
            let c = VirtualContainer {
                dataset: id,
                index: count,
                size: size - capacity,
                file_offset: tail + CHUNK_META_LEN,
            };
            tail = c.end();
            containers.push(c);
        }
    }

    let mut logical_start: BTreeMap<DatasetId, u64> = BTreeMap::new();
    let mut by_dataset: Vec<VirtualContainer> = containers.clone();
    by_dataset.sort_by_key(|c| (c.dataset, c.index));
    let mut live = BTreeMap::new();
    for c in &by_dataset {
        let start = logical_start.entry(c.dataset).or_insert(0);
        let size = sorted[sorted.binary_search_by_key(&c.dataset, |&(i, _)| i).unwrap()].1;
        live.insert((c.dataset, c.index), size.saturating_sub(*start).min(c.size));
        *start += c.size;
    }

    let entries = containers
        .into_iter()
        .map(|c| LayoutEntry {
            meta: ChunkMeta {
                dataset: c.dataset,
                index: c.index,
                chunk_size: live[&(c.dataset, c.index)],
                container_size: c.size,
                payload_checksum: reuse
                    .and_then(|p| p.entries.iter().find(|e| e.container == c))
                    .map_or(placeholder_checksum(algorithm), |e| e.meta.payload_checksum),
            },
            container: c,
        })
        .collect();
    Ok(FileLayout { file_meta, entries })
}

/// Maps a logical byte range of a dataset onto `(file_offset, len)` extents,
/// split at container boundaries, in logical order.
pub fn logical_to_physical(
    layout: &FileLayout,
    dataset: DatasetId,
    offset: u64,
    len: u64,
) -> Result<Vec<(u64, u64)>, FormatError> {
    let mut containers = layout.containers(dataset).peekable();
    if containers.peek().is_none() && layout.committed_size(dataset).is_none() {
        return Err(FormatError::UnknownDataset(dataset));
    }
    let capacity = layout.capacity(dataset);
    if offset.checked_add(len).is_none_or(|end| end > capacity) {
        return Err(FormatError::Capacity { dataset, offset, len, capacity });
    }
    let mut out = Vec::new();
    let end = offset + len;
    let mut start = 0u64;
    for e in containers {
        let c_end = start + e.container.size;
        let lo = offset.max(start);
        let hi = end.min(c_end);
        if lo < hi {
            out.push((e.container.file_offset + (lo - start), hi - lo));
        }
        start = c_end;
        if start >= end {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALG: HashAlgorithm = HashAlgorithm::Crc32;
    const A: DatasetId = DatasetId(1);

    fn plan(prev: Option<&FileLayout>, sizes: &[(u64, u64)]) -> FileLayout {
        let ds: Vec<_> = sizes.iter().map(|&(i, s)| (DatasetId(i), s)).collect();
        plan_layout(prev, &ds, 16, ALG, 1).unwrap()
    }

    fn sizes(l: &FileLayout, id: DatasetId) -> Vec<u64> {
        l.containers(id).map(|e| e.container.size).collect()
    }

    #[test]
    fn first_checkpoint_one_container_per_dataset() {
        let l = plan(None, &[(1, 100), (2, 0)]);
        assert_eq!(sizes(&l, A), vec![100]);
        assert_eq!(sizes(&l, DatasetId(2)), vec![0]);
        let header = FileMeta::encoded_len_for(2);
        assert_eq!(l.entries[0].container.file_offset, header + 64);
        assert_eq!(l.entries[1].container.meta_offset(), header + 64 + 100);
        l.validate().unwrap_or_else(|e| panic!("{e}"));
    }

    #[test]
    fn growth_appends_excess_container_at_tail() {
        let l0 = plan(None, &[(1, 100), (2, 50)]);
        let l1 = plan(Some(&l0), &[(1, 130), (2, 50)]);
        assert_eq!(sizes(&l1, A), vec![100, 30]);
        let c1 = l1.containers(A).nth(1).unwrap().container;
        assert_eq!(c1.meta_offset(), l0.file_len());
        assert!(l1.preserves(&l0));
        assert_eq!(l1.entries.last().unwrap().container, c1);
    }

    #[test]
    fn shrink_keeps_containers() {
        let l0 = plan(None, &[(1, 100)]);
        let l1 = plan(Some(&l0), &[(1, 130)]);
        let l2 = plan(Some(&l1), &[(1, 80)]);
        assert_eq!(sizes(&l2, A), vec![100, 30]);
        let chunks: Vec<u64> = l2.containers(A).map(|e| e.meta.chunk_size).collect();
        assert_eq!(chunks, vec![80, 0]);
        assert_eq!(l2.file_meta.datasets, vec![(A, 80)]);
        assert!(l2.preserves(&l1));
    }

    #[test]
    fn dropping_a_dataset_is_an_error() {
        let l0 = plan(None, &[(1, 10), (2, 10)]);
        let r = plan_layout(Some(&l0), &[(A, 10)], 16, ALG, 2);
        assert!(matches!(r, Err(FormatError::DatasetDropped(DatasetId(2)))));
    }

    #[test]
    fn new_dataset_relocates() {
        let l0 = plan(None, &[(1, 10)]);
        let l1 = plan(Some(&l0), &[(1, 10), (2, 5)]);
        assert!(!l1.preserves(&l0));
        l1.validate().unwrap();
    }

    #[test]
    fn mapping_examples() {
        let l0 = plan(None, &[(1, 100)]);
        let l = plan(Some(&l0), &[(1, 130)]);
        let c0 = l.containers(A).next().unwrap().container.file_offset;
        let c1 = l.containers(A).nth(1).unwrap().container.file_offset;
        assert_eq!(logical_to_physical(&l, A, 0, 100).unwrap(), vec![(c0, 100)]);
        assert_eq!(logical_to_physical(&l, A, 90, 20).unwrap(), vec![(c0 + 90, 10), (c1, 10)]);
        assert_eq!(logical_to_physical(&l, A, 100, 30).unwrap(), vec![(c1, 30)]);
        assert!(matches!(logical_to_physical(&l, A, 100, 31), Err(FormatError::Capacity { .. })));
        assert!(matches!(
            logical_to_physical(&l, DatasetId(9), 0, 1),
            Err(FormatError::UnknownDataset(_))
        ));
    }

    #[test]
    fn chunk_meta_codec() {
        let m = ChunkMeta {
            dataset: DatasetId(0xdead),
            index: 3,
            chunk_size: 77,
            container_size: 99,
            payload_checksum: hash_block(HashAlgorithm::Md5, b"x"),
        };
        let enc = m.encode();
        assert_eq!(&enc[48..], &[0u8; 16]);
        assert_eq!(ChunkMeta::decode(&enc, HashAlgorithm::Md5), m);
    }
}
