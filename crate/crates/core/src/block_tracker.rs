//! Per-dataset block partitioning and hash metadata.
//!
//! A dataset of `size` bytes is split into `ceil(size / b)` blocks; the last
//! one may be shorter and is hashed over its actual length. Each block carries
//! a valid flag (it has a representation in the checkpoint file), a dirty
//! flag (scratch state set during detection) and the digest recorded at the
//! last successful commit.

use std::ops::Range;

use rayon::prelude::*;

use crate::hashing::{hash_block, Digest, HashAlgorithm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DatasetId(pub u64);

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HashBlockMeta {
    pub valid: bool,
    pub dirty: bool,
    /// Only meaningful while `valid` is set.
    pub digest: Option<Digest>,
}

impl HashBlockMeta {
    fn needs_write(&self) -> bool {
        !self.valid || self.dirty
    }
}

/// A run of adjacent dirty or invalid blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirtyRegion {
    pub dataset: DatasetId,
    pub offset: usize,
    pub len: usize,
}

impl DirtyRegion {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrackerError {
    #[error("dataset {dataset}: cursor {cursor} outside 0..={blocks}")]
    Cursor { dataset: DatasetId, cursor: usize, blocks: usize },
    #[error("dataset {dataset}: data view has {actual} bytes, descriptor expects {expected}")]
    DataLength { dataset: DatasetId, expected: usize, actual: usize },
}

#[derive(Debug, Clone)]
pub struct DatasetDescriptor {
    id: DatasetId,
    size: usize,
    block_size: usize,
    algorithm: HashAlgorithm,
    blocks: Vec<HashBlockMeta>,
    committed_size: usize,
}

impl DatasetDescriptor {
    /// An empty dataset. `block_size` must be positive.
    pub fn new(id: DatasetId, block_size: usize, algorithm: HashAlgorithm) -> Self {
        assert!(block_size > 0, "block size must be positive");
        DatasetDescriptor {
            id,
            size: 0,
            block_size,
            algorithm,
            blocks: Vec::new(),
            committed_size: 0,
        }
    }

    pub fn id(&self) -> DatasetId {
        self.id
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn committed_size(&self) -> usize {
        self.committed_size
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn algorithm(&self) -> HashAlgorithm {
        self.algorithm
    }

    pub fn blocks(&self) -> &[HashBlockMeta] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_range(&self, index: usize) -> Range<usize> {
        let start = index * self.block_size;
        start..(start + self.block_size).min(self.size)
    }

    /// Bytes of hash metadata: digest plus two flag bytes per block.
    pub fn metadata_bytes(&self) -> usize {
        self.blocks.len() * (self.algorithm.digest_len() + 2)
    }

    /// Resizes the dataset. Blocks whose extent is not fully inside the last
    /// committed size become invalid; digests are not computed here.
    pub fn register_blocks(&mut self, new_size: usize) {
        let count = new_size.div_ceil(self.block_size);
        self.blocks.resize(count, HashBlockMeta::default());
        self.size = new_size;
        let first_uncovered = self.committed_size / self.block_size;
        for i in first_uncovered..count {
            if self.block_range(i).end > self.committed_size {
                self.blocks[i] = HashBlockMeta::default();
            }
        }
    }

    /// Marks every block invalid so the next update rewrites and rehashes all
    /// of them.
    pub fn invalidate_all(&mut self) {
        self.blocks.fill(HashBlockMeta::default());
    }

    /// Drops dirty flags after an abandoned update; the stored digests still
    /// describe the committed file.
    pub fn clear_dirty(&mut self) {
        for m in &mut self.blocks {
            m.dirty = false;
        }
    }

    fn check_len(&self, data: &[u8]) -> Result<(), TrackerError> {
        if data.len() != self.size {
            return Err(TrackerError::DataLength {
                dataset: self.id,
                expected: self.size,
                actual: data.len(),
            });
        }
        Ok(())
    }

    /// Whether block `index` must be written: invalid, or its current digest
    /// differs from the committed one. Does not touch flags.
    pub fn block_differs(&self, data: &[u8], index: usize) -> bool {
        let meta = &self.blocks[index];
        match (meta.valid, meta.digest) {
            (true, Some(stored)) => hash_block(self.algorithm, &data[self.block_range(index)]) != stored,
            _ => true,
        }
    }

    /// Returns the next maximal run of dirty/invalid blocks at or after
    /// `cursor`, together with the block index one past the run.
    ///
    /// Dirty flags of the blocks in the run are set. Stored digests are left
    /// alone until [`commit_hashes`](Self::commit_hashes).
    pub fn next_dirty_region(
        &mut self,
        data: &[u8],
        cursor: usize,
    ) -> Result<Option<(DirtyRegion, usize)>, TrackerError> {
        self.check_len(data)?;
        let n = self.blocks.len();
        if cursor > n {
            return Err(TrackerError::Cursor { dataset: self.id, cursor, blocks: n });
        }
        let mut i = cursor;
        while i < n && !self.mark(data, i) {
            i += 1;
        }
        if i == n {
            return Ok(None);
        }
        let first = i;
        i += 1;
        while i < n && self.mark(data, i) {
            i += 1;
        }
        let offset = first * self.block_size;
        let region = DirtyRegion {
            dataset: self.id,
            offset,
            len: self.block_range(i - 1).end - offset,
        };
        Ok(Some((region, i)))
    }

    fn mark(&mut self, data: &[u8], index: usize) -> bool {
        let differs = self.block_differs(data, index);
        if self.blocks[index].valid {
            self.blocks[index].dirty = differs;
        }
        differs
    }

    /// Full scan producing every dirty region in ascending order. Blocks are
    /// hashed in parallel; the result equals draining
    /// [`next_dirty_region`](Self::next_dirty_region) from cursor 0.
    pub fn scan_dirty_regions(&mut self, data: &[u8]) -> Result<Vec<DirtyRegion>, TrackerError> {
        self.check_len(data)?;
        let this = &*self;
        let flags: Vec<bool> = (0..self.blocks.len())
            .into_par_iter()
            .with_min_len(64)
            .map(|i| this.block_differs(data, i))
            .collect();

        let mut regions = Vec::new();
        let mut run_start: Option<usize> = None;
        for (i, &differs) in flags.iter().enumerate() {
            if self.blocks[i].valid {
                self.blocks[i].dirty = differs;
            }
            if differs {
                run_start.get_or_insert(i);
            } else if let Some(start) = run_start.take() {
                regions.push(self.region_for(start, i));
            }
        }
        if let Some(start) = run_start {
            regions.push(self.region_for(start, flags.len()));
        }
        Ok(regions)
    }

    fn region_for(&self, first: usize, end_block: usize) -> DirtyRegion {
        let offset = first * self.block_size;
        DirtyRegion {
            dataset: self.id,
            offset,
            len: self.block_range(end_block - 1).end - offset,
        }
    }

    /// Number of blocks that are invalid or whose content changed.
    pub fn count_dirty(&self, data: &[u8]) -> Result<usize, TrackerError> {
        self.check_len(data)?;
        Ok((0..self.blocks.len())
            .into_par_iter()
            .with_min_len(64)
            .filter(|&i| self.block_differs(data, i))
            .count())
    }

    /// After a successful checkpoint: rehash every invalid or dirty block,
    /// mark it valid and clean, and record the committed size. Other blocks
    /// keep their digests.
    pub fn commit_hashes(&mut self, data: &[u8]) -> Result<(), TrackerError> {
        self.check_len(data)?;
        let alg = self.algorithm;
        let b = self.block_size;
        let size = self.size;
        self.blocks
            .par_iter_mut()
            .with_min_len(64)
            .enumerate()
            .filter(|(_, m)| m.needs_write())
            .for_each(|(i, m)| {
                let start = i * b;
                let end = (start + b).min(size);
                *m = HashBlockMeta {
                    valid: true,
                    dirty: false,
                    digest: Some(hash_block(alg, &data[start..end])),
                };
            });
        self.committed_size = self.size;
        Ok(())
    }
}

/// Fraction of dirty-or-invalid blocks across datasets, without touching
/// flags. Zero total blocks yields 0.
pub fn dirty_stats<'a, I>(datasets: I) -> Result<f64, TrackerError>
where
    I: IntoIterator<Item = (&'a DatasetDescriptor, &'a [u8])>,
{
    let mut dirty = 0usize;
    let mut total = 0usize;
    for (ds, data) in datasets {
        dirty += ds.count_dirty(data)?;
        total += ds.block_count();
    }
    Ok(if total == 0 { 0.0 } else { dirty as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    const B: usize = 32;

    fn ds(size: usize) -> DatasetDescriptor {
        let mut d = DatasetDescriptor::new(DatasetId(1), B, HashAlgorithm::Crc32);
        d.register_blocks(size);
        d
    }

    fn drain(d: &mut DatasetDescriptor, data: &[u8]) -> Vec<DirtyRegion> {
        let mut out = Vec::new();
        let mut cursor = 0;
        while let Some((r, next)) = d.next_dirty_region(data, cursor).unwrap() {
            out.push(r);
            cursor = next;
        }
        out
    }

    #[test]
    fn fresh_dataset_blocks_are_invalid() {
        let d = ds(100);
        assert_eq!(d.block_count(), 4);
        assert!(d.blocks().iter().all(|m| !m.valid && m.digest.is_none()));
        assert_eq!(d.block_range(3), 96..100);
    }

    #[test]
    fn growth_invalidates_uncovered_blocks_only() {
        let mut d = ds(64);
        let data = vec![7u8; 64];
        d.commit_hashes(&data).unwrap();
        let before = d.blocks()[..2].to_vec();
        d.register_blocks(100);
        assert_eq!(&d.blocks()[..2], &before[..]);
        assert!(!d.blocks()[2].valid && !d.blocks()[3].valid);
    }

    #[test]
    fn growth_invalidates_straddling_tail_block() {
        let mut d = ds(40);
        d.commit_hashes(&[1u8; 40]).unwrap();
        d.register_blocks(60);
        assert!(d.blocks()[0].valid);
        assert!(!d.blocks()[1].valid);
    }

    #[test]
    fn same_size_resize_keeps_flags() {
        let mut d = ds(100);
        d.commit_hashes(&[3u8; 100]).unwrap();
        let before = d.blocks().to_vec();
        d.register_blocks(100);
        assert_eq!(d.blocks(), &before[..]);
    }

    #[test]
    fn shrink_truncates_and_keeps_survivors() {
        let mut d = ds(128);
        d.commit_hashes(&[3u8; 128]).unwrap();
        d.register_blocks(70);
        assert_eq!(d.block_count(), 3);
        assert!(d.blocks().iter().all(|m| m.valid));
        d.register_blocks(0);
        assert_eq!(d.block_count(), 0);
    }

    #[test]
    fn first_checkpoint_is_one_region() {
        let mut d = ds(100);
        let data = vec![0u8; 100];
        assert_eq!(
            drain(&mut d, &data),
            vec![DirtyRegion { dataset: DatasetId(1), offset: 0, len: 100 }]
        );
    }

    #[test]
    fn single_modified_block() {
        let mut d = ds(10 * B);
        let mut data = vec![0u8; 10 * B];
        d.commit_hashes(&data).unwrap();
        data[4 * B + 5] ^= 0x40;
        let (r, next) = d.next_dirty_region(&data, 0).unwrap().unwrap();
        assert_eq!((r.offset, r.len, next), (4 * B, B, 5));
        assert!(d.blocks()[4].dirty);
        assert!(d.next_dirty_region(&data, 5).unwrap().is_none());
        // digests untouched until commit
        assert_eq!(d.blocks()[4].digest, Some(hash_block(HashAlgorithm::Crc32, &[0u8; B])));
    }

    #[test]
    fn commit_then_new_mutation() {
        let mut d = ds(10 * B);
        let mut data = vec![0u8; 10 * B];
        d.commit_hashes(&data).unwrap();
        data[4 * B] = 1;
        drain(&mut d, &data);
        d.commit_hashes(&data).unwrap();
        assert!(drain(&mut d, &data).is_empty());
        data[7 * B + 3] = 9;
        let regions = drain(&mut d, &data);
        assert_eq!(regions.len(), 1);
        assert_eq!((regions[0].offset, regions[0].len), (7 * B, B));
    }

    #[test]
    fn clean_commit_leaves_digests_bit_identical() {
        let mut d = ds(5 * B + 3);
        let data: Vec<u8> = (0..5 * B + 3).map(|i| i as u8).collect();
        d.commit_hashes(&data).unwrap();
        let before = d.blocks().to_vec();
        assert!(drain(&mut d, &data).is_empty());
        d.commit_hashes(&data).unwrap();
        assert_eq!(d.blocks(), &before[..]);
    }

    #[test]
    fn cursor_out_of_range_is_error() {
        let mut d = ds(64);
        let data = vec![0u8; 64];
        assert!(matches!(d.next_dirty_region(&data, 3), Err(TrackerError::Cursor { .. })));
        assert!(d.next_dirty_region(&data, 2).unwrap().is_none());
        assert!(matches!(d.next_dirty_region(&data[..10], 0), Err(TrackerError::DataLength { .. })));
    }

    #[test]
    fn dirty_fraction() {
        let mut d = ds(4 * B);
        let mut data = vec![0u8; 4 * B];
        assert_eq!(dirty_stats([(&d, &data[..])]).unwrap(), 1.0);
        d.commit_hashes(&data).unwrap();
        assert_eq!(dirty_stats([(&d, &data[..])]).unwrap(), 0.0);
        data[2 * B] = 1;
        assert_eq!(dirty_stats([(&d, &data[..])]).unwrap(), 0.25);
        assert!(d.blocks().iter().all(|m| !m.dirty));
        assert_eq!(dirty_stats(std::iter::empty()).unwrap(), 0.0);
    }

    #[test]
    fn metadata_size() {
        let mut d = DatasetDescriptor::new(DatasetId(0), 16 * 1024, HashAlgorithm::Md5);
        d.register_blocks(1 << 30);
        assert_eq!(d.metadata_bytes(), 65536 * 18);
    }
}
