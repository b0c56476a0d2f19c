use std::collections::BTreeMap;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::ops::Range;

use super::layout::le_u64;
use super::{
    logical_to_physical, ChunkMeta, FileLayout, FileMeta, FormatError, LayoutEntry, VirtualContainer,
    CHECKSUM_FIELD_LEN, CHUNK_META_LEN, FILE_META_FIXED_LEN, FORMAT_VERSION, MAGIC,
};
use crate::block_tracker::DatasetId;
use crate::hashing::{hash_block, Digest, HashAlgorithm};

/// Supplies the live bytes of a dataset when writing a complete file.
pub trait LayoutSource {
    fn live_bytes(&self, dataset: DatasetId, range: Range<u64>) -> Option<&[u8]>;
}

impl<T: AsRef<[u8]>> LayoutSource for BTreeMap<DatasetId, T> {
    fn live_bytes(&self, dataset: DatasetId, range: Range<u64>) -> Option<&[u8]> {
        self.get(&dataset)?.as_ref().get(range.start as usize..range.end as usize)
    }
}

impl FileLayout {
    /// Logical offset of the container's first byte within its dataset.
    pub fn logical_start(&self, container: &VirtualContainer) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.container.dataset == container.dataset && e.container.index < container.index)
            .map(|e| e.container.size)
            .sum()
    }
}

/// Writes a complete checkpoint file: FileMeta, then every ChunkMeta followed
/// by its payload (live bytes, zero-filled up to the container size).
///
/// Payload checksums are computed from `source` while writing; the returned
/// layout carries them and is what [`read_layout`] will reproduce.
pub fn write_layout<W: Write>(
    mut w: W,
    layout: &FileLayout,
    source: &impl LayoutSource,
) -> Result<FileLayout, FormatError> {
    layout.validate()?;
    let alg = layout.algorithm();
    let mut sealed = layout.clone();
    for entry in &mut sealed.entries {
        let start = layout.logical_start(&entry.container);
        let live = live_slice(source, entry, start)?;
        entry.meta.payload_checksum = hash_block(alg, live);
    }

    w.write_all(&sealed.encode_file_meta())?;
    let zeros = [0u8; 8192];
    for entry in &sealed.entries {
        w.write_all(&entry.meta.encode())?;
        let start = sealed.logical_start(&entry.container);
        w.write_all(live_slice(source, entry, start)?)?;
        let mut pad = entry.container.size - entry.meta.chunk_size;
        while pad > 0 {
            let n = pad.min(zeros.len() as u64) as usize;
            w.write_all(&zeros[..n])?;
            pad -= n as u64;
        }
    }
    w.flush()?;
    Ok(sealed)
}

fn live_slice<'a>(source: &'a impl LayoutSource, entry: &LayoutEntry, start: u64) -> Result<&'a [u8], FormatError> {
    if entry.meta.chunk_size == 0 {
        // a container beyond a shrunken dataset's end holds nothing live
        return Ok(&[]);
    }
    let range = start..start + entry.meta.chunk_size;
    source.live_bytes(entry.container.dataset, range.clone()).ok_or_else(|| {
        FormatError::Inconsistent(format!(
            "no source bytes for dataset {} range {:?}",
            entry.container.dataset, range
        ))
    })
}

fn read_exact_at<R: Read + Seek>(r: &mut R, offset: u64, buf: &mut [u8]) -> Result<(), FormatError> {
    r.seek(SeekFrom::Start(offset))?;
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => {
            FormatError::Truncated(format!("short read of {} bytes at offset {offset}", buf.len()))
        }
        _ => FormatError::Io(e),
    })
}

/// Parses and fully validates a checkpoint file: magic, version, metadata
/// checksum, structure and every payload checksum.
pub fn read_layout<R: Read + Seek>(mut r: R) -> Result<FileLayout, FormatError> {
    let (layout, stored) = parse_layout(&mut r)?;
    if layout.meta_checksum() != stored {
        return Err(FormatError::MetaChecksum);
    }
    layout.validate()?;
    for e in &layout.entries {
        if !payload_matches(&mut r, &layout, e)? {
            return Err(FormatError::PayloadChecksum {
                dataset: e.meta.dataset,
                index: e.meta.index,
            });
        }
    }
    Ok(layout)
}

fn payload_matches<R: Read + Seek>(r: &mut R, layout: &FileLayout, e: &LayoutEntry) -> Result<bool, FormatError> {
    let mut buf = vec![0u8; e.meta.chunk_size as usize];
    read_exact_at(r, e.container.file_offset, &mut buf)?;
    Ok(hash_block(layout.algorithm(), &buf) == e.meta.payload_checksum)
}

/// What [`inspect_file`] found: the parsed layout and the outcome of each
/// check, without stopping at the first failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inspection {
    pub layout: FileLayout,
    pub stored_meta_checksum: Digest,
    pub meta_checksum_ok: bool,
    /// Structural problem, if any.
    pub structure_error: Option<String>,
    /// Per entry, in file order; `None` when the entry could not be checked.
    pub payload_ok: Vec<Option<bool>>,
}

impl Inspection {
    pub fn is_valid(&self) -> bool {
        self.meta_checksum_ok && self.structure_error.is_none() && self.payload_ok.iter().all(|p| *p == Some(true))
    }
}

/// Parses a checkpoint file and reports every checksum and structure check.
/// Fails only when the file cannot be parsed at all.
pub fn inspect_file<R: Read + Seek>(mut r: R) -> Result<Inspection, FormatError> {
    let (layout, stored) = parse_layout(&mut r)?;
    let meta_checksum_ok = layout.meta_checksum() == stored;
    let structure_error = layout.validate().err().map(|e| e.to_string());
    let mut payload_ok = Vec::with_capacity(layout.entries.len());
    for e in &layout.entries {
        payload_ok.push(if e.meta.chunk_size <= e.container.size {
            Some(payload_matches(&mut r, &layout, e)?)
        } else {
            None
        });
    }
    Ok(Inspection {
        layout,
        stored_meta_checksum: stored,
        meta_checksum_ok,
        structure_error,
        payload_ok,
    })
}

/// Reads FileMeta and every ChunkMeta; returns the layout with the stored
/// metadata checksum. Checks nothing beyond what parsing needs.
fn parse_layout<R: Read + Seek>(r: &mut R) -> Result<(FileLayout, Digest), FormatError> {
    let file_len = r.seek(SeekFrom::End(0))?;
    let mut fixed = [0u8; FILE_META_FIXED_LEN as usize];
    if file_len < 8 {
        return Err(FormatError::Truncated("missing file header".into()));
    }
    read_exact_at(r, 0, &mut fixed[..8])?;
    if fixed[..8] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    read_exact_at(r, 0, &mut fixed)?;
    let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let block_size = le_u64(&fixed[16..24]);
    let algorithm = HashAlgorithm::from_tag(fixed[24]).ok_or(FormatError::UnknownAlgorithm(fixed[24]))?;
    let checkpoint_id = le_u64(&fixed[32..40]);
    let count = le_u64(&fixed[40..48]);
    let table_len = count
        .checked_mul(16)
        .filter(|&n| FILE_META_FIXED_LEN + n + CHECKSUM_FIELD_LEN <= file_len)
        .ok_or_else(|| FormatError::Truncated(format!("dataset table of {count} entries")))?;

    let mut table = vec![0u8; table_len as usize];
    read_exact_at(r, FILE_META_FIXED_LEN, &mut table)?;
    let datasets = table
        .chunks_exact(16)
        .map(|c| (DatasetId(le_u64(&c[..8])), le_u64(&c[8..])))
        .collect();
    let mut stored_checksum = [0u8; CHECKSUM_FIELD_LEN as usize];
    read_exact_at(r, FILE_META_FIXED_LEN + table_len, &mut stored_checksum)?;

    let file_meta = FileMeta {
        version,
        block_size,
        algorithm,
        checkpoint_id,
        datasets,
    };
    let mut pos = file_meta.encoded_len();
    let mut entries = Vec::new();
    while pos < file_len {
        if pos + CHUNK_META_LEN > file_len {
            return Err(FormatError::Truncated(format!("partial chunk metadata at offset {pos}")));
        }
        let mut raw = [0u8; CHUNK_META_LEN as usize];
        read_exact_at(r, pos, &mut raw)?;
        let meta = ChunkMeta::decode(&raw, algorithm);
        let container = VirtualContainer {
            dataset: meta.dataset,
            index: meta.index,
            size: meta.container_size,
            file_offset: pos + CHUNK_META_LEN,
        };
        if container.file_offset.checked_add(container.size).is_none_or(|end| end > file_len) {
            return Err(FormatError::Truncated(format!(
                "container {} of dataset {} extends past end of file",
                meta.index, meta.dataset
            )));
        }
        pos = container.end();
        entries.push(LayoutEntry { meta, container });
    }

    let stored = Digest::from_bytes(algorithm, &stored_checksum).expect("field holds a full digest");
    Ok((FileLayout { file_meta, entries }, stored))
}

/// Reads the committed bytes of one dataset, gathering them across its
/// containers.
pub fn read_dataset<R: Read + Seek>(mut r: R, layout: &FileLayout, dataset: DatasetId) -> Result<Vec<u8>, FormatError> {
    let size = layout.committed_size(dataset).ok_or(FormatError::UnknownDataset(dataset))?;
    let mut out = vec![0u8; size as usize];
    let mut filled = 0usize;
    for (offset, len) in logical_to_physical(layout, dataset, 0, size)? {
        read_exact_at(&mut r, offset, &mut out[filled..filled + len as usize])?;
        filled += len as usize;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;
    use crate::container::plan_layout;

    fn source(sizes: &[(u64, usize)]) -> BTreeMap<DatasetId, Vec<u8>> {
        sizes
            .iter()
            .map(|&(id, n)| (DatasetId(id), (0..n).map(|i| (i as u64 * 7 + id) as u8).collect()))
            .collect()
    }

    fn write(layout: &FileLayout, src: &BTreeMap<DatasetId, Vec<u8>>) -> (FileLayout, Vec<u8>) {
        let mut file = Vec::new();
        let sealed = write_layout(&mut file, layout, src).unwrap();
        (sealed, file)
    }

    #[test]
    fn round_trip_and_dataset_read() {
        let src = source(&[(1, 100), (2, 33)]);
        let l = plan_layout(None, &[(DatasetId(1), 100), (DatasetId(2), 33)], 16, HashAlgorithm::Md5, 4).unwrap();
        let (sealed, file) = write(&l, &src);
        assert_eq!(file.len() as u64, sealed.file_len());
        let back = read_layout(Cursor::new(&file)).unwrap();
        assert_eq!(back, sealed);
        assert_eq!(read_dataset(Cursor::new(&file), &back, DatasetId(2)).unwrap(), src[&DatasetId(2)]);
    }

    #[test]
    fn empty_layout_is_header_only() {
        let l = plan_layout(None, &[], 16, HashAlgorithm::Crc32, 0).unwrap();
        let (_, file) = write(&l, &BTreeMap::<DatasetId, Vec<u8>>::new());
        assert_eq!(file.len() as u64, FileMeta::encoded_len_for(0));
        assert!(read_layout(Cursor::new(&file)).unwrap().entries.is_empty());
    }

    #[test]
    fn header_bit_layout() {
        let l = plan_layout(None, &[(DatasetId(5), 3)], 4096, HashAlgorithm::Crc32, 9).unwrap();
        let (sealed, file) = write(&l, &source(&[(5, 3)]));
        assert_eq!(&file[..8], b"DCPKT\0\0\x01");
        assert_eq!(&file[8..12], &1u32.to_le_bytes());
        assert_eq!(&file[16..24], &4096u64.to_le_bytes());
        assert_eq!(file[24], HashAlgorithm::Crc32.tag());
        assert_eq!(&file[32..40], &9u64.to_le_bytes());
        assert_eq!(&file[40..48], &1u64.to_le_bytes());
        assert_eq!(&file[48..56], &5u64.to_le_bytes());
        assert_eq!(&file[56..64], &3u64.to_le_bytes());
        assert_eq!(&file[64..68], sealed.meta_checksum().as_bytes());
        assert_eq!(&file[68..80], &[0u8; 12]);
        // chunk meta at 80, payload at 144
        assert_eq!(&file[80..88], &5u64.to_le_bytes());
        assert_eq!(file.len(), 144 + 3);
    }

    #[test]
    fn detects_corruption() {
        let src = source(&[(1, 100), (2, 50)]);
        let l = plan_layout(None, &[(DatasetId(1), 100), (DatasetId(2), 50)], 16, HashAlgorithm::Crc32, 1).unwrap();
        let (sealed, file) = write(&l, &src);

        let mut bad = file.clone();
        bad[0] = b'X';
        assert!(matches!(read_layout(Cursor::new(&bad)), Err(FormatError::BadMagic)));

        let mut bad = file.clone();
        bad[8] = 2;
        assert!(matches!(read_layout(Cursor::new(&bad)), Err(FormatError::UnsupportedVersion(2))));

        let mut bad = file.clone();
        bad[33] ^= 1;
        assert!(matches!(read_layout(Cursor::new(&bad)), Err(FormatError::MetaChecksum)));

        let target = sealed.entries[1].container.file_offset + 10;
        let mut bad = file.clone();
        bad[target as usize] ^= 0x80;
        match read_layout(Cursor::new(&bad)) {
            Err(FormatError::PayloadChecksum { dataset, index }) => assert_eq!((dataset, index), (DatasetId(2), 0)),
            other => panic!("unexpected {other:?}"),
        }

        let truncated = &file[..file.len() - 1];
        assert!(matches!(read_layout(Cursor::new(truncated)), Err(FormatError::Truncated(_))));
        assert!(matches!(read_layout(Cursor::new(&file[..5])), Err(FormatError::Truncated(_))));
    }

    #[test]
    fn inspection_reports_each_container() {
        let src = source(&[(1, 100), (2, 33)]);
        let l = plan_layout(None, &[(DatasetId(1), 100), (DatasetId(2), 33)], 16, HashAlgorithm::Crc32, 1).unwrap();
        let (_, mut file) = write(&l, &src);
        assert!(inspect_file(Cursor::new(&file)).unwrap().is_valid());
        let second = l.entries[1].container.file_offset as usize;
        file[second] ^= 1;
        let report = inspect_file(Cursor::new(&file)).unwrap();
        assert!(report.meta_checksum_ok);
        assert_eq!(report.payload_ok, vec![Some(true), Some(false)]);
        assert!(!report.is_valid());
        file[0] = b'X';
        assert!(matches!(inspect_file(Cursor::new(&file)), Err(FormatError::BadMagic)));
    }
}
