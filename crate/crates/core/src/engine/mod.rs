//! Checkpoint engine: protect, checkpoint, recover.
//!
//! The committed checkpoint file is never modified. A differential update
//! works on a byte-identical duplicate (`ckpt.<id>.staging`) that is
//! prepared between checkpoints, optionally on a background thread. Only the
//! dirty and invalid blocks are written into the duplicate; it is then
//! fsynced and atomically renamed to `ckpt.<id>.dcpkt`, after which the old
//! file is removed and, last of all, block digests are committed. A full
//! checkpoint writes `ckpt.<id>.tmp` and commits it the same way.
//!
//! Any `ckpt.<id>.dcpkt` in the directory is complete and checksummed;
//! recovery picks the newest one that validates.

mod coalesce;
mod fault;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock, RwLockReadGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

pub use coalesce::{CoalescingWriter, PositionedIo, WriteStats};
pub use fault::{FailAt, FaultAction, FaultInjector, FaultPoint, NoFaults};

use crate::block_tracker::{DatasetDescriptor, DatasetId, DirtyRegion, TrackerError};
use crate::container::{
    logical_to_physical, plan_layout, read_dataset, read_layout, write_layout, FileLayout, FormatError,
};
use crate::hashing::{hash_block, HashAlgorithm};

/// Memory shared between the application and the engine.
pub type SharedRegion = Arc<RwLock<Vec<u8>>>;

pub fn shared_region(bytes: Vec<u8>) -> SharedRegion {
    Arc::new(RwLock::new(bytes))
}

pub const DEFAULT_BLOCK_SIZE: usize = 16 * 1024;
pub const DEFAULT_COALESCING_THRESHOLD: usize = 16 * 1024 * 1024;
pub const LOG_FILE: &str = "ckpt_log.csv";
pub const LOG_HEADER: &str = "id,kind,n_d,payload_bytes,meta_bytes,regions,write_s,hash_s";

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub directory: PathBuf,
    pub block_size: usize,
    pub algorithm: HashAlgorithm,
    pub coalescing: bool,
    pub coalescing_threshold: usize,
    pub dcp_enabled: bool,
    /// Prepare the next staging copy on a background thread right after a
    /// commit instead of at the start of the next checkpoint.
    pub async_duplicate: bool,
    /// Artificial delay per payload write call.
    pub write_call_latency: Option<Duration>,
    /// Append a row per checkpoint to `ckpt_log.csv`.
    pub log_csv: bool,
}

impl EngineConfig {
    pub fn new(directory: impl Into<PathBuf>) -> Self {
        EngineConfig {
            directory: directory.into(),
            block_size: DEFAULT_BLOCK_SIZE,
            algorithm: HashAlgorithm::Md5,
            coalescing: true,
            coalescing_threshold: DEFAULT_COALESCING_THRESHOLD,
            dcp_enabled: true,
            async_duplicate: false,
            write_call_latency: None,
            log_csv: true,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.block_size == 0 {
            return Err(EngineError::Config("block size must be positive".into()));
        }
        if self.coalescing_threshold < self.block_size {
            return Err(EngineError::Config(format!(
                "coalescing threshold {} is smaller than the block size {}",
                self.coalescing_threshold, self.block_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Full,
    Differential,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CheckpointKind::Full => "FULL",
            CheckpointKind::Differential => "DIFFERENTIAL",
        })
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub id: u64,
    pub kind: CheckpointKind,
    /// Dirty-or-invalid block fraction; 1 for full checkpoints.
    pub n_d: f64,
    pub payload_bytes: u64,
    pub meta_bytes: u64,
    pub regions: u64,
    pub write_time: Duration,
    pub hash_time: Duration,
    pub total_blocks: u64,
    pub datasets: Vec<DatasetStats>,
    pub io: WriteStats,
}

/// Per-dataset share of one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetStats {
    pub id: DatasetId,
    /// Blocks written: dirty or invalid ones, or all of them for a full
    /// checkpoint.
    pub written_blocks: u64,
    pub blocks: u64,
    pub payload_bytes: u64,
}

impl DatasetStats {
    pub fn n_d(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.written_blocks as f64 / self.blocks as f64
        }
    }
}

impl CheckpointMeta {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{},{:.6},{:.6}",
            self.id,
            self.kind,
            self.n_d,
            self.payload_bytes,
            self.meta_bytes,
            self.regions,
            self.write_time.as_secs_f64(),
            self.hash_time.as_secs_f64()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitState {
    Idle,
    Duplicating,
    Updating,
    Committing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryReport {
    pub checkpoint_id: u64,
    pub path: PathBuf,
    pub datasets: Vec<(DatasetId, u64)>,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset {0} is already protected with a different region")]
    RegionConflict(DatasetId),
    #[error("dataset {id}: region holds {actual} bytes but {expected} are protected")]
    RegionTooSmall { id: DatasetId, expected: usize, actual: usize },
    #[error("dataset {0} is not protected")]
    NotProtected(DatasetId),
    #[error("operation not allowed in state {0:?}")]
    State(CommitState),
    #[error("no committed checkpoint in {0}")]
    NoCheckpoint(PathBuf),
    #[error("duplication of the committed checkpoint failed: {0}")]
    Duplicate(String),
    #[error("injected failure at {0:?}")]
    Injected(FaultPoint),
    #[error("engine crashed at {0:?}; drop it and recover")]
    Crashed(FaultPoint),
    #[error("engine is unusable after a crash")]
    Poisoned,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EngineError {
    fn is_crash(&self) -> bool {
        matches!(self, EngineError::Crashed(_))
    }
}

struct Protected {
    region: SharedRegion,
    tracker: DatasetDescriptor,
}

struct Committed {
    id: u64,
    path: PathBuf,
    layout: FileLayout,
}

enum Staging {
    None,
    Pending { path: PathBuf, handle: JoinHandle<Result<(), DuplicateFailure>> },
    Ready(PathBuf),
    Failed(String),
    Crashed,
}

enum DuplicateFailure {
    Failed(String),
    Crashed,
}

fn checkpoint_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("ckpt.{id}.dcpkt"))
}

fn staging_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("ckpt.{id}.staging"))
}

fn tmp_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("ckpt.{id}.tmp"))
}

/// Parses `ckpt.<id>.<ext>` names.
fn parse_name(name: &str) -> Option<(u64, &str)> {
    let rest = name.strip_prefix("ckpt.")?;
    let (id, ext) = rest.split_once('.')?;
    Some((id.parse().ok()?, ext))
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

/// Rename followed by a directory fsync so the new name is durable.
fn durable_rename(from: &Path, to: &Path) -> io::Result<()> {
    fs::rename(from, to)?;
    sync_dir(to.parent().unwrap_or(Path::new(".")))
}

fn copy_file(from: &Path, to: &Path) -> io::Result<()> {
    fs::copy(from, to)?;
    File::open(to)?.sync_all()
}

pub struct Engine {
    config: EngineConfig,
    datasets: BTreeMap<DatasetId, Protected>,
    committed: Option<Committed>,
    staging: Staging,
    state: CommitState,
    next_id: u64,
    faults: Arc<dyn FaultInjector>,
    rehash_all: bool,
    poisoned: bool,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        fs::create_dir_all(&config.directory)?;
        // number after anything already on disk so new files always sort newest
        let mut next_id = 1;
        for entry in fs::read_dir(&config.directory)? {
            if let Some((id, _)) = entry?.file_name().to_str().and_then(parse_name) {
                next_id = next_id.max(id + 1);
            }
        }
        Ok(Engine {
            config,
            datasets: BTreeMap::new(),
            committed: None,
            staging: Staging::None,
            state: CommitState::Idle,
            next_id,
            faults: Arc::new(NoFaults),
            rehash_all: false,
            poisoned: false,
        })
    }

    pub fn with_faults(mut self, faults: Arc<dyn FaultInjector>) -> Self {
        self.faults = faults;
        self
    }

    pub fn set_faults(&mut self, faults: Arc<dyn FaultInjector>) {
        self.faults = faults;
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn state(&self) -> CommitState {
        self.state
    }

    pub fn committed_path(&self) -> Option<&Path> {
        self.committed.as_ref().map(|c| c.path.as_path())
    }

    pub fn committed_layout(&self) -> Option<&FileLayout> {
        self.committed.as_ref().map(|c| &c.layout)
    }

    pub fn tracker(&self, id: DatasetId) -> Option<&DatasetDescriptor> {
        self.datasets.get(&id).map(|p| &p.tracker)
    }

    pub fn region(&self, id: DatasetId) -> Option<&SharedRegion> {
        self.datasets.get(&id).map(|p| &p.region)
    }

    /// Bytes of block hash metadata held for all datasets.
    pub fn hash_table_bytes(&self) -> usize {
        self.datasets.values().map(|p| p.tracker.metadata_bytes()).sum()
    }

    fn fault(&self, point: FaultPoint) -> Result<(), EngineError> {
        match self.faults.at(point) {
            FaultAction::Continue => Ok(()),
            FaultAction::Fail => Err(EngineError::Injected(point)),
            FaultAction::Crash => Err(EngineError::Crashed(point)),
        }
    }

    fn usable(&self) -> Result<(), EngineError> {
        if self.poisoned {
            return Err(EngineError::Poisoned);
        }
        if self.state != CommitState::Idle {
            return Err(EngineError::State(self.state));
        }
        Ok(())
    }

    /// Registers a dataset, or resizes one registered with the same region.
    /// Blocks beyond the last committed size become invalid.
    pub fn protect(&mut self, id: DatasetId, region: SharedRegion, size: usize) -> Result<(), EngineError> {
        self.usable()?;
        let actual = region.read().unwrap().len();
        if actual < size {
            return Err(EngineError::RegionTooSmall { id, expected: size, actual });
        }
        match self.datasets.get_mut(&id) {
            Some(p) if !Arc::ptr_eq(&p.region, &region) => return Err(EngineError::RegionConflict(id)),
            Some(p) => p.tracker.register_blocks(size),
            None => {
                let mut tracker = DatasetDescriptor::new(id, self.config.block_size, self.config.algorithm);
                tracker.register_blocks(size);
                self.datasets.insert(id, Protected { region, tracker });
            }
        }
        Ok(())
    }

    /// Starts duplicating the committed file into the staging name of the
    /// next checkpoint. Runs on a background thread when `async_duplicate`
    /// is set; otherwise completes before returning.
    pub fn duplicate_previous(&mut self) -> Result<(), EngineError> {
        self.usable()?;
        let src = match &self.committed {
            Some(c) => c.path.clone(),
            None => return Err(EngineError::NoCheckpoint(self.config.directory.clone())),
        };
        self.discard_staging();
        let dst = staging_path(&self.config.directory, self.next_id);
        let faults = Arc::clone(&self.faults);
        let job = move || -> Result<(), DuplicateFailure> {
            copy_file(&src, &dst).map_err(|e| DuplicateFailure::Failed(e.to_string()))?;
            match faults.at(FaultPoint::Duplicate) {
                FaultAction::Continue => Ok(()),
                FaultAction::Fail => {
                    let _ = fs::remove_file(&dst);
                    Err(DuplicateFailure::Failed("injected duplication failure".into()))
                }
                FaultAction::Crash => Err(DuplicateFailure::Crashed),
            }
        };
        let dst = staging_path(&self.config.directory, self.next_id);
        if self.config.async_duplicate {
            self.staging = Staging::Pending {
                path: dst,
                handle: std::thread::spawn(job),
            };
        } else {
            self.state = CommitState::Duplicating;
            let res = job();
            self.state = CommitState::Idle;
            self.staging = match res {
                Ok(()) => Staging::Ready(dst),
                Err(DuplicateFailure::Failed(e)) => Staging::Failed(e),
                Err(DuplicateFailure::Crashed) => Staging::Crashed,
            };
        }
        Ok(())
    }

    /// Blocks until a pending duplication finishes and returns the staging
    /// path.
    pub fn wait_for_duplicate(&mut self) -> Result<PathBuf, EngineError> {
        if let Staging::Pending { .. } = self.staging {
            let Staging::Pending { path, handle } = std::mem::replace(&mut self.staging, Staging::None) else {
                unreachable!()
            };
            self.staging = match handle.join() {
                Ok(Ok(())) => Staging::Ready(path),
                Ok(Err(DuplicateFailure::Failed(e))) => Staging::Failed(e),
                Ok(Err(DuplicateFailure::Crashed)) => Staging::Crashed,
                Err(_) => Staging::Failed("duplication thread panicked".into()),
            };
        }
        match &self.staging {
            Staging::Ready(p) => Ok(p.clone()),
            Staging::Failed(e) => Err(EngineError::Duplicate(e.clone())),
            Staging::Crashed => Err(EngineError::Crashed(FaultPoint::Duplicate)),
            _ => Err(EngineError::Duplicate("no duplication scheduled".into())),
        }
    }

    fn discard_staging(&mut self) {
        if let Staging::Pending { .. } = self.staging {
            let _ = self.wait_for_duplicate();
        }
        if let Staging::Ready(p) = std::mem::replace(&mut self.staging, Staging::None) {
            let _ = fs::remove_file(p);
        }
    }

    /// Obtains a staging copy for a differential update, duplicating
    /// synchronously when none was prepared. `None` means duplication failed
    /// and the caller must fall back to a full checkpoint.
    fn take_staging(&mut self) -> Result<Option<PathBuf>, EngineError> {
        if matches!(self.staging, Staging::None) && self.duplicate_previous().is_err() {
            return Ok(None);
        }
        let expected = staging_path(&self.config.directory, self.next_id);
        match self.wait_for_duplicate() {
            Ok(p) if p == expected => {
                self.staging = Staging::None;
                Ok(Some(p))
            }
            Ok(_) => {
                // prepared for a different id; start over
                self.discard_staging();
                self.take_staging()
            }
            Err(e) if e.is_crash() => Err(e),
            Err(_) => {
                self.staging = Staging::None;
                Ok(None)
            }
        }
    }

    /// Writes a checkpoint: differential when enabled and a staging copy is
    /// available, full otherwise.
    pub fn checkpoint(&mut self) -> Result<CheckpointMeta, EngineError> {
        self.checkpoint_inner(false)
    }

    /// Writes a full checkpoint with a freshly packed layout, reclaiming
    /// container space left behind by shrunken datasets.
    pub fn checkpoint_compact(&mut self) -> Result<CheckpointMeta, EngineError> {
        self.checkpoint_inner(true)
    }

    fn checkpoint_inner(&mut self, compact: bool) -> Result<CheckpointMeta, EngineError> {
        self.usable()?;
        let id = self.next_id;
        let sizes: Vec<(DatasetId, u64)> = self
            .datasets
            .iter()
            .map(|(&id, p)| (id, p.tracker.size() as u64))
            .collect();
        let previous = if compact { None } else { self.committed.as_ref().map(|c| &c.layout) };
        let layout = plan_layout(previous, &sizes, self.config.block_size as u64, self.config.algorithm, id)?;

        let differential_possible = self.config.dcp_enabled
            && !compact
            && previous.is_some_and(|prev| layout.preserves(prev));
        let staging = if differential_possible {
            match self.take_staging() {
                Ok(s) => s,
                Err(e) => {
                    self.poisoned = true;
                    return Err(e);
                }
            }
        } else {
            None
        };
        if !differential_possible {
            self.discard_staging();
        }

        if self.rehash_all {
            for p in self.datasets.values_mut() {
                p.tracker.invalidate_all();
            }
            self.rehash_all = false;
        }

        self.state = CommitState::Updating;
        let result = match staging {
            Some(path) => self.differential(id, layout, &path),
            None => self.full(id, layout),
        };
        self.state = CommitState::Idle;

        match result {
            Ok(meta) => {
                self.next_id = id + 1;
                self.log(&meta);
                if self.config.async_duplicate && self.config.dcp_enabled {
                    let _ = self.duplicate_previous();
                }
                Ok(meta)
            }
            Err(e) if e.is_crash() => {
                self.poisoned = true;
                Err(e)
            }
            Err(e) => {
                let dir = &self.config.directory;
                let _ = fs::remove_file(staging_path(dir, id));
                let _ = fs::remove_file(tmp_path(dir, id));
                for p in self.datasets.values_mut() {
                    p.tracker.clear_dirty();
                }
                if self.committed.as_ref().is_some_and(|c| c.id == id) {
                    // file committed but digests are stale
                    self.next_id = id + 1;
                    self.rehash_all = true;
                }
                Err(e)
            }
        }
    }

    fn full(&mut self, id: u64, layout: FileLayout) -> Result<CheckpointMeta, EngineError> {
        let dir = self.config.directory.clone();
        let tmp = tmp_path(&dir, id);
        let final_path = checkpoint_path(&dir, id);

        let datasets = std::mem::take(&mut self.datasets);
        let outcome = (|| {
            let guards: Vec<(DatasetId, RwLockReadGuard<'_, Vec<u8>>, usize)> = datasets
                .iter()
                .map(|(&id, p)| {
                    let g = p.region.read().unwrap();
                    let size = p.tracker.size();
                    if g.len() < size {
                        return Err(EngineError::RegionTooSmall { id, expected: size, actual: g.len() });
                    }
                    Ok((id, g, size))
                })
                .collect::<Result<_, _>>()?;
            let source: BTreeMap<DatasetId, &[u8]> = guards.iter().map(|(id, g, n)| (*id, &g[..*n])).collect();

            let write_start = Instant::now();
            let file = File::create(&tmp)?;
            let mut w = BufWriter::with_capacity(self.config.coalescing_threshold.min(1 << 24), file);
            let sealed = write_layout(&mut w, &layout, &source)?;
            let file = w.into_inner().map_err(|e| e.into_error())?;
            self.fault(FaultPoint::AfterPayloadWrite)?;
            file.sync_all()?;
            self.fault(FaultPoint::AfterFsync)?;
            self.fault(FaultPoint::BeforeRename)?;
            self.state = CommitState::Committing;
            durable_rename(&tmp, &final_path)?;
            let write_time = write_start.elapsed();
            Ok::<_, EngineError>((sealed, write_time, guards.iter().map(|(_, _, n)| *n as u64).sum::<u64>()))
        })();
        self.datasets = datasets;
        let (sealed, write_time, payload) = outcome?;

        let meta_bytes = sealed.file_meta.encoded_len() + 64 * sealed.entries.len() as u64;
        let total_blocks: u64 = self.datasets.values().map(|p| p.tracker.block_count() as u64).sum();
        let stats = self
            .datasets
            .values()
            .map(|p| DatasetStats {
                id: p.tracker.id(),
                written_blocks: p.tracker.block_count() as u64,
                blocks: p.tracker.block_count() as u64,
                payload_bytes: p.tracker.size() as u64,
            })
            .collect();
        let io = WriteStats {
            write_calls: 1,
            payload_bytes: payload,
            bytes_written: sealed.file_len(),
            write_sizes: vec![sealed.file_len()],
            extent_sizes: vec![payload],
            flushes: 1,
            ..WriteStats::default()
        };
        let old = self.committed.replace(Committed { id, path: final_path, layout: sealed });
        self.finish_commit(old)?;

        let hash_start = Instant::now();
        for p in self.datasets.values_mut() {
            p.tracker.invalidate_all();
            if self.config.dcp_enabled {
                let guard = p.region.read().unwrap();
                p.tracker.commit_hashes(&guard[..p.tracker.size()])?;
            }
        }
        Ok(CheckpointMeta {
            id,
            kind: CheckpointKind::Full,
            n_d: 1.0,
            payload_bytes: payload,
            meta_bytes,
            regions: self.datasets.len() as u64,
            write_time,
            hash_time: hash_start.elapsed(),
            total_blocks,
            datasets: stats,
            io,
        })
    }

    /// Post-rename steps shared by both paths: drop the previous file, then
    /// the hash-commit fault point.
    fn finish_commit(&mut self, old: Option<Committed>) -> Result<(), EngineError> {
        self.fault(FaultPoint::AfterRename)?;
        if let Some(old) = old {
            fs::remove_file(&old.path)?;
            sync_dir(&self.config.directory)?;
        }
        self.fault(FaultPoint::BeforeHashCommit)
    }

    fn differential(&mut self, id: u64, layout: FileLayout, staging: &Path) -> Result<CheckpointMeta, EngineError> {
        self.fault(FaultPoint::AfterDuplicate)?;
        let prev = &self.committed.as_ref().expect("differential needs a committed file").layout;
        let mut file = OpenOptions::new().read(true).write(true).open(staging)?;

        let write_start = Instant::now();
        let mut write_time = Duration::ZERO;
        let old_len = prev.file_len();
        let new_entries: Vec<_> = layout.entries.iter().filter(|e| e.container.meta_offset() >= old_len).collect();
        if !new_entries.is_empty() {
            file.set_len(layout.file_len())?;
            for e in &new_entries {
                PositionedIo::write_at(&mut file, &e.meta.encode(), e.container.meta_offset())?;
            }
        }
        write_time += write_start.elapsed();
        self.fault(FaultPoint::AfterContainerAppend)?;

        // detection
        let hash_start = Instant::now();
        let mut regions: Vec<DirtyRegion> = Vec::new();
        let datasets = std::mem::take(&mut self.datasets);
        let mut datasets = datasets;
        let scan: Result<(), EngineError> = datasets.values_mut().try_for_each(|p| {
            let guard = p.region.read().unwrap();
            let size = p.tracker.size();
            if guard.len() < size {
                return Err(EngineError::RegionTooSmall { id: p.tracker.id(), expected: size, actual: guard.len() });
            }
            regions.extend(p.tracker.scan_dirty_regions(&guard[..size])?);
            Ok(())
        });
        self.datasets = datasets;
        scan?;
        let mut hash_time = hash_start.elapsed();

        let shared: Vec<(DatasetId, SharedRegion, usize)> = self
            .datasets
            .iter()
            .map(|(&id, p)| (id, Arc::clone(&p.region), p.tracker.size()))
            .collect();
        let views = shared
            .iter()
            .map(|(id, r, n)| {
                let g = r.read().unwrap();
                if g.len() < *n {
                    return Err(EngineError::RegionTooSmall { id: *id, expected: *n, actual: g.len() });
                }
                Ok((*id, g, *n))
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        let data: BTreeMap<DatasetId, &[u8]> = views.iter().map(|(id, g, n)| (*id, &g[..*n])).collect();

        let t = Instant::now();
        let threshold = self.config.coalescing.then_some(self.config.coalescing_threshold);
        let mut writer = CoalescingWriter::new(&mut file, threshold).with_call_latency(self.config.write_call_latency);
        for r in &regions {
            let bytes = &data[&r.dataset][r.offset..r.end()];
            let mut done = 0usize;
            for (off, len) in logical_to_physical(&layout, r.dataset, r.offset as u64, r.len as u64)? {
                writer.push(off, &bytes[done..done + len as usize])?;
                done += len as usize;
            }
            self.fault(FaultPoint::AfterRegionWrite)?;
        }
        let io = writer.finish()?;
        write_time += t.elapsed();
        self.fault(FaultPoint::AfterPayloadWrite)?;

        // payload checksums of touched containers
        let t = Instant::now();
        let mut sealed = layout;
        let alg = self.config.algorithm;
        let mut touched = BTreeSet::new();
        for r in &regions {
            for e in sealed.containers(r.dataset) {
                let start = sealed.logical_start(&e.container);
                if (r.offset as u64) < start + e.container.size && start < r.end() as u64 {
                    touched.insert((e.container.dataset, e.container.index));
                }
            }
        }
        let starts: Vec<u64> = sealed.entries.iter().map(|e| sealed.logical_start(&e.container)).collect();
        for (e, start) in sealed.entries.iter_mut().zip(starts) {
            let old = prev.entries.iter().find(|o| o.container == e.container);
            let unchanged = old.is_some_and(|o| o.meta.chunk_size == e.meta.chunk_size)
                && !touched.contains(&(e.container.dataset, e.container.index));
            if let (true, Some(o)) = (unchanged, old) {
                e.meta.payload_checksum = o.meta.payload_checksum;
            } else {
                let bytes = data[&e.container.dataset];
                let live = if e.meta.chunk_size == 0 {
                    &[][..]
                } else {
                    &bytes[start as usize..(start + e.meta.chunk_size) as usize]
                };
                e.meta.payload_checksum = hash_block(alg, live);
            }
        }
        hash_time += t.elapsed();

        let t = Instant::now();
        let header = sealed.encode_file_meta();
        PositionedIo::write_at(&mut file, &header, 0)?;
        let mut meta_bytes = header.len() as u64;
        for e in &sealed.entries {
            PositionedIo::write_at(&mut file, &e.meta.encode(), e.container.meta_offset())?;
            meta_bytes += 64;
        }
        self.fault(FaultPoint::AfterMetadataWrite)?;
        file.sync_all()?;
        drop(file);
        self.fault(FaultPoint::AfterFsync)?;
        self.fault(FaultPoint::BeforeRename)?;
        self.state = CommitState::Committing;
        let final_path = checkpoint_path(&self.config.directory, id);
        durable_rename(staging, &final_path)?;
        write_time += t.elapsed();
        drop(data);
        drop(views);

        let old = self.committed.replace(Committed { id, path: final_path, layout: sealed });
        self.finish_commit(old)?;

        let t = Instant::now();
        let b = self.config.block_size;
        let mut stats: Vec<DatasetStats> = self
            .datasets
            .values()
            .map(|p| DatasetStats {
                id: p.tracker.id(),
                written_blocks: 0,
                blocks: p.tracker.block_count() as u64,
                payload_bytes: 0,
            })
            .collect();
        for r in &regions {
            let s = stats.iter_mut().find(|s| s.id == r.dataset).expect("region of a protected dataset");
            s.written_blocks += r.len.div_ceil(b) as u64;
            s.payload_bytes += r.len as u64;
        }
        let dirty_blocks: u64 = stats.iter().map(|s| s.written_blocks).sum();
        let total_blocks: u64 = stats.iter().map(|s| s.blocks).sum();
        for p in self.datasets.values_mut() {
            let guard = p.region.read().unwrap();
            p.tracker.commit_hashes(&guard[..p.tracker.size()])?;
        }
        hash_time += t.elapsed();

        Ok(CheckpointMeta {
            id,
            kind: CheckpointKind::Differential,
            n_d: if total_blocks == 0 { 0.0 } else { dirty_blocks as f64 / total_blocks as f64 },
            payload_bytes: regions.iter().map(|r| r.len as u64).sum(),
            meta_bytes,
            regions: regions.len() as u64,
            write_time,
            hash_time,
            total_blocks,
            datasets: stats,
            io,
        })
    }

    fn log(&self, meta: &CheckpointMeta) {
        if !self.config.log_csv {
            return;
        }
        let path = self.config.directory.join(LOG_FILE);
        let fresh = !path.exists();
        // best effort: the checkpoint itself is already committed
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(&path) {
            if fresh {
                let _ = writeln!(f, "{LOG_HEADER}");
            }
            let _ = writeln!(f, "{}", meta.csv_row());
        }
    }

    /// Committed checkpoint files in the directory, newest first.
    pub fn list_checkpoints(dir: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
        let mut found = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name();
            if let Some((id, "dcpkt")) = name.to_str().and_then(parse_name) {
                found.push((id, entry.path()));
            }
        }
        found.sort_by_key(|f| std::cmp::Reverse(f.0));
        Ok(found)
    }

    /// Restores every dataset stored in the newest valid checkpoint into its
    /// protected region and rebuilds block digests. Nothing is copied unless
    /// the whole file validates.
    pub fn recover(&mut self) -> Result<RecoveryReport, EngineError> {
        self.usable()?;
        self.discard_staging();
        let dir = self.config.directory.clone();
        let mut first_error = None;
        let mut chosen = None;
        for (id, path) in Self::list_checkpoints(&dir)? {
            let attempt = File::open(&path).map_err(FormatError::from).and_then(|mut f| {
                let layout = read_layout(&mut f)?;
                let mut data = Vec::new();
                for &(ds, _) in &layout.file_meta.datasets {
                    data.push((ds, read_dataset(&mut f, &layout, ds)?));
                }
                Ok((layout, data))
            });
            match attempt {
                Ok(found) => {
                    chosen = Some((id, path, found));
                    break;
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        let Some((id, path, (layout, data))) = chosen else {
            return Err(match first_error {
                Some(e) => e.into(),
                None => EngineError::NoCheckpoint(dir),
            });
        };
        if let Some((ds, _)) = data.iter().find(|(ds, _)| !self.datasets.contains_key(ds)) {
            return Err(EngineError::NotProtected(*ds));
        }

        let mut restored = Vec::new();
        for (ds, bytes) in data {
            let p = self.datasets.get_mut(&ds).expect("checked above");
            {
                let mut region = p.region.write().unwrap();
                region.clear();
                region.extend_from_slice(&bytes);
            }
            let mut tracker = DatasetDescriptor::new(ds, self.config.block_size, self.config.algorithm);
            tracker.register_blocks(bytes.len());
            tracker.commit_hashes(&bytes)?;
            p.tracker = tracker;
            restored.push((ds, bytes.len() as u64));
        }

        // leftovers of interrupted updates and superseded files
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name();
            if let Some((other, ext)) = name.to_str().and_then(parse_name) {
                let stale = matches!(ext, "staging" | "tmp") || (ext == "dcpkt" && other != id);
                if stale {
                    let _ = fs::remove_file(entry.path());
                }
            }
        }

        self.committed = Some(Committed { id, path: path.clone(), layout });
        self.next_id = id + 1;
        self.rehash_all = false;
        if self.config.async_duplicate && self.config.dcp_enabled {
            let _ = self.duplicate_previous();
        }
        Ok(RecoveryReport { checkpoint_id: id, path, datasets: restored })
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if let Staging::Pending { handle, .. } = std::mem::replace(&mut self.staging, Staging::None) {
            let _ = handle.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(dir: &Path) -> Engine {
        let mut cfg = EngineConfig::new(dir);
        cfg.block_size = 64;
        cfg.coalescing_threshold = 1024;
        Engine::new(cfg).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = EngineConfig::new("/tmp/x");
        cfg.coalescing_threshold = 10;
        cfg.block_size = 64;
        assert!(matches!(Engine::new(cfg.clone()), Err(EngineError::Config(_))));
        cfg.block_size = 0;
        assert!(matches!(Engine::new(cfg), Err(EngineError::Config(_))));
    }

    #[test]
    fn duplicate_rejected_while_updating() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = engine(dir.path());
        let r = shared_region(vec![1; 100]);
        e.protect(DatasetId(1), r, 100).unwrap();
        e.checkpoint().unwrap();
        e.state = CommitState::Updating;
        assert!(matches!(e.duplicate_previous(), Err(EngineError::State(CommitState::Updating))));
        e.state = CommitState::Idle;
        e.duplicate_previous().unwrap();
    }

    #[test]
    fn duplicate_without_checkpoint_fails() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = engine(dir.path());
        assert!(matches!(e.duplicate_previous(), Err(EngineError::NoCheckpoint(_))));
    }

    #[test]
    fn names() {
        assert_eq!(parse_name("ckpt.12.dcpkt"), Some((12, "dcpkt")));
        assert_eq!(parse_name("ckpt.3.staging"), Some((3, "staging")));
        assert_eq!(parse_name("ckpt_log.csv"), None);
        assert_eq!(parse_name("ckpt.x.tmp"), None);
    }
}
