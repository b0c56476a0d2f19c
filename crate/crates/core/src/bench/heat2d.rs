//! Jacobi heat diffusion on an `ny × nx` grid split into horizontal bands,
//! one per rank. Each step every cell becomes the average of its four
//! neighbours; edges reflect (a missing neighbour is the cell itself), so a
//! uniform field is a fixed point. An optional hot cell is held at a fixed
//! temperature.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use super::stats::{ChunkSizeCdf, NdMatrix, CDF_HEADER, ND_HEADER};
use super::{checkpoint_rows, param, write_csv, BenchError};
use crate::block_tracker::DatasetId;
use crate::container::{read_dataset, read_layout};
use crate::engine::{shared_region, CheckpointKind, CheckpointMeta, Engine, EngineConfig, SharedRegion};
use crate::scalar::Real;

pub const GRID: DatasetId = DatasetId(0);
pub const STEP: DatasetId = DatasetId(1);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeatInit {
    Uniform(f64),
    /// Zero everywhere except one cell pinned at `temperature`.
    HotCell { row: usize, col: usize, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heat2dConfig {
    pub nx: usize,
    pub ny: usize,
    pub ranks: usize,
    pub steps: u64,
    pub interval: u64,
    pub init: HeatInit,
    /// Drop all state at this step and resume from the last checkpoint.
    pub kill_at: Option<u64>,
    /// Compare every committed file against the in-memory grid.
    pub verify: bool,
}

impl Heat2dConfig {
    pub fn new(nx: usize, ny: usize, ranks: usize, steps: u64, interval: u64) -> Self {
        Heat2dConfig {
            nx,
            ny,
            ranks,
            steps,
            interval,
            init: HeatInit::HotCell { row: ny / 16, col: nx / 2, temperature: 100.0 },
            kill_at: None,
            verify: true,
        }
    }

    /// Halfway between the two checkpoints around the middle of the run.
    pub fn default_kill_step(&self) -> Option<u64> {
        let mid = self.steps / 2 / self.interval * self.interval;
        let kill = mid + self.interval / 2;
        (self.interval > 1 && kill < self.steps && kill > mid).then_some(kill)
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.nx == 0 || self.ny == 0 || self.ranks == 0 {
            return Err(param("grid dimensions and rank count must be positive"));
        }
        if !self.ny.is_multiple_of(self.ranks) {
            return Err(param(format!("{} rows cannot be split evenly over {} ranks", self.ny, self.ranks)));
        }
        if self.interval == 0 {
            return Err(param("checkpoint interval must be positive"));
        }
        if let HeatInit::HotCell { row, col, .. } = self.init {
            if row >= self.ny || col >= self.nx {
                return Err(param(format!("hot cell ({row}, {col}) lies outside the grid")));
            }
        }
        Ok(())
    }
}

/// Simulation state: one band of rows per rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Heat2dState<F> {
    nx: usize,
    rows: usize,
    step: u64,
    source: Option<(usize, usize, F)>,
    bands: Vec<Vec<F>>,
}

impl<F: Real> Heat2dState<F> {
    pub fn new(config: &Heat2dConfig) -> Result<Self, BenchError> {
        config.validate()?;
        let rows = config.ny / config.ranks;
        let (fill, source) = match config.init {
            HeatInit::Uniform(v) => (F::lit(v), None),
            HeatInit::HotCell { row, col, temperature } => (F::zero(), Some((row, col, F::lit(temperature)))),
        };
        let mut state = Heat2dState {
            nx: config.nx,
            rows,
            step: 0,
            source,
            bands: vec![vec![fill; rows * config.nx]; config.ranks],
        };
        state.pin_source();
        Ok(state)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ranks(&self) -> usize {
        self.bands.len()
    }

    pub fn band(&self, rank: usize) -> &[F] {
        &self.bands[rank]
    }

    /// The whole grid, row-major.
    pub fn grid(&self) -> Vec<F> {
        self.bands.concat()
    }

    fn pin_source(&mut self) {
        if let Some((row, col, t)) = self.source {
            let (rank, local) = (row / self.rows, row % self.rows);
            self.bands[rank][local * self.nx + col] = t;
        }
    }

    /// Boundary rows received from the neighbouring bands, or the band's own
    /// edge row at the top and bottom of the grid.
    fn halos(&self, rank: usize) -> (Vec<F>, Vec<F>) {
        let nx = self.nx;
        let band = &self.bands[rank];
        let above = match rank.checked_sub(1) {
            Some(up) => self.bands[up][(self.rows - 1) * nx..].to_vec(),
            None => band[..nx].to_vec(),
        };
        let below = match self.bands.get(rank + 1) {
            Some(down) => down[..nx].to_vec(),
            None => band[(self.rows - 1) * nx..].to_vec(),
        };
        (above, below)
    }

    pub fn advance(&mut self) {
        let nx = self.nx;
        let rows = self.rows;
        let quarter = F::lit(0.25);
        let halos: Vec<_> = (0..self.bands.len()).map(|r| self.halos(r)).collect();
        for (band, (above, below)) in self.bands.iter_mut().zip(halos) {
            let old = band.clone();
            for i in 0..rows {
                let north = if i == 0 { &above[..] } else { &old[(i - 1) * nx..i * nx] };
                let south = if i + 1 == rows { &below[..] } else { &old[(i + 1) * nx..(i + 2) * nx] };
                let row = &old[i * nx..(i + 1) * nx];
                for j in 0..nx {
                    let west = row[j.saturating_sub(1)];
                    let east = row[(j + 1).min(nx - 1)];
                    band[i * nx + j] = (north[j] + south[j] + west + east) * quarter;
                }
            }
        }
        self.pin_source();
        self.step += 1;
    }

    pub fn band_bytes(&self, rank: usize) -> Vec<u8> {
        let mut out = vec![0u8; self.bands[rank].len() * F::BYTES];
        for (v, chunk) in self.bands[rank].iter().zip(out.chunks_exact_mut(F::BYTES)) {
            v.write_le(chunk);
        }
        out
    }

    pub fn load_band(&mut self, rank: usize, bytes: &[u8], step: u64) -> Result<(), BenchError> {
        let expected = self.bands[rank].len() * F::BYTES;
        if bytes.len() != expected {
            return Err(BenchError::Mismatch(format!("rank {rank}: {} grid bytes, expected {expected}", bytes.len())));
        }
        for (v, chunk) in self.bands[rank].iter_mut().zip(bytes.chunks_exact(F::BYTES)) {
            *v = F::read_le(chunk);
        }
        self.step = step;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Heat2dReport<F> {
    pub checkpoints: Vec<(usize, CheckpointMeta)>,
    /// Grid n_d per rank for every checkpoint after the first.
    pub nd: NdMatrix,
    pub region_cdf: ChunkSizeCdf,
    pub write_cdf: ChunkSizeCdf,
    pub final_grid: Vec<F>,
    pub reference_grid: Vec<F>,
    /// (kill step, checkpoint step resumed from)
    pub resumed: Option<(u64, u64)>,
}

impl<F: Real> Heat2dReport<F> {
    /// Final grid equals the uninterrupted run bit for bit.
    pub fn bit_exact(&self) -> bool {
        self.final_grid.len() == self.reference_grid.len()
            && self
                .final_grid
                .iter()
                .zip(&self.reference_grid)
                .all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits())
    }

    pub fn write_csvs(&self, dir: &Path) -> std::io::Result<()> {
        write_csv(&dir.join("nd_matrix.csv"), ND_HEADER, self.nd.csv_rows())?;
        let mut cdf = self.region_cdf.csv_rows("regions");
        cdf.extend(self.write_cdf.csv_rows("writes"));
        write_csv(&dir.join("chunk_cdf.csv"), CDF_HEADER, cdf)?;
        let (header, rows) = checkpoint_rows(&self.checkpoints);
        write_csv(&dir.join("ckpt_log.csv"), &header, rows)
    }
}

struct Rank {
    engine: Engine,
    grid: SharedRegion,
    step: SharedRegion,
}

pub(crate) fn rank_dir(outdir: &Path, rank: usize) -> PathBuf {
    outdir.join(format!("rank{rank}"))
}

/// Removes a rank directory left over from an earlier run.
pub(crate) fn clear_dir(dir: &Path) -> std::io::Result<()> {
    match std::fs::remove_dir_all(dir) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

fn open_ranks(ranks: usize, outdir: &Path, base: &EngineConfig) -> Result<Vec<Rank>, BenchError> {
    (0..ranks)
        .map(|r| {
            let mut cfg = base.clone();
            cfg.directory = rank_dir(outdir, r);
            Ok(Rank {
                engine: Engine::new(cfg)?,
                grid: shared_region(Vec::new()),
                step: shared_region(Vec::new()),
            })
        })
        .collect()
}

/// Reads the committed file back and compares it with the live regions.
pub(crate) fn verify_committed(engine: &Engine) -> Result<(), BenchError> {
    let path = engine.committed_path().ok_or_else(|| BenchError::Mismatch("nothing committed".into()))?;
    let mut f = File::open(path)?;
    let layout = read_layout(&mut f)?;
    for &(id, _) in &layout.file_meta.datasets {
        let on_disk = read_dataset(&mut f, &layout, id)?;
        let region = engine.region(id).ok_or_else(|| BenchError::Mismatch(format!("dataset {id} unknown")))?;
        let live = region.read().unwrap();
        let size = engine.tracker(id).map_or(0, |t| t.size());
        if on_disk[..] != live[..size] {
            return Err(BenchError::Mismatch(format!("{} dataset {id}", path.display())));
        }
    }
    Ok(())
}

/// Runs the stencil with a checkpoint every `interval` steps (and at step 0),
/// one engine per rank under `outdir/rank<r>`. When `kill_at` is set all
/// in-memory state is discarded at that step and the run resumes from the
/// last checkpoint.
pub fn run_heat2d<F: Real>(
    config: &Heat2dConfig,
    engine: &EngineConfig,
    outdir: &Path,
) -> Result<Heat2dReport<F>, BenchError> {
    config.validate()?;
    if let Some(k) = config.kill_at {
        if k == 0 || k > config.steps {
            return Err(param(format!("kill step {k} outside 1..={}", config.steps)));
        }
    }

    // uninterrupted reference, with snapshots at checkpoint steps
    let mut reference = Heat2dState::<F>::new(config)?;
    let mut snapshots = BTreeMap::new();
    snapshots.insert(0, reference.clone());
    while reference.step() < config.steps {
        reference.advance();
        if reference.step() % config.interval == 0 {
            snapshots.insert(reference.step(), reference.clone());
        }
    }

    for r in 0..config.ranks {
        clear_dir(&rank_dir(outdir, r))?;
    }
    let mut state = Heat2dState::<F>::new(config)?;
    let mut ranks = open_ranks(config.ranks, outdir, engine)?;
    let mut checkpoints = Vec::new();
    let mut nd = NdMatrix::new(config.ranks);
    let mut regions = Vec::new();
    let mut writes = Vec::new();
    let mut resumed = None;
    let mut killed = false;
    let mut last_checkpoint = None;

    loop {
        if config.kill_at == Some(state.step()) && !killed {
            killed = true;
            let from = last_checkpoint.ok_or_else(|| param("kill requested before the first checkpoint"))?;
            drop(ranks);
            ranks = open_ranks(config.ranks, outdir, engine)?;
            state = Heat2dState::<F>::new(config)?;
            for (r, rank) in ranks.iter_mut().enumerate() {
                rank.engine.protect(GRID, rank.grid.clone(), 0)?;
                rank.engine.protect(STEP, rank.step.clone(), 0)?;
                rank.engine.recover()?;
                let step_bytes = rank.step.read().unwrap().clone();
                let step = u64::from_le_bytes(
                    step_bytes
                        .as_slice()
                        .try_into()
                        .map_err(|_| BenchError::Mismatch(format!("rank {r}: bad step counter")))?,
                );
                state.load_band(r, &rank.grid.read().unwrap(), step)?;
            }
            if state != snapshots[&from] {
                return Err(BenchError::Mismatch(format!("recovered state differs from step {from}")));
            }
            resumed = Some((config.kill_at.unwrap(), from));
        }

        if state.step() % config.interval == 0 && last_checkpoint != Some(state.step()) {
            let mut per_rank = Vec::with_capacity(config.ranks);
            let mut differential = true;
            for (r, rank) in ranks.iter_mut().enumerate() {
                let band = state.band_bytes(r);
                let len = band.len();
                *rank.grid.write().unwrap() = band;
                *rank.step.write().unwrap() = state.step().to_le_bytes().to_vec();
                rank.engine.protect(GRID, rank.grid.clone(), len)?;
                rank.engine.protect(STEP, rank.step.clone(), 8)?;
                let meta = rank.engine.checkpoint()?;
                if config.verify {
                    verify_committed(&rank.engine)?;
                }
                if meta.kind == CheckpointKind::Differential {
                    regions.extend_from_slice(&meta.io.extent_sizes);
                    writes.extend_from_slice(&meta.io.write_sizes);
                } else {
                    differential = false;
                }
                per_rank.push(meta.datasets.iter().find(|d| d.id == GRID).map_or(0.0, |d| d.n_d()));
                checkpoints.push((r, meta));
            }
            if differential {
                nd.push(state.step(), &per_rank);
            }
            last_checkpoint = Some(state.step());
        }

        if state.step() >= config.steps {
            break;
        }
        state.advance();
    }

    Ok(Heat2dReport {
        checkpoints,
        nd,
        region_cdf: ChunkSizeCdf::new(regions),
        write_cdf: ChunkSizeCdf::new(writes),
        final_grid: state.grid(),
        reference_grid: reference.grid(),
        resumed,
    })
}
