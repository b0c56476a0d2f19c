//! Synthetic update patterns driving one engine per rank.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::heat2d::{clear_dir, rank_dir, verify_committed};
use super::stats::{ChunkSizeCdf, NdMatrix, CDF_HEADER, ND_HEADER};
use super::{checkpoint_rows, param, write_csv, BenchError};
use crate::block_tracker::DatasetId;
use crate::engine::{shared_region, CheckpointKind, CheckpointMeta, Engine, EngineConfig, SharedRegion};

pub const DATA: DatasetId = DatasetId(0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatternKind {
    /// A front spreading from rank 0 at `speed` ranks per step; every reached
    /// rank mutates a random `intensity` share of its blocks each step. With
    /// `hot_rank0`, rank 0 mutates 80% of its blocks every step.
    Wavefront { speed: f64, intensity: f64, hot_rank0: bool },
    /// The same `fraction` of blocks on every rank, fixed for the whole run.
    Uniform { fraction: f64 },
    /// Every `stride`-th block, shifted by one block per step; each rank
    /// grows by `growth_bytes` before every checkpoint.
    StridedGrowth { stride: usize, growth_bytes: usize },
}

impl PatternKind {
    pub fn name(&self) -> &'static str {
        match self {
            PatternKind::Wavefront { .. } => "wavefront",
            PatternKind::Uniform { .. } => "uniform",
            PatternKind::StridedGrowth { .. } => "strided-growth",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePattern {
    pub kind: PatternKind,
    pub ranks: usize,
    pub steps: u64,
    /// Checkpoint every `interval` steps, plus one full checkpoint at step 0.
    pub interval: u64,
    pub seed: u64,
    /// Compare every committed file against the in-memory buffers.
    pub verify: bool,
}

impl UpdatePattern {
    pub fn new(kind: PatternKind, ranks: usize, steps: u64) -> Self {
        UpdatePattern { kind, ranks, steps, interval: 1, seed: 1, verify: true }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.ranks == 0 || self.interval == 0 {
            return Err(param("rank count and interval must be positive"));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(param(format!("{name} {v} outside [0, 1]")))
            }
        };
        match self.kind {
            PatternKind::Wavefront { speed, intensity, .. } => {
                unit("intensity", intensity)?;
                if !(speed.is_finite() && speed > 0.0) {
                    return Err(param(format!("front speed {speed} must be positive")));
                }
            }
            PatternKind::Uniform { fraction } => unit("fraction", fraction)?,
            PatternKind::StridedGrowth { stride, .. } => {
                if stride == 0 {
                    return Err(param("stride must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PatternReport {
    pub checkpoints: Vec<(usize, CheckpointMeta)>,
    pub nd: NdMatrix,
    /// Containers per rank after each checkpoint, `[rank][checkpoint]`.
    pub containers: Vec<Vec<usize>>,
    pub region_cdf: ChunkSizeCdf,
    pub write_cdf: ChunkSizeCdf,
    /// Blocks each rank's UNIFORM pattern mutates; empty for other kinds.
    pub uniform_blocks: Vec<usize>,
}

impl PatternReport {
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
    data: SharedRegion,
    rng: ChaCha8Rng,
    /// Blocks mutated by the UNIFORM pattern.
    chosen: Vec<usize>,
}

fn touch(buf: &mut [u8], block: usize, b: usize, step: u64) {
    let start = block * b;
    let end = (start + b).min(buf.len());
    if start < end {
        let at = start + (step as usize).wrapping_mul(7919) % (end - start);
        buf[at] = buf[at].wrapping_add(1);
    }
}

/// Runs `pattern` over `bytes_per_rank` bytes per rank, one engine per rank
/// under `outdir/rank<r>`.
pub fn run_pattern(
    pattern: &UpdatePattern,
    bytes_per_rank: usize,
    base: &EngineConfig,
    outdir: &Path,
) -> Result<PatternReport, BenchError> {
    pattern.validate()?;
    if bytes_per_rank == 0 {
        return Err(param("bytes per rank must be positive"));
    }
    let b = base.block_size;
    let mut ranks = (0..pattern.ranks)
        .map(|r| {
            let mut cfg = base.clone();
            cfg.directory = rank_dir(outdir, r);
            clear_dir(&cfg.directory)?;
            let mut rng = ChaCha8Rng::seed_from_u64(pattern.seed);
            rng.set_stream(r as u64);
            let mut data = vec![0u8; bytes_per_rank];
            rng.fill_bytes(&mut data);
            let blocks = bytes_per_rank.div_ceil(b);
            let chosen = match pattern.kind {
                PatternKind::Uniform { fraction } => {
                    let k = (fraction * blocks as f64).round() as usize;
                    let mut v = sample(&mut rng, blocks, k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => Vec::new(),
            };
            Ok(Rank { engine: Engine::new(cfg)?, data: shared_region(data), rng, chosen })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;

    let mut checkpoints = Vec::new();
    let mut nd = NdMatrix::new(pattern.ranks);
    let mut containers = vec![Vec::new(); pattern.ranks];
    let mut regions = Vec::new();
    let mut writes = Vec::new();

    for step in 0..=pattern.steps {
        if step > 0 {
            for (r, rank) in ranks.iter_mut().enumerate() {
                let mut buf = rank.data.write().unwrap();
                let blocks = buf.len().div_ceil(b);
                match pattern.kind {
                    PatternKind::Uniform { .. } => {
                        for &i in &rank.chosen {
                            touch(&mut buf, i, b, step);
                        }
                    }
                    PatternKind::Wavefront { speed, intensity, hot_rank0 } => {
                        let share = if hot_rank0 && r == 0 {
                            0.8
                        } else if (r as f64) <= step as f64 * speed {
                            intensity
                        } else {
                            0.0
                        };
                        let k = (share * blocks as f64).round() as usize;
                        for i in sample(&mut rank.rng, blocks, k) {
                            touch(&mut buf, i, b, step);
                        }
                    }
                    PatternKind::StridedGrowth { stride, .. } => {
                        let mut i = step as usize % stride;
                        while i < blocks {
                            touch(&mut buf, i, b, step);
                            i += stride;
                        }
                    }
                }
            }
        }
        if step % pattern.interval != 0 {
            continue;
        }

        let mut per_rank = Vec::with_capacity(pattern.ranks);
        let mut differential = true;
        for (r, rank) in ranks.iter_mut().enumerate() {
            if let (PatternKind::StridedGrowth { growth_bytes, .. }, true) = (pattern.kind, step > 0) {
                let mut buf = rank.data.write().unwrap();
                let old = buf.len();
                buf.resize(old + growth_bytes, 0);
                rank.rng.fill_bytes(&mut buf[old..]);
            }
            let len = rank.data.read().unwrap().len();
            rank.engine.protect(DATA, rank.data.clone(), len)?;
            let meta = rank.engine.checkpoint()?;
            if pattern.verify {
                verify_committed(&rank.engine)?;
            }
            if meta.kind == CheckpointKind::Differential {
                regions.extend_from_slice(&meta.io.extent_sizes);
                writes.extend_from_slice(&meta.io.write_sizes);
            } else {
                differential = false;
            }
            containers[r].push(rank.engine.committed_layout().map_or(0, |l| l.containers(DATA).count()));
            per_rank.push(meta.datasets.first().map_or(0.0, |d| d.n_d()));
            checkpoints.push((r, meta));
        }
        if differential {
            nd.push(step, &per_rank);
        }
    }

    Ok(PatternReport {
        checkpoints,
        nd,
        containers,
        region_cdf: ChunkSizeCdf::new(regions),
        write_cdf: ChunkSizeCdf::new(writes),
        uniform_blocks: ranks.iter().map(|r| r.chosen.len()).collect(),
    })
}

/// Random single-byte mutation helper shared with the sweep.
pub(crate) fn mutate_positions(buf: &mut [u8], positions: &[usize]) {
    for &p in positions {
        buf[p] = buf[p].wrapping_add(1);
    }
}

pub(crate) fn random_positions(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<usize> = (0..count).map(|_| rng.gen_range(0..len)).collect();
    v.sort_unstable();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path) -> EngineConfig {
        let mut cfg = EngineConfig::new(dir);
        cfg.block_size = 1024;
        cfg.coalescing_threshold = 64 * 1024;
        cfg.log_csv = false;
        cfg
    }

    #[test]
    fn validation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = [
            PatternKind::Uniform { fraction: 1.5 },
            PatternKind::Wavefront { speed: 0.0, intensity: 0.5, hot_rank0: false },
            PatternKind::StridedGrowth { stride: 0, growth_bytes: 1 },
        ];
        for kind in bad {
            let p = UpdatePattern::new(kind, 2, 2);
            assert!(matches!(run_pattern(&p, 4096, &config(dir.path()), dir.path()), Err(BenchError::Param(_))));
        }
    }

    #[test]
    fn uniform_fraction_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = UpdatePattern::new(PatternKind::Uniform { fraction: 0.62 }, 3, 4);
        let rep = run_pattern(&p, 100 * 1024, &config(dir.path()), dir.path()).unwrap();
        assert_eq!(rep.uniform_blocks, vec![62; 3]);
        for row in &rep.nd.values {
            assert!(row.iter().all(|&v| (v - 0.62).abs() < 1e-12), "{row:?}");
        }
    }

    #[test]
    fn wavefront_widens() {
        let dir = tempfile::tempdir().unwrap();
        let kind = PatternKind::Wavefront { speed: 0.5, intensity: 0.3, hot_rank0: false };
        let p = UpdatePattern::new(kind, 6, 10);
        let rep = run_pattern(&p, 16 * 1024, &config(dir.path()), dir.path()).unwrap();
        let active: Vec<usize> = (0..rep.nd.steps.len()).map(|c| rep.nd.active_ranks(c)).collect();
        assert!(active.windows(2).all(|w| w[0] <= w[1]), "{active:?}");
        assert!(active[0] < 6);
        assert_eq!(*active.last().unwrap(), 6);
    }

    #[test]
    fn growth_adds_one_container_per_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let kind = PatternKind::StridedGrowth { stride: 4, growth_bytes: 3000 };
        let p = UpdatePattern::new(kind, 2, 5);
        let rep = run_pattern(&p, 8192, &config(dir.path()), dir.path()).unwrap();
        for row in &rep.containers {
            assert_eq!(row, &vec![1, 2, 3, 4, 5, 6]);
        }
    }
}
