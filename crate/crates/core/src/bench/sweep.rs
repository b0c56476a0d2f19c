//! Block-size sweep: the same buffer and the same byte mutations are
//! checkpointed fully and differentially for each block size.

use std::fs;
use std::path::Path;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::patterns::{mutate_positions, random_positions};
use super::{mean_and_variance, param, BenchError};
use crate::block_tracker::DatasetId;
use crate::engine::{shared_region, CheckpointKind, Engine, EngineConfig};

pub const SWEEP_HEADER: &str = "block_size,rel_overhead,rel_overhead_sd,dcp_rate,hash_share,write_share,\
hash_table_bytes,regions,write_calls,full_s,full_sd,dcp_s,dcp_sd";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepWorkload {
    pub bytes: usize,
    /// Number of random byte positions changed between the two checkpoints.
    pub mutations: usize,
    pub repetitions: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub block_size: usize,
    /// (t_dcp − t_full) / t_full; negative is a speedup.
    pub rel_overhead: f64,
    pub rel_overhead_sd: f64,
    /// Differential payload over dataset size.
    pub dcp_rate: f64,
    /// Share of hashing in the differential checkpoint time.
    pub hash_share: f64,
    pub write_share: f64,
    pub hash_table_bytes: usize,
    pub regions: u64,
    pub write_calls: u64,
    pub full_s: f64,
    pub full_sd: f64,
    pub dcp_s: f64,
    pub dcp_sd: f64,
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{:e},{:e},{:e},{:e}",
            self.block_size,
            self.rel_overhead,
            self.rel_overhead_sd,
            self.dcp_rate,
            self.hash_share,
            self.write_share,
            self.hash_table_bytes,
            self.regions,
            self.write_calls,
            self.full_s,
            self.full_sd,
            self.dcp_s,
            self.dcp_sd
        )
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// One row per block size. Each repetition starts from the same buffer,
/// writes a baseline full checkpoint with differential mode off, then a
/// full plus a differential checkpoint with it on.
pub fn block_size_sweep(
    block_sizes: &[usize],
    workload: &SweepWorkload,
    base: &EngineConfig,
    outdir: &Path,
) -> Result<Vec<SweepRow>, BenchError> {
    if workload.bytes == 0 || workload.repetitions == 0 {
        return Err(param("workload size and repetitions must be positive"));
    }
    let mut initial = vec![0u8; workload.bytes];
    ChaCha8Rng::seed_from_u64(workload.seed).fill_bytes(&mut initial);
    let positions = random_positions(workload.bytes, workload.mutations, workload.seed ^ 0x5EED);

    let mut rows = Vec::with_capacity(block_sizes.len());
    for &b in block_sizes {
        let dir = outdir.join(format!("b{b}"));
        let mut full = Vec::new();
        let mut dcp = Vec::new();
        let mut rel = Vec::new();
        let (mut hash, mut write) = (0.0, 0.0);
        let mut last = None;
        for _ in 0..workload.repetitions {
            let _ = fs::remove_dir_all(&dir);
            let mut cfg = base.clone();
            cfg.directory = dir.clone();
            cfg.block_size = b;
            cfg.coalescing_threshold = cfg.coalescing_threshold.max(b);
            cfg.log_csv = false;

            let mut plain_cfg = cfg.clone();
            plain_cfg.dcp_enabled = false;
            plain_cfg.directory = dir.join("full");
            let mut plain = Engine::new(plain_cfg)?;
            let region = shared_region(initial.clone());
            plain.protect(DatasetId(0), region.clone(), workload.bytes)?;
            plain.checkpoint()?;
            mutate_positions(&mut region.write().unwrap(), &positions);
            let m = plain.checkpoint()?;
            let t_full = secs(m.write_time + m.hash_time);

            cfg.directory = dir.join("dcp");
            let mut engine = Engine::new(cfg)?;
            let region = shared_region(initial.clone());
            engine.protect(DatasetId(0), region.clone(), workload.bytes)?;
            engine.checkpoint()?;
            mutate_positions(&mut region.write().unwrap(), &positions);
            let m = engine.checkpoint()?;
            if m.kind != CheckpointKind::Differential {
                return Err(BenchError::Mismatch(format!("b={b}: expected a differential checkpoint")));
            }
            let t_dcp = secs(m.write_time + m.hash_time);
            full.push(t_full);
            dcp.push(t_dcp);
            rel.push((t_dcp - t_full) / t_full);
            hash += secs(m.hash_time);
            write += secs(m.write_time);
            last = Some((m, engine.hash_table_bytes()));
        }
        let _ = fs::remove_dir_all(&dir);
        let (m, table) = last.expect("at least one repetition");
        let (full_s, full_var) = mean_and_variance(&full);
        let (dcp_s, dcp_var) = mean_and_variance(&dcp);
        let (rel_mean, rel_var) = mean_and_variance(&rel);
        let busy = hash + write;
        rows.push(SweepRow {
            block_size: b,
            rel_overhead: rel_mean,
            rel_overhead_sd: rel_var.sqrt(),
            dcp_rate: m.payload_bytes as f64 / workload.bytes as f64,
            hash_share: if busy > 0.0 { hash / busy } else { 0.0 },
            write_share: if busy > 0.0 { write / busy } else { 0.0 },
            hash_table_bytes: table,
            regions: m.regions,
            write_calls: m.io.write_calls,
            full_s,
            full_sd: full_var.sqrt(),
            dcp_s,
            dcp_sd: dcp_var.sqrt(),
        });
    }
    Ok(rows)
}
