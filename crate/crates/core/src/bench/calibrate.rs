use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mean_and_variance, param, BenchError};
use crate::hashing::{hash_block, HashAlgorithm};

pub const CALIBRATION_HEADER: &str = "block_size,algorithm,blocks,trials,t_w,t_w_var,t_h,t_h_var,rho";

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub block_size: usize,
    pub algorithm: HashAlgorithm,
    /// Blocks per trial.
    pub blocks: usize,
    pub trials: usize,
    /// Mean over trials of T_w / n, with T_w the time to write and fsync the
    /// whole buffer in one call.
    pub t_w: f64,
    pub t_w_var: f64,
    /// Mean over trials of the mean per-block hash time.
    pub t_h: f64,
    pub t_h_var: f64,
    pub t_w_samples: Vec<f64>,
    pub t_h_samples: Vec<f64>,
}

impl CalibrationResult {
    pub fn rho(&self) -> f64 {
        self.t_h / self.t_w
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{:.6}",
            self.block_size,
            self.algorithm,
            self.blocks,
            self.trials,
            self.t_w,
            self.t_w_var,
            self.t_h,
            self.t_h_var,
            self.rho()
        )
    }
}

fn random_buffer(len: usize, seed: u64) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    buf
}

/// Mean time to hash one block of `data`, each block timed on its own.
fn mean_block_hash_time(algorithm: HashAlgorithm, data: &[u8], b: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for block in data.chunks(b) {
        let t = Instant::now();
        std::hint::black_box(hash_block(algorithm, std::hint::black_box(block)));
        total += t.elapsed().as_secs_f64();
        n += 1;
    }
    total / n as f64
}

/// Measures t_w and t_h for block size `b` by writing `total_bytes` into a
/// scratch file under `dir` and hashing the same buffer block by block.
pub fn calibrate(
    b: usize,
    total_bytes: usize,
    dir: &Path,
    algorithm: HashAlgorithm,
    trials: usize,
) -> Result<CalibrationResult, BenchError> {
    if b == 0 || total_bytes == 0 || !total_bytes.is_multiple_of(b) {
        return Err(param(format!("total bytes {total_bytes} must be a positive multiple of the block size {b}")));
    }
    if trials == 0 {
        return Err(param("at least one trial is required"));
    }
    fs::create_dir_all(dir)?;
    let path = dir.join(".dcpkt-calibration");
    let n = total_bytes / b;
    let data = random_buffer(total_bytes, 0xCA11);

    let mut t_w = Vec::with_capacity(trials);
    let mut t_h = Vec::with_capacity(trials);
    let result = (|| {
        for _ in 0..trials {
            let start = Instant::now();
            let mut f = File::create(&path)?;
            f.write_all(&data)?;
            f.sync_all()?;
            t_w.push(start.elapsed().as_secs_f64() / n as f64);
            drop(f);
            fs::remove_file(&path)?;

            t_h.push(mean_block_hash_time(algorithm, &data, b));
        }
        Ok::<_, BenchError>(())
    })();
    let _ = fs::remove_file(&path);
    result?;

    let (w_mean, w_var) = mean_and_variance(&t_w);
    let (h_mean, h_var) = mean_and_variance(&t_h);
    Ok(CalibrationResult {
        block_size: b,
        algorithm,
        blocks: n,
        trials,
        t_w: w_mean,
        t_w_var: w_var,
        t_h: h_mean,
        t_h_var: h_var,
        t_w_samples: t_w,
        t_h_samples: t_h,
    })
}

/// Ratio of per-block hash time between two back-to-back passes over the
/// same buffer.
pub fn hash_stability(algorithm: HashAlgorithm, b: usize, blocks: usize) -> f64 {
    let data = random_buffer(b * blocks, 0x57AB);
    // warm caches and the clock before the measured passes
    mean_block_hash_time(algorithm, &data, b);
    let first = mean_block_hash_time(algorithm, &data, b);
    let second = mean_block_hash_time(algorithm, &data, b);
    second / first
}
