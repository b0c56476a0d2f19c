//! Avalanche collision test.
//!
//! Each iteration fills a fresh buffer with random 64-bit words, hashes it,
//! applies a bit pattern by XOR and hashes again. Equal digests count as a
//! collision. Block sizes are sharded across worker threads; every shard owns
//! a ChaCha8 stream derived from `(seed, shard index)`, so reports are
//! reproducible regardless of thread count.

use std::fmt::Write as _;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{hash_block, Digest, HashAlgorithm};

/// The arbitrary pattern `p5`: the 64-bit golden-ratio constant.
pub const PATTERN_ARBITRARY: u64 = 0x9E37_79B9_7F4A_7C15;

/// `p0..p5`.
pub const DEFAULT_PATTERNS: [u64; 6] = [0x1, 0x3, 0xff, 0xfff, 0xffff, PATTERN_ARBITRARY];

/// How the pattern is applied to the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModificationMode {
    /// Every 64-bit element is XORed with the pattern before the single
    /// comparison of the iteration. This is the mode whose rates line up with
    /// published Adler-32 measurements.
    #[default]
    WholeBuffer,
    /// One element at a time is XORed (the rest untouched), one comparison
    /// per element.
    SingleElement,
}

#[derive(Debug, Clone)]
pub struct CollisionConfig {
    pub algorithms: Vec<HashAlgorithm>,
    pub block_sizes: Vec<usize>,
    pub patterns: Vec<u64>,
    pub iterations: u64,
    pub seed: u64,
    pub mode: ModificationMode,
}

impl CollisionConfig {
    pub fn new(algorithms: Vec<HashAlgorithm>, block_sizes: Vec<usize>, iterations: u64, seed: u64) -> Self {
        CollisionConfig {
            algorithms,
            block_sizes,
            patterns: DEFAULT_PATTERNS.to_vec(),
            iterations,
            seed,
            mode: ModificationMode::WholeBuffer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CollisionError {
    #[error("block size {0} is not a positive multiple of 8 bytes")]
    BlockSize(usize),
    #[error("iteration count must be positive")]
    ZeroIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionRow {
    pub algorithm: HashAlgorithm,
    pub block_size: usize,
    pub pattern: u64,
    /// Number of digest comparisons performed.
    pub iterations: u64,
    pub collisions: u64,
}

impl CollisionRow {
    pub fn rate(&self) -> f64 {
        self.collisions as f64 / self.iterations as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CollisionReport {
    pub rows: Vec<CollisionRow>,
}

impl CollisionReport {
    pub fn get(&self, algorithm: HashAlgorithm, block_size: usize, pattern: u64) -> Option<&CollisionRow> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm && r.block_size == block_size && r.pattern == pattern)
    }

    pub const CSV_HEADER: &'static str = "algorithm,block_size,pattern,iterations,collisions,rate";

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:#x},{},{},{:e}",
                r.algorithm,
                r.block_size,
                r.pattern,
                r.iterations,
                r.collisions,
                r.rate()
            );
        }
        out
    }
}

pub fn avalanche_collision_test(config: &CollisionConfig) -> Result<CollisionReport, CollisionError> {
    if config.iterations == 0 {
        return Err(CollisionError::ZeroIterations);
    }
    if let Some(&bad) = config.block_sizes.iter().find(|&&b| b == 0 || b % 8 != 0) {
        return Err(CollisionError::BlockSize(bad));
    }

    let shards: Vec<Vec<CollisionRow>> = config
        .block_sizes
        .par_iter()
        .enumerate()
        .map(|(shard, &b)| run_shard(config, shard as u64, b))
        .collect();
    Ok(CollisionReport {
        rows: shards.into_iter().flatten().collect(),
    })
}

fn run_shard(config: &CollisionConfig, shard: u64, block_size: usize) -> Vec<CollisionRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(shard);

    let algs = &config.algorithms;
    let pats = &config.patterns;
    let elements = block_size / 8;
    let mut counts = vec![0u64; algs.len() * pats.len()];
    let mut original = vec![0u8; block_size];
    let mut modified = vec![0u8; block_size];
    let mut base: Vec<Digest> = Vec::with_capacity(algs.len());

    for _ in 0..config.iterations {
        rng.fill_bytes(&mut original);
        base.clear();
        base.extend(algs.iter().map(|&a| hash_block(a, &original)));

        for (pi, &pattern) in pats.iter().enumerate() {
            match config.mode {
                ModificationMode::WholeBuffer => {
                    xor_all(&original, &mut modified, pattern);
                    for (ai, &alg) in algs.iter().enumerate() {
                        if hash_block(alg, &modified) == base[ai] {
                            counts[ai * pats.len() + pi] += 1;
                        }
                    }
                }
                ModificationMode::SingleElement => {
                    modified.copy_from_slice(&original);
                    for i in 0..elements {
                        xor_element(&mut modified, i, pattern);
                        for (ai, &alg) in algs.iter().enumerate() {
                            if hash_block(alg, &modified) == base[ai] {
                                counts[ai * pats.len() + pi] += 1;
                            }
                        }
                        xor_element(&mut modified, i, pattern);
                    }
                }
            }
        }
    }

    let comparisons = match config.mode {
        ModificationMode::WholeBuffer => config.iterations,
        ModificationMode::SingleElement => config.iterations * elements as u64,
    };
    let mut rows = Vec::with_capacity(counts.len());
    for (ai, &algorithm) in algs.iter().enumerate() {
        for (pi, &pattern) in pats.iter().enumerate() {
            rows.push(CollisionRow {
                algorithm,
                block_size,
                pattern,
                iterations: comparisons,
                collisions: counts[ai * pats.len() + pi],
            });
        }
    }
    rows
}

fn xor_all(src: &[u8], dst: &mut [u8], pattern: u64) {
    for (d, s) in dst.chunks_exact_mut(8).zip(src.chunks_exact(8)) {
        let v = u64::from_le_bytes(s.try_into().unwrap()) ^ pattern;
        d.copy_from_slice(&v.to_le_bytes());
    }
}

fn xor_element(buf: &mut [u8], index: usize, pattern: u64) {
    let slot = &mut buf[index * 8..index * 8 + 8];
    let v = u64::from_le_bytes((&*slot).try_into().unwrap()) ^ pattern;
    slot.copy_from_slice(&v.to_le_bytes());
}
