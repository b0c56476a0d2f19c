//! Workloads and measurements: calibration of per-block write and hash
//! times, a 2D heat-diffusion stencil, synthetic update patterns and the
//! block-size sweep. Every run writes plain CSV.

mod calibrate;
mod heat2d;
mod patterns;
mod stats;
mod sweep;

use std::fs;
use std::io::{self, Write};
use std::path::Path;

pub use calibrate::{calibrate, hash_stability, CalibrationResult, CALIBRATION_HEADER};
pub use heat2d::{run_heat2d, Heat2dConfig, Heat2dReport, Heat2dState, HeatInit};
pub use patterns::{run_pattern, PatternKind, PatternReport, UpdatePattern};
pub use stats::{mean_and_variance, ChunkSizeCdf, NdMatrix, CDF_HEADER, ND_HEADER};
pub use sweep::{block_size_sweep, SweepRow, SweepWorkload, SWEEP_HEADER};

use crate::engine::{CheckpointMeta, EngineError, LOG_HEADER};
use crate::container::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("recovered state differs from the in-memory copy: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn param(msg: impl Into<String>) -> BenchError {
    BenchError::Param(msg.into())
}

/// Writes `header` followed by `rows`, one per line.
pub fn write_csv<I, S>(path: &Path, header: &str, rows: I) -> io::Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{}", row.as_ref())?;
    }
    out.flush()
}

/// Per-checkpoint log across ranks: `rank,` followed by the engine log
/// columns.
pub fn checkpoint_rows(rows: &[(usize, CheckpointMeta)]) -> (String, Vec<String>) {
    (
        format!("rank,{LOG_HEADER}"),
        rows.iter().map(|(rank, m)| format!("{rank},{}", m.csv_row())).collect(),
    )
}
