//! `dcpkt`: command-line front end for the checkpointing toolkit.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O failure or corrupt data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::builder::BoolishValueParser;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use dcpkt::bench::{
    block_size_sweep, calibrate, run_heat2d, run_pattern, write_csv, BenchError, Heat2dConfig, PatternKind,
    SweepWorkload, UpdatePattern, CALIBRATION_HEADER, SWEEP_HEADER,
};
use dcpkt::container::inspect_file;
use dcpkt::cost_model::{CorrectionTerms, ModelError};
use dcpkt::hashing::{avalanche_collision_test, CollisionConfig, CollisionError, ModificationMode};
use dcpkt::{CostModel, EngineConfig, EngineError, FormatError, HashAlgorithm};

#[derive(Parser)]
#[command(name = "dcpkt", version, about = "Differential checkpointing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count digest collisions of randomly modified buffers.
    Collide(CollideArgs),
    /// Measure per-block write and hash times.
    Calibrate(CalibrateArgs),
    /// Evaluate the cost model for given timings and dirty fraction.
    Estimate(EstimateArgs),
    /// Run a synthetic update pattern or the block-size sweep.
    Bench(BenchArgs),
    /// Run the heat diffusion workload with checkpointing.
    Heat2d(Heat2dArgs),
    /// Dump and verify a checkpoint file.
    Inspect(InspectArgs),
}

#[derive(clap::Args)]
struct CollideArgs {
    /// Algorithms; all when omitted.
    #[arg(long, value_delimiter = ',')]
    alg: Vec<HashAlgorithm>,
    /// Block sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048,4096,8192,16384,32768")]
    b: Vec<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    iters: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// XOR the pattern into one element per comparison instead of the whole
    /// buffer.
    #[arg(long)]
    single_element: bool,
    #[arg(long, default_value = "collisions.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct CalibrateArgs {
    #[arg(long, value_delimiter = ',', default_value = "16384")]
    b: Vec<usize>,
    /// Bytes written per trial; rounded down to a multiple of each block size.
    #[arg(long, default_value_t = 64 << 20)]
    bytes: usize,
    /// Directory on the filesystem under test.
    #[arg(long, env = "DCPKT_DIR", default_value = ".")]
    path: PathBuf,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value = "md5")]
    alg: HashAlgorithm,
    #[arg(long, default_value = "calibration.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EstimateArgs {
    /// Time to write one block (seconds).
    #[arg(long)]
    tw: f64,
    /// Time to hash one block (seconds).
    #[arg(long)]
    th: f64,
    /// Fraction of dirty blocks.
    #[arg(long)]
    nd: f64,
    #[arg(long, default_value_t = 16384)]
    b: u64,
    /// TOML file with correction terms.
    #[arg(long)]
    corrections: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrectionsFile {
    #[serde(default)]
    write_relief: f64,
    #[serde(default)]
    boundary_write_time: f64,
    #[serde(default)]
    boundary_hash_time: f64,
    /// Fraction of blocks touched only partially.
    #[serde(default)]
    nd_prime: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pattern {
    Wavefront,
    Uniform,
    StridedGrowth,
    /// Block-size sweep over the values given with `--b`.
    Sweep,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    pattern: Pattern,
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    /// Bytes per rank.
    #[arg(long, default_value_t = 16 << 20)]
    bytes: usize,
    #[arg(long, default_value_t = 10)]
    steps: u64,
    #[arg(long, default_value_t = 1)]
    interval: u64,
    /// Block size; a list for the sweep.
    #[arg(long, value_delimiter = ',', default_value = "16384")]
    b: Vec<usize>,
    #[arg(long, default_value = "md5")]
    alg: HashAlgorithm,
    #[arg(long, value_parser = BoolishValueParser::new(), default_value = "on")]
    coalesce: bool,
    #[arg(long, default_value_t = 16 << 20)]
    coalesce_threshold: usize,
    /// Delay added to every payload write call, emulating slow small writes.
    #[arg(long)]
    write_latency_us: Option<u64>,
    /// Prepare staging copies in the background.
    #[arg(long)]
    async_duplicate: bool,
    #[arg(long, default_value_t = 0.62)]
    fraction: f64,
    /// Ranks the wavefront advances per step.
    #[arg(long, default_value_t = 0.25)]
    speed: f64,
    #[arg(long, default_value_t = 0.3)]
    intensity: f64,
    #[arg(long)]
    hot_rank0: bool,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Bytes each rank grows by per checkpoint.
    #[arg(long, default_value_t = 64 << 10)]
    growth: usize,
    /// Byte positions changed between the two sweep checkpoints.
    #[arg(long, default_value_t = 256)]
    mutations: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "DCPKT_DIR", default_value = "dcpkt-out")]
    outdir: PathBuf,
}

#[derive(clap::Args)]
struct Heat2dArgs {
    #[arg(long, default_value_t = 256)]
    nx: usize,
    #[arg(long, default_value_t = 256)]
    ny: usize,
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = 50)]
    interval: u64,
    #[arg(long, default_value_t = 4096)]
    b: usize,
    #[arg(long, default_value = "md5")]
    alg: HashAlgorithm,
    /// Step at which to drop all state and resume from the last checkpoint;
    /// mid-run by default.
    #[arg(long)]
    kill_at: Option<u64>,
    #[arg(long, conflicts_with = "kill_at")]
    no_kill: bool,
    /// Single-precision cells.
    #[arg(long)]
    f32: bool,
    #[arg(long, env = "DCPKT_DIR", default_value = "dcpkt-out")]
    outdir: PathBuf,
}

#[derive(clap::Args)]
struct InspectArgs {
    file: PathBuf,
    /// One CSV row per container instead of the text dump.
    #[arg(long)]
    csv: bool,
}

/// Error with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 1, error: error.into() }
    }

    fn io(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 2, error: error.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e)
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Failure::io(e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::invalid(e)
    }
}

impl From<CollisionError> for Failure {
    fn from(e: CollisionError) -> Self {
        Failure::invalid(e)
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_)
            | EngineError::RegionConflict(_)
            | EngineError::RegionTooSmall { .. }
            | EngineError::NotProtected(_)
            | EngineError::State(_) => Failure::invalid(e),
            _ => Failure::io(e),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Param(_) => Failure::invalid(e),
            BenchError::Engine(e) => e.into(),
            _ => Failure::io(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Collide(a) => collide(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Estimate(a) => estimate(a),
        Command::Bench(a) => bench(a),
        Command::Heat2d(a) => heat2d(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn collide(a: CollideArgs) -> Outcome {
    let algorithms = if a.alg.is_empty() { HashAlgorithm::ALL.to_vec() } else { a.alg };
    let mut config = CollisionConfig::new(algorithms, a.b, a.iters, a.seed);
    if a.single_element {
        config.mode = ModificationMode::SingleElement;
    }
    let report = avalanche_collision_test(&config)?;
    write_file(&a.out, report.to_csv().as_bytes())?;
    let total: u64 = report.rows.iter().map(|r| r.collisions).sum();
    let worst = report.rows.iter().max_by(|x, y| x.rate().total_cmp(&y.rate()));
    match worst {
        Some(w) if total > 0 => println!(
            "{} rows, {total} collisions; highest rate {:e} ({} b={} p={:#x}) -> {}",
            report.rows.len(),
            w.rate(),
            w.algorithm,
            w.block_size,
            w.pattern,
            a.out.display()
        ),
        _ => println!("{} rows, no collisions -> {}", report.rows.len(), a.out.display()),
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::io)?;
    }
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::io)
}

fn calibrate_cmd(a: CalibrateArgs) -> Outcome {
    let mut rows = Vec::new();
    for &b in &a.b {
        if b == 0 {
            return Err(Failure::invalid(anyhow::anyhow!("block size must be positive")));
        }
        let bytes = a.bytes / b * b;
        let r = calibrate(b, bytes, &a.path, a.alg, a.trials)?;
        println!(
            "b={b} t_w={:.3e}s t_h={:.3e}s ({}) rho={:.6} over {} trials",
            r.t_w,
            r.t_h,
            a.alg,
            r.rho(),
            r.trials
        );
        rows.push(r.csv_row());
    }
    write_csv(&a.out, CALIBRATION_HEADER, rows).map_err(Failure::io)
}

fn estimate(a: EstimateArgs) -> Outcome {
    let model = CostModel::new(a.b, a.tw, a.th)?;
    let tau = model.tau(a.nd)?;
    let s = model.speedup(a.nd)?;
    let verdict = model.verdict(a.nd)?;
    let mut line = format!(
        "rho={:.6} eta={:.6} tau={:.6e}s S={:.5} {verdict}",
        model.rho(),
        model.eta(),
        tau,
        s
    );
    if let Some(path) = a.corrections {
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::io)?;
        let c: CorrectionsFile = toml::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(Failure::invalid)?;
        let terms = CorrectionTerms {
            write_relief: c.write_relief,
            boundary_write_time: c.boundary_write_time,
            boundary_hash_time: c.boundary_hash_time,
        };
        let corrected = model.corrected_tau(&terms, a.nd, c.nd_prime)?;
        line.push_str(&format!(" tau'={corrected:.6e}s"));
    }
    println!("{line}");
    Ok(())
}

fn engine_config(dir: &Path, b: usize, alg: HashAlgorithm) -> EngineConfig {
    let mut cfg = EngineConfig::new(dir);
    cfg.block_size = b;
    cfg.algorithm = alg;
    cfg
}

fn single_block_size(b: &[usize]) -> Result<usize, Failure> {
    match b {
        [one] => Ok(*one),
        _ => Err(Failure::invalid(anyhow::anyhow!("expected a single block size, got {}", b.len()))),
    }
}

fn bench(a: BenchArgs) -> Outcome {
    let first_b = a.b.first().copied().unwrap_or(16384);
    let mut cfg = engine_config(&a.outdir, first_b, a.alg);
    cfg.coalescing = a.coalesce;
    cfg.coalescing_threshold = a.coalesce_threshold;
    cfg.async_duplicate = a.async_duplicate;
    cfg.write_call_latency = a.write_latency_us.map(Duration::from_micros);

    let kind = match a.pattern {
        Pattern::Sweep => {
            let workload = SweepWorkload {
                bytes: a.bytes,
                mutations: a.mutations,
                repetitions: a.reps,
                seed: a.seed,
            };
            let rows = block_size_sweep(&a.b, &workload, &cfg, &a.outdir)?;
            let path = a.outdir.join("blocksize_sweep.csv");
            write_csv(&path, SWEEP_HEADER, rows.iter().map(|r| r.csv_row())).map_err(Failure::io)?;
            let best = rows.iter().min_by(|x, y| x.rel_overhead.total_cmp(&y.rel_overhead));
            if let Some(best) = best {
                println!(
                    "{} block sizes; lowest overhead {:+.3} at b={} (dcp rate {:.4}) -> {}",
                    rows.len(),
                    best.rel_overhead,
                    best.block_size,
                    best.dcp_rate,
                    path.display()
                );
            }
            return Ok(());
        }
        Pattern::Wavefront => PatternKind::Wavefront {
            speed: a.speed,
            intensity: a.intensity,
            hot_rank0: a.hot_rank0,
        },
        Pattern::Uniform => PatternKind::Uniform { fraction: a.fraction },
        Pattern::StridedGrowth => PatternKind::StridedGrowth {
            stride: a.stride,
            growth_bytes: a.growth,
        },
    };
    cfg.block_size = single_block_size(&a.b)?;
    let mut pattern = UpdatePattern::new(kind, a.ranks, a.steps);
    pattern.interval = a.interval;
    pattern.seed = a.seed;
    let report = run_pattern(&pattern, a.bytes, &cfg, &a.outdir)?;
    report.write_csvs(&a.outdir).map_err(Failure::io)?;
    let diffs: Vec<_> = report.checkpoints.iter().filter(|(_, m)| m.kind == dcpkt::CheckpointKind::Differential).collect();
    let mean_nd = diffs.iter().map(|(_, m)| m.n_d).sum::<f64>() / diffs.len().max(1) as f64;
    println!(
        "{} over {} ranks: {} checkpoints, mean n_d {:.4} -> {}",
        kind.name(),
        a.ranks,
        report.checkpoints.len(),
        mean_nd,
        a.outdir.display()
    );
    Ok(())
}

fn heat2d(a: Heat2dArgs) -> Outcome {
    let mut config = Heat2dConfig::new(a.nx, a.ny, a.ranks, a.steps, a.interval);
    config.kill_at = if a.no_kill {
        None
    } else {
        a.kill_at.or_else(|| config.default_kill_step())
    };
    let engine = engine_config(&a.outdir, a.b, a.alg);
    let (bit_exact, resumed, checkpoints) = if a.f32 {
        let r = run_heat2d::<f32>(&config, &engine, &a.outdir)?;
        r.write_csvs(&a.outdir).map_err(Failure::io)?;
        (r.bit_exact(), r.resumed, r.checkpoints.len())
    } else {
        let r = run_heat2d::<f64>(&config, &engine, &a.outdir)?;
        r.write_csvs(&a.outdir).map_err(Failure::io)?;
        (r.bit_exact(), r.resumed, r.checkpoints.len())
    };
    let resume = match resumed {
        Some((kill, from)) => format!("killed at step {kill}, resumed from {from}"),
        None => "no restart".into(),
    };
    println!(
        "heat2d {}x{} on {} ranks, {} steps: {checkpoints} checkpoints, {resume}, final grid {} -> {}",
        a.nx,
        a.ny,
        a.ranks,
        a.steps,
        if bit_exact { "bit exact" } else { "DIFFERS" },
        a.outdir.display()
    );
    if bit_exact {
        Ok(())
    } else {
        Err(Failure::io(anyhow::anyhow!("resumed run diverged from the uninterrupted run")))
    }
}

fn inspect(a: InspectArgs) -> Outcome {
    let file = fs::File::open(&a.file)
        .with_context(|| format!("opening {}", a.file.display()))
        .map_err(Failure::io)?;
    let report = inspect_file(std::io::BufReader::new(file))?;
    let layout = &report.layout;
    let status = |ok: Option<bool>| match ok {
        Some(true) => "ok",
        Some(false) => "MISMATCH",
        None => "unchecked",
    };
    if a.csv {
        println!("dataset,index,file_offset,container_size,chunk_size,checksum,status");
        for (e, ok) in layout.entries.iter().zip(&report.payload_ok) {
            println!(
                "{},{},{},{},{},{},{}",
                e.meta.dataset,
                e.meta.index,
                e.container.file_offset,
                e.container.size,
                e.meta.chunk_size,
                e.meta.payload_checksum.to_hex(),
                status(*ok)
            );
        }
    } else {
        let m = &layout.file_meta;
        println!("file       {}", a.file.display());
        println!("version    {}", m.version);
        println!("checkpoint {}", m.checkpoint_id);
        println!("block size {}", m.block_size);
        println!("algorithm  {}", m.algorithm);
        println!(
            "metadata   {} {}",
            report.stored_meta_checksum.to_hex(),
            status(Some(report.meta_checksum_ok))
        );
        for (id, size) in &m.datasets {
            println!("dataset    {id}: {size} bytes, capacity {}", layout.capacity(*id));
        }
        for (e, ok) in layout.entries.iter().zip(&report.payload_ok) {
            println!(
                "container  dataset {} #{} at {} size {} chunk {} checksum {} {}",
                e.meta.dataset,
                e.meta.index,
                e.container.file_offset,
                e.container.size,
                e.meta.chunk_size,
                e.meta.payload_checksum.to_hex(),
                status(*ok)
            );
        }
        if let Some(err) = &report.structure_error {
            println!("structure  {err}");
        }
    }
    if report.is_valid() {
        eprintln!("{}: valid", a.file.display());
        Ok(())
    } else {
        Err(Failure::io(anyhow::anyhow!("{}: checkpoint file is corrupt", a.file.display())))
    }
}
