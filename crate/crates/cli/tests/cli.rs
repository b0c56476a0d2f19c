use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcpkt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcpkt"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DCPKT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn estimate_reports_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcpkt(&["estimate", "--tw", "1.35e-3", "--th", "3.92e-5", "--nd", "0.03"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("S=-0.94009"), "{out}");
    assert!(out.trim_end().ends_with("SPEEDUP"), "{out}");
    assert_eq!(out.lines().count(), 1);
}

#[test]
fn estimate_with_corrections() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "write_relief = 2.0e-4\nnd_prime = 0.0\n").unwrap();
    let o = dcpkt(
        &["estimate", "--tw", "2.6e-3", "--th", "2.0e-4", "--nd", "0.5", "--corrections", "c.toml"],
        dir.path(),
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains("tau'=-1.100000e-3s"), "{}", stdout(&o));

    fs::write(dir.path().join("bad.toml"), "unknown = 1\n").unwrap();
    let o = dcpkt(
        &["estimate", "--tw", "1", "--th", "1", "--nd", "0.5", "--corrections", "bad.toml"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let o = dcpkt(
        &["estimate", "--tw", "1", "--th", "1", "--nd", "0.5", "--corrections", "missing.toml"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["estimate", "--tw", "0", "--th", "1", "--nd", "0.1"],
        vec!["estimate", "--tw", "1", "--th", "1", "--nd", "1.5"],
        vec!["frobnicate"],
        vec!["collide", "--b", "100", "--iters", "10"],
        vec!["collide", "--alg", "sha1"],
        vec!["heat2d", "--ny", "10", "--ranks", "3"],
        vec!["estimate", "--tw", "1"],
    ] {
        let o = dcpkt(&args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn collide_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["collide", "--alg", "adler32,crc32", "--b", "128", "--iters", "20000", "--seed", "7", "--out", "a.csv"];
    let o = dcpkt(&args, dir.path());
    assert!(o.status.success());
    let first = fs::read(dir.path().join("a.csv")).unwrap();
    dcpkt(&args, dir.path());
    assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("algorithm,block_size,pattern,iterations,collisions,rate\n"));
    let p0 = text.lines().find(|l| l.starts_with("adler32,128,0x1,")).unwrap();
    let collisions: u64 = p0.split(',').nth(4).unwrap().parse().unwrap();
    assert!(collisions > 0, "{p0}");
    assert!(text.lines().filter(|l| l.starts_with("crc32")).all(|l| l.split(',').nth(4) == Some("0")));
}

#[test]
fn heat2d_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcpkt(
        &["heat2d", "--nx", "32", "--ny", "32", "--ranks", "2", "--steps", "40", "--interval", "10", "--b", "512", "--outdir", "out"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("bit exact"));
    for f in ["nd_matrix.csv", "chunk_cdf.csv", "ckpt_log.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }

    let ckpt = fs::read_dir(dir.path().join("out/rank0"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "dcpkt"))
        .unwrap();
    let o = dcpkt(&["inspect", ckpt.to_str().unwrap()], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("algorithm  md5"), "{out}");
    assert!(out.contains("ok"));

    let o = dcpkt(&["inspect", ckpt.to_str().unwrap(), "--csv"], dir.path());
    assert!(stdout(&o).starts_with("dataset,index,file_offset,container_size,chunk_size,checksum,status\n"));

    // corrupt the last payload byte of the file
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xFF;
    fs::write(&ckpt, bytes).unwrap();
    let o = dcpkt(&["inspect", ckpt.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("MISMATCH"));

    let o = dcpkt(&["inspect", "does-not-exist"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn env_overrides_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dcpkt"))
        .args(["bench", "--pattern", "uniform", "--ranks", "2", "--bytes", "65536", "--steps", "2", "--b", "4096"])
        .current_dir(dir.path())
        .env("DCPKT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("from-env/nd_matrix.csv").exists());
    assert!(dir.path().join("from-env/rank1").is_dir());
}

#[test]
fn bench_sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcpkt(
        &["bench", "--pattern", "sweep", "--b", "1024,4096", "--bytes", "262144", "--reps", "2", "--outdir", "s"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("s/blocksize_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("1024,"));
}

#[test]
fn calibrate_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcpkt(
        &["calibrate", "--b", "4096,16384", "--bytes", "1048576", "--trials", "5", "--path", ".", "--out", "cal.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("cal.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let o = dcpkt(&["calibrate", "--trials", "0", "--bytes", "65536"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(dcpkt(&["--help"], dir.path()).status.success());
}
