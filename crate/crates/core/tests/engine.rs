use std::fs;
use std::path::Path;
use std::sync::Arc;

use dcpkt::engine::{FailAt, FaultAction, FaultPoint};
use dcpkt::{shared_region, CheckpointKind, DatasetId, Engine, EngineConfig, EngineError, HashAlgorithm, SharedRegion};

fn config(dir: &Path) -> EngineConfig {
    let mut cfg = EngineConfig::new(dir);
    cfg.block_size = 256;
    cfg.coalescing_threshold = 4096;
    cfg
}

fn fill(seed: u64, n: usize) -> Vec<u8> {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x as u8
        })
        .collect()
}

fn restore(dir: &Path, ids: &[(u64, usize)]) -> Vec<Vec<u8>> {
    let mut e = Engine::new(config(dir)).unwrap();
    let regions: Vec<SharedRegion> = ids.iter().map(|_| shared_region(Vec::new())).collect();
    for (&(id, _), r) in ids.iter().zip(&regions) {
        e.protect(DatasetId(id), r.clone(), 0).unwrap();
    }
    e.recover().unwrap();
    regions.iter().map(|r| r.read().unwrap().clone()).collect()
}

#[test]
fn full_then_differential_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(config(dir.path())).unwrap();
    let a = shared_region(fill(1, 10_000));
    let b = shared_region(fill(2, 3_000));
    e.protect(DatasetId(1), a.clone(), 10_000).unwrap();
    e.protect(DatasetId(2), b.clone(), 3_000).unwrap();

    let m = e.checkpoint().unwrap();
    assert_eq!(m.kind, CheckpointKind::Full);
    assert_eq!(m.payload_bytes, 13_000);

    let m = e.checkpoint().unwrap();
    assert_eq!(m.kind, CheckpointKind::Differential);
    assert_eq!(m.payload_bytes, 0);
    assert_eq!(m.regions, 0);

    a.write().unwrap()[300] ^= 0xFF;
    a.write().unwrap()[9_999] ^= 0xFF;
    let m = e.checkpoint().unwrap();
    assert_eq!(m.kind, CheckpointKind::Differential);
    assert_eq!(m.regions, 2);
    // block 1 plus the 16-byte tail block
    assert_eq!(m.payload_bytes, 256 + 10_000 - 39 * 256);

    let got = restore(dir.path(), &[(1, 0), (2, 0)]);
    assert_eq!(got[0], *a.read().unwrap());
    assert_eq!(got[1], *b.read().unwrap());

    let names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".dcpkt"))
        .collect();
    assert_eq!(names, vec!["ckpt.3.dcpkt".to_string()]);
}

#[test]
fn differential_disabled_always_full() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.dcp_enabled = false;
    let mut e = Engine::new(cfg).unwrap();
    let a = shared_region(fill(3, 1000));
    e.protect(DatasetId(1), a, 1000).unwrap();
    for _ in 0..3 {
        assert_eq!(e.checkpoint().unwrap().kind, CheckpointKind::Full);
    }
}

#[test]
fn async_duplicate_is_consumed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.async_duplicate = true;
    let mut e = Engine::new(cfg).unwrap();
    let a = shared_region(fill(4, 5000));
    e.protect(DatasetId(7), a.clone(), 5000).unwrap();
    e.checkpoint().unwrap();
    for i in 0..5 {
        a.write().unwrap()[i * 1000] = i as u8;
        assert_eq!(e.checkpoint().unwrap().kind, CheckpointKind::Differential);
    }
    drop(e);
    assert_eq!(restore(dir.path(), &[(7, 0)])[0], *a.read().unwrap());
}

#[test]
fn region_identity_and_size_checks() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(config(dir.path())).unwrap();
    let a = shared_region(vec![0; 100]);
    assert!(matches!(
        e.protect(DatasetId(1), a.clone(), 200),
        Err(EngineError::RegionTooSmall { .. })
    ));
    e.protect(DatasetId(1), a.clone(), 100).unwrap();
    e.protect(DatasetId(1), a, 50).unwrap();
    let other = shared_region(vec![0; 100]);
    assert!(matches!(e.protect(DatasetId(1), other, 100), Err(EngineError::RegionConflict(_))));
}

#[test]
fn recover_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(config(dir.path())).unwrap();
    e.protect(DatasetId(1), shared_region(Vec::new()), 0).unwrap();
    assert!(matches!(e.recover(), Err(EngineError::NoCheckpoint(_))));
}

#[test]
fn recover_requires_protected_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(config(dir.path())).unwrap();
    e.protect(DatasetId(1), shared_region(vec![1; 10]), 10).unwrap();
    e.protect(DatasetId(2), shared_region(vec![2; 10]), 10).unwrap();
    e.checkpoint().unwrap();
    let mut r = Engine::new(config(dir.path())).unwrap();
    r.protect(DatasetId(1), shared_region(Vec::new()), 0).unwrap();
    assert!(matches!(r.recover(), Err(EngineError::NotProtected(DatasetId(2)))));
}

#[test]
fn corrupted_newest_falls_back_to_older() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(config(dir.path())).unwrap();
    let a = shared_region(fill(5, 2000));
    e.protect(DatasetId(1), a.clone(), 2000).unwrap();
    e.checkpoint().unwrap();
    let old = a.read().unwrap().clone();
    // keep the old file around as if deletion never happened
    fs::copy(dir.path().join("ckpt.1.dcpkt"), dir.path().join("keep")).unwrap();
    a.write().unwrap()[0] ^= 1;
    e.checkpoint().unwrap();
    drop(e);
    fs::rename(dir.path().join("keep"), dir.path().join("ckpt.1.dcpkt")).unwrap();
    let newest = dir.path().join("ckpt.2.dcpkt");
    let mut bytes = fs::read(&newest).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xFF;
    fs::write(&newest, bytes).unwrap();
    assert_eq!(restore(dir.path(), &[(1, 0)])[0], old);
}

#[test]
fn injected_failure_keeps_committed_state() {
    for &point in &FaultPoint::ALL {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Engine::new(config(dir.path())).unwrap();
        let a = shared_region(fill(6, 4000));
        e.protect(DatasetId(1), a.clone(), 4000).unwrap();
        e.checkpoint().unwrap();
        let committed = a.read().unwrap().clone();
        e.set_faults(Arc::new(FailAt::new(point, 0, FaultAction::Fail)));
        a.write().unwrap()[1234] ^= 0x5A;
        let res = e.checkpoint();
        let newest = a.read().unwrap().clone();
        match point {
            // duplication failure falls back to a full checkpoint
            FaultPoint::Duplicate => assert_eq!(res.unwrap().kind, CheckpointKind::Full),
            _ => assert!(matches!(res, Err(EngineError::Injected(p)) if p == point), "{point:?}"),
        }
        let after_rename = matches!(point, FaultPoint::AfterRename | FaultPoint::BeforeHashCommit | FaultPoint::Duplicate);
        let expected = if after_rename { &newest } else { &committed };
        {
            let mut r = Engine::new(config(dir.path())).unwrap();
            let got = shared_region(Vec::new());
            r.protect(DatasetId(1), got.clone(), 0).unwrap();
            r.recover().unwrap();
            assert_eq!(&*got.read().unwrap(), expected, "{point:?}");
        }
        // the engine keeps working and the next checkpoint captures everything
        a.write().unwrap()[10] ^= 0x11;
        e.checkpoint().unwrap();
        drop(e);
        assert_eq!(restore(dir.path(), &[(1, 0)])[0], *a.read().unwrap(), "{point:?}");
    }
}

#[test]
fn crash_poisons_engine() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(config(dir.path())).unwrap();
    let a = shared_region(fill(7, 1000));
    e.protect(DatasetId(1), a.clone(), 1000).unwrap();
    e.checkpoint().unwrap();
    e.set_faults(Arc::new(FailAt::new(FaultPoint::AfterRegionWrite, 0, FaultAction::Crash)));
    a.write().unwrap()[0] ^= 1;
    assert!(matches!(e.checkpoint(), Err(EngineError::Crashed(_))));
    assert!(matches!(e.checkpoint(), Err(EngineError::Poisoned)));
}

#[test]
fn grow_and_shrink() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(config(dir.path())).unwrap();
    let a = shared_region(fill(8, 1000));
    e.protect(DatasetId(1), a.clone(), 1000).unwrap();
    e.checkpoint().unwrap();

    a.write().unwrap().extend(fill(9, 700));
    e.protect(DatasetId(1), a.clone(), 1700).unwrap();
    let m = e.checkpoint().unwrap();
    assert_eq!(m.kind, CheckpointKind::Differential);
    assert_eq!(e.committed_layout().unwrap().containers(DatasetId(1)).count(), 2);

    a.write().unwrap().truncate(300);
    e.protect(DatasetId(1), a.clone(), 300).unwrap();
    e.checkpoint().unwrap();
    assert_eq!(restore(dir.path(), &[(1, 0)])[0], *a.read().unwrap());

    a.write().unwrap().extend(fill(10, 1000));
    e.protect(DatasetId(1), a.clone(), 1300).unwrap();
    e.checkpoint().unwrap();
    assert_eq!(e.committed_layout().unwrap().containers(DatasetId(1)).count(), 2);
    assert_eq!(restore(dir.path(), &[(1, 0)])[0], *a.read().unwrap());

    let m = e.checkpoint_compact().unwrap();
    assert_eq!(m.kind, CheckpointKind::Full);
    assert_eq!(e.committed_layout().unwrap().containers(DatasetId(1)).count(), 1);
    assert_eq!(restore(dir.path(), &[(1, 0)])[0], *a.read().unwrap());
}

#[test]
fn new_dataset_forces_full() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(config(dir.path())).unwrap();
    e.protect(DatasetId(1), shared_region(fill(11, 500)), 500).unwrap();
    e.checkpoint().unwrap();
    e.protect(DatasetId(2), shared_region(fill(12, 500)), 500).unwrap();
    assert_eq!(e.checkpoint().unwrap().kind, CheckpointKind::Full);
    assert_eq!(e.checkpoint().unwrap().kind, CheckpointKind::Differential);
}

#[test]
fn every_algorithm_works() {
    for alg in HashAlgorithm::ALL {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.algorithm = alg;
        let mut e = Engine::new(cfg).unwrap();
        let a = shared_region(fill(13, 3000));
        e.protect(DatasetId(1), a.clone(), 3000).unwrap();
        e.checkpoint().unwrap();
        a.write().unwrap()[2999] ^= 1;
        let m = e.checkpoint().unwrap();
        assert_eq!(m.regions, 1, "{alg}");
        drop(e);
        let mut r = Engine::new({
            let mut c = config(dir.path());
            c.algorithm = alg;
            c
        })
        .unwrap();
        let got = shared_region(Vec::new());
        r.protect(DatasetId(1), got.clone(), 0).unwrap();
        r.recover().unwrap();
        assert_eq!(*got.read().unwrap(), *a.read().unwrap());
    }
}

#[test]
fn full_mode_survives_shrink_below_a_container() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.dcp_enabled = false;
    let mut e = Engine::new(cfg).unwrap();
    let a = shared_region(fill(14, 1000));
    e.protect(DatasetId(1), a.clone(), 1000).unwrap();
    e.checkpoint().unwrap();
    a.write().unwrap().extend(fill(15, 1000));
    e.protect(DatasetId(1), a.clone(), 2000).unwrap();
    e.checkpoint().unwrap();
    a.write().unwrap().truncate(500);
    e.protect(DatasetId(1), a.clone(), 500).unwrap();
    assert_eq!(e.checkpoint().unwrap().kind, CheckpointKind::Full);
    drop(e);
    assert_eq!(restore(dir.path(), &[(1, 0)])[0], *a.read().unwrap());
}

#[test]
fn fresh_engine_numbers_after_existing_files() {
    let dir = tempfile::tempdir().unwrap();
    let old = shared_region(fill(16, 600));
    let mut e = Engine::new(config(dir.path())).unwrap();
    e.protect(DatasetId(1), old.clone(), 600).unwrap();
    for _ in 0..4 {
        e.checkpoint().unwrap();
    }
    drop(e);
    let new = shared_region(fill(17, 300));
    let mut e = Engine::new(config(dir.path())).unwrap();
    e.protect(DatasetId(1), new.clone(), 300).unwrap();
    assert_eq!(e.checkpoint().unwrap().id, 5);
    drop(e);
    assert_eq!(restore(dir.path(), &[(1, 0)])[0], *new.read().unwrap());
}
