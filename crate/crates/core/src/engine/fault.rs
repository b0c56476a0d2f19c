//! Fault injection hooks for the commit protocol.

use std::collections::HashMap;
use std::sync::Mutex;

/// Points in the checkpoint protocol where a fault can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultPoint {
    /// Inside the duplication of the committed file.
    Duplicate,
    /// Differential update: staging copy is ready, nothing written yet.
    AfterDuplicate,
    /// Differential update: new containers appended to the staging file.
    AfterContainerAppend,
    /// Differential update: one dirty region handed to the writer.
    AfterRegionWrite,
    /// Full checkpoint: temporary file completely written.
    AfterPayloadWrite,
    /// Differential update: header and chunk records rewritten.
    AfterMetadataWrite,
    AfterFsync,
    BeforeRename,
    /// New file committed, previous file not yet deleted.
    AfterRename,
    /// Previous file deleted, block digests not yet committed.
    BeforeHashCommit,
}

impl FaultPoint {
    pub const ALL: [FaultPoint; 10] = [
        FaultPoint::Duplicate,
        FaultPoint::AfterDuplicate,
        FaultPoint::AfterContainerAppend,
        FaultPoint::AfterRegionWrite,
        FaultPoint::AfterPayloadWrite,
        FaultPoint::AfterMetadataWrite,
        FaultPoint::AfterFsync,
        FaultPoint::BeforeRename,
        FaultPoint::AfterRename,
        FaultPoint::BeforeHashCommit,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    Continue,
    /// Report an I/O error; the engine cleans up and stays usable.
    Fail,
    /// Stop dead: no cleanup, files are left as they are. The engine refuses
    /// further work and must be dropped.
    Crash,
}

pub trait FaultInjector: Send + Sync {
    fn at(&self, point: FaultPoint) -> FaultAction;
}

#[derive(Debug, Default)]
pub struct NoFaults;

impl FaultInjector for NoFaults {
    fn at(&self, _: FaultPoint) -> FaultAction {
        FaultAction::Continue
    }
}

/// Triggers `action` on the `nth` (0-based) visit of `point`, once.
#[derive(Debug)]
pub struct FailAt {
    pub point: FaultPoint,
    pub nth: usize,
    pub action: FaultAction,
    visits: Mutex<HashMap<FaultPoint, usize>>,
}

impl FailAt {
    pub fn new(point: FaultPoint, nth: usize, action: FaultAction) -> Self {
        FailAt { point, nth, action, visits: Mutex::new(HashMap::new()) }
    }

    pub fn visits(&self, point: FaultPoint) -> usize {
        self.visits.lock().unwrap().get(&point).copied().unwrap_or(0)
    }
}

impl FaultInjector for FailAt {
    fn at(&self, point: FaultPoint) -> FaultAction {
        let mut visits = self.visits.lock().unwrap();
        let n = visits.entry(point).or_insert(0);
        let hit = point == self.point && *n == self.nth;
        *n += 1;
        if hit {
            self.action
        } else {
            FaultAction::Continue
        }
    }
}
