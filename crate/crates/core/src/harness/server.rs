use std::sync::Arc;

use parking_lot::RwLock;

use crate::agent::PolicySnapshot;

/// A published snapshot with its version and the checksum taken at publish
/// time.
#[derive(Debug, Clone)]
pub struct Published {
    pub snapshot: Arc<PolicySnapshot>,
    pub version: u64,
    pub checksum: u64,
}

impl Published {
    /// The snapshot still hashes to the checksum recorded with its version.
    pub fn is_consistent(&self) -> bool {
        self.snapshot.checksum() == self.checksum
    }
}

/// Latest acting parameters, versioned from 1.
#[derive(Debug, Default)]
pub struct ParameterServer {
    latest: RwLock<Option<Arc<Published>>>,
}

impl ParameterServer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, snapshot: Arc<PolicySnapshot>) -> u64 {
        let checksum = snapshot.checksum();
        let mut slot = self.latest.write();
        let version = slot.as_ref().map_or(0, |p| p.version) + 1;
        *slot = Some(Arc::new(Published {
            snapshot,
            version,
            checksum,
        }));
        version
    }

    pub fn fetch(&self) -> Option<Arc<Published>> {
        self.latest.read().clone()
    }

    /// 0 before the first publish.
    pub fn version(&self) -> u64 {
        self.latest.read().as_ref().map_or(0, |p| p.version)
    }
}
