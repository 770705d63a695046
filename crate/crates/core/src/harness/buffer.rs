use std::collections::VecDeque;

use parking_lot::Mutex;
use rand::Rng;

use super::HarnessError;
use crate::trajectory::TrajectorySegment;

#[derive(Debug)]
struct Inner {
    storage: VecDeque<TrajectorySegment>,
    total_pushed: u64,
    total_sampled: u64,
}

/// Bounded FIFO store of trajectory segments shared by all workers.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    inner: Mutex<Inner>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, HarnessError> {
        if capacity == 0 {
            return Err(HarnessError::Config(
                "buffer_capacity must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            inner: Mutex::new(Inner {
                storage: VecDeque::with_capacity(capacity.min(1 << 16)),
                total_pushed: 0,
                total_sampled: 0,
            }),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends `segment`, evicting the oldest one when full.
    pub fn push(&self, segment: TrajectorySegment) {
        let mut inner = self.inner.lock();
        if inner.storage.len() == self.capacity {
            inner.storage.pop_front();
        }
        inner.storage.push_back(segment);
        inner.total_pushed += 1;
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<TrajectorySegment>, HarnessError> {
        let mut inner = self.inner.lock();
        if inner.storage.is_empty() {
            return Err(HarnessError::NotReady);
        }
        let len = inner.storage.len();
        let batch = (0..batch_size)
            .map(|_| inner.storage[rng.random_range(0..len)].clone())
            .collect();
        inner.total_sampled += batch_size as u64;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_pushed(&self) -> u64 {
        self.inner.lock().total_pushed
    }

    pub fn total_sampled(&self) -> u64 {
        self.inner.lock().total_sampled
    }

    /// Copy of the stored segments, oldest first.
    pub fn contents(&self) -> Vec<TrajectorySegment> {
        self.inner.lock().storage.iter().cloned().collect()
    }
}
