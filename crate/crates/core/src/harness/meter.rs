use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Sliding-window ratio of segment draws consumed by the trainer to
/// segments produced by the rollout workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseRatioMeter {
    window: VecDeque<(u64, u64)>,
    capacity: usize,
    consumed: u64,
    produced: u64,
}

impl ReuseRatioMeter {
    pub fn new(capacity: usize) -> Self {
        Self {
            window: VecDeque::with_capacity(capacity.max(1)),
            capacity: capacity.max(1),
            consumed: 0,
            produced: 0,
        }
    }

    /// One trainer tick: draws consumed and segments produced since the last one.
    pub fn record(&mut self, consumed: u64, produced: u64) {
        if self.window.len() == self.capacity {
            let (c, p) = self.window.pop_front().expect("non-empty");
            self.consumed -= c;
            self.produced -= p;
        }
        self.window.push_back((consumed, produced));
        self.consumed += consumed;
        self.produced += produced;
    }

    /// `None` when nothing was produced inside the window.
    pub fn ratio(&self) -> Option<f64> {
        (self.produced > 0).then(|| self.consumed as f64 / self.produced as f64)
    }

    pub fn window_totals(&self) -> (u64, u64) {
        (self.consumed, self.produced)
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}

/// Two-sided pacing rule that holds `consumed / produced` near a target.
///
/// The trainer may draw a batch of `batch` segments only while
/// `consumed + batch <= target * produced`. A rollout worker may push only
/// while `produced <= consumed / target + lead`. With
/// `lead >= batch / target + 1` both sides can never wait at once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throttle {
    pub target: f64,
    pub batch: u64,
    pub warmup: u64,
    pub lead: f64,
}

impl Throttle {
    pub fn new(target: f64, batch: usize, warmup: usize) -> Self {
        let batch = batch as u64;
        let warmup = warmup as u64;
        let lead = warmup as f64 + (batch as f64 / target).ceil() + 1.0;
        Self {
            target,
            batch,
            warmup,
            lead,
        }
    }

    pub fn trainer_may_draw(&self, consumed: u64, produced: u64) -> bool {
        produced >= self.warmup.max(1)
            && (consumed + self.batch) as f64 <= self.target * produced as f64
    }

    pub fn roller_may_push(&self, consumed: u64, produced: u64) -> bool {
        produced as f64 <= consumed as f64 / self.target + self.lead
    }
}
