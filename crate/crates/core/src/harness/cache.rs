use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, TryRecvError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HarnessError, ReplayBuffer};
use crate::trajectory::TrajectorySegment;

const POLL: Duration = Duration::from_millis(5);

/// Background prefetcher that keeps up to `depth` sampled batches staged
/// for the trainer.
pub struct Cache {
    rx: Receiver<Vec<TrajectorySegment>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    hits: AtomicU64,
    takes: AtomicU64,
}

impl Cache {
    pub fn spawn(
        buffer: Arc<ReplayBuffer>,
        batch_size: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        if depth == 0 || batch_size == 0 {
            return Err(HarnessError::Config(
                "cache depth and batch size must be positive".into(),
            ));
        }
        let (tx, rx) = bounded(depth);
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::Builder::new()
            .name("cache".into())
            .spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                'outer: while !flag.load(Ordering::Acquire) {
                    let mut batch = match buffer.sample(batch_size, &mut rng) {
                        Ok(b) => b,
                        Err(_) => {
                            std::thread::sleep(Duration::from_millis(1));
                            continue;
                        }
                    };
                    loop {
                        match tx.send_timeout(batch, POLL) {
                            Ok(()) => break,
                            Err(SendTimeoutError::Timeout(b)) => {
                                if flag.load(Ordering::Acquire) {
                                    break 'outer;
                                }
                                batch = b;
                            }
                            Err(SendTimeoutError::Disconnected(_)) => break 'outer,
                        }
                    }
                }
            })
            .map_err(|e| HarnessError::Worker(format!("cache thread: {e}")))?;
        Ok(Self {
            rx,
            stop,
            handle: Some(handle),
            hits: AtomicU64::new(0),
            takes: AtomicU64::new(0),
        })
    }

    /// A fully built batch; blocks until one is staged or the cache shuts down.
    pub fn take(&self) -> Result<Vec<TrajectorySegment>, HarnessError> {
        self.takes.fetch_add(1, Ordering::Relaxed);
        match self.rx.try_recv() {
            Ok(b) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(b);
            }
            Err(TryRecvError::Disconnected) => return Err(HarnessError::Closed),
            Err(TryRecvError::Empty) => {}
        }
        loop {
            if self.stop.load(Ordering::Acquire) {
                return Err(HarnessError::Closed);
            }
            match self.rx.recv_timeout(POLL) {
                Ok(b) => return Ok(b),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Err(HarnessError::Closed),
            }
        }
    }

    /// Takes served from an already staged batch.
    pub fn staged_hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn takes(&self) -> u64 {
        self.takes.load(Ordering::Relaxed)
    }

    pub fn hit_rate(&self) -> Option<f64> {
        let takes = self.takes();
        (takes > 0).then(|| self.staged_hits() as f64 / takes as f64)
    }

    /// Stops prefetching; pending and future `take` calls return
    /// [`HarnessError::Closed`].
    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    /// Signal handle that closes the cache from another thread.
    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }
}

impl Drop for Cache {
    fn drop(&mut self) {
        self.shutdown();
    }
}
