#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use softq::agent::{Algorithm, PolicySnapshot};
use softq::config::{EnvKind, ExperimentConfig};
use softq::harness::{ParameterServer, ReplayBuffer};
use softq::nn::{param_count, MlpParams};
use softq::trajectory::{TrajectorySegment, Transition};

/// A one-transition segment that carries `(producer, seq)` in its action
/// and version fields.
pub fn tagged(producer: usize, seq: u64) -> TrajectorySegment {
    TrajectorySegment::new(
        vec![Transition {
            state: vec![0.0],
            action: producer,
            reward: seq as f64,
            next_state: vec![0.0],
            done: true,
            behavior_log_prob: 0.0,
            policy_version: seq,
        }],
        false,
    )
}

pub fn tag(seg: &TrajectorySegment) -> (usize, u64) {
    let t = &seg.transitions[0];
    (t.action, t.policy_version)
}

/// Snapshot whose every parameter equals `value`.
pub fn filled_snapshot(sizes: &[usize], value: f64) -> PolicySnapshot {
    let net = MlpParams::from_flat(sizes, vec![value; param_count(sizes)]).expect("valid sizes");
    PolicySnapshot {
        q_a: net.clone(),
        q_b: net,
        alpha: 1.0,
    }
}

/// Small tabular config used by the training tests.
pub fn gridworld_config(total_steps: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(Algorithm::Qop, EnvKind::Gridworld);
    cfg.total_steps = total_steps;
    cfg.agent.hidden = vec![16];
    cfg.agent.gamma = 0.9;
    cfg.agent.alpha = 0.1;
    cfg.agent.lr = 1e-2;
    cfg.agent.tau = 0.1;
    cfg.agent.n = Some(4);
    cfg.harness.batch_size = 16;
    cfg.harness.reuse_ratio_target = 8.0;
    cfg.harness.log_interval = 50;
    cfg.harness.eval_interval = 0;
    cfg
}

/// The shipped gridworld example config.
pub fn shipped_config(name: &str) -> ExperimentConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ExperimentConfig::load(&path).expect("shipped config parses")
}

#[derive(Debug, Default)]
pub struct StressReport {
    pub pushes: u64,
    pub publishes: u64,
    pub fetches: u64,
    pub audits: u64,
    pub violations: Vec<String>,
}

/// Hammers one buffer and one parameter server from `workers` threads for
/// `duration`: producers push tagged segments, one publisher publishes
/// constant-valued snapshots, readers fetch and audit. Each invariant
/// breach is recorded as a violation.
pub fn stress(duration: Duration, workers: usize) -> StressReport {
    assert!(
        workers >= 4,
        "need producers, a publisher, a reader and an auditor"
    );
    let producers = workers - 3;
    let capacity = 64;
    let sizes = [16usize, 32, 4];
    let buffer = ReplayBuffer::new(capacity).expect("positive capacity");
    let ps = ParameterServer::new();
    let stop = AtomicBool::new(false);
    let violations = Mutex::new(Vec::<String>::new());
    let pushed: Vec<AtomicU64> = (0..producers).map(|_| AtomicU64::new(0)).collect();
    let (publishes, fetches, audits) = (AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0));
    let fail = |msg: String| {
        let mut v = violations.lock();
        if v.len() < 20 {
            v.push(msg);
        }
    };
    let started = Instant::now();

    std::thread::scope(|sc| {
        for p in 0..producers {
            let (buffer, stop, pushed) = (&buffer, &stop, &pushed);
            sc.spawn(move || {
                let mut seq = 0;
                while !stop.load(Ordering::Relaxed) {
                    buffer.push(tagged(p, seq));
                    seq += 1;
                    pushed[p].store(seq, Ordering::Release);
                }
            });
        }
        {
            let (ps, stop, publishes, fail) = (&ps, &stop, &publishes, &fail);
            sc.spawn(move || {
                let mut last = 0;
                while !stop.load(Ordering::Relaxed) {
                    let v = ps.publish(Arc::new(filled_snapshot(&sizes, (last + 1) as f64)));
                    if v != last + 1 {
                        fail(format!("publish returned version {v} after {last}"));
                    }
                    last = v;
                    publishes.fetch_add(1, Ordering::Relaxed);
                    std::thread::yield_now();
                }
            });
        }
        {
            let (ps, stop, fetches, fail) = (&ps, &stop, &fetches, &fail);
            sc.spawn(move || {
                let mut last = 0;
                while !stop.load(Ordering::Relaxed) {
                    let Some(p) = ps.fetch() else { continue };
                    if p.version < last {
                        fail(format!("fetched version {} after {last}", p.version));
                    }
                    last = p.version;
                    if !p.is_consistent() {
                        fail(format!("checksum mismatch at version {}", p.version));
                    }
                    let expect = p.version as f64;
                    if p.snapshot
                        .q_a
                        .data()
                        .iter()
                        .chain(p.snapshot.q_b.data())
                        .any(|&x| x != expect)
                    {
                        fail(format!("torn snapshot at version {}", p.version));
                    }
                    fetches.fetch_add(1, Ordering::Relaxed);
                }
            });
        }
        {
            let (buffer, stop, pushed, audits, fail) = (&buffer, &stop, &pushed, &audits, &fail);
            sc.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let (mut last_pushed, mut last_sampled) = (0, 0);
                while !stop.load(Ordering::Relaxed) {
                    let floor: Vec<u64> = pushed.iter().map(|c| c.load(Ordering::Acquire)).collect();
                    let contents = buffer.contents();
                    if contents.len() > capacity {
                        fail(format!("buffer holds {} > capacity {capacity}", contents.len()));
                    }
                    let mut next: Vec<Option<u64>> = vec![None; floor.len()];
                    for seg in &contents {
                        let (p, seq) = tag(seg);
                        if let Some(expected) = next[p] {
                            if seq != expected {
                                fail(format!("producer {p}: seq {seq} follows {}", expected - 1));
                            }
                        }
                        next[p] = Some(seq + 1);
                    }
                    let (tp, ts) = (buffer.total_pushed(), buffer.total_sampled());
                    if tp < last_pushed || ts < last_sampled {
                        fail(format!("counters went backwards: pushed {last_pushed}->{tp}, sampled {last_sampled}->{ts}"));
                    }
                    if tp < floor.iter().sum::<u64>() {
                        fail(format!("total_pushed {tp} below completed pushes"));
                    }
                    (last_pushed, last_sampled) = (tp, ts);
                    if let Ok(batch) = buffer.sample(8, &mut rng) {
                        if batch.len() != 8 {
                            fail(format!("sampled {} segments, asked for 8", batch.len()));
                        }
                    }
                    audits.fetch_add(1, Ordering::Relaxed);
                }
            });
        }
        while started.elapsed() < duration {
            std::thread::sleep(Duration::from_millis(20));
        }
        stop.store(true, Ordering::Relaxed);
    });

    let total: u64 = pushed.iter().map(|c| c.load(Ordering::Acquire)).sum();
    let mut violations = violations.into_inner();
    if buffer.total_pushed() != total {
        violations.push(format!(
            "total_pushed {} but producers pushed {total}",
            buffer.total_pushed()
        ));
    }
    let contents = buffer.contents();
    if contents.len() != capacity.min(total as usize) {
        violations.push(format!(
            "final length {} after {total} pushes",
            contents.len()
        ));
    }
    for (p, count) in pushed.iter().enumerate() {
        let held: Vec<u64> = contents
            .iter()
            .map(tag)
            .filter(|t| t.0 == p)
            .map(|t| t.1)
            .collect();
        let count = count.load(Ordering::Acquire);
        if let Some(&last) = held.last() {
            if last + 1 != count {
                violations.push(format!(
                    "producer {p}: newest held seq {last}, pushed {count}"
                ));
            }
        }
    }
    StressReport {
        pushes: total,
        publishes: publishes.into_inner(),
        fetches: fetches.into_inner(),
        audits: audits.into_inner(),
        violations,
    }
}
