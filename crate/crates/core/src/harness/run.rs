use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, TryRecvError};
use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    mix_seed, Cache, EnvFactory, HarnessConfig, HarnessError, MetricsRecord, ParameterServer,
    Published, ReplayBuffer, ReuseRatioMeter, RolloutWorker, Throttle,
};
use crate::agent::{AgentState, Algorithm, TrainInput, TrainMetrics};
use crate::trajectory::{TrajectorySegment, Transition};

const IDLE: Duration = Duration::from_micros(100);

/// Periodic evaluation of a published snapshot, run by the test worker.
/// The second argument counts evaluations from 0.
pub type Evaluator = Arc<dyn Fn(&Published, u64) -> Result<EvalReport, String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub win_rate: Option<f64>,
    pub tabular_gap: Option<f64>,
    pub mean_return: f64,
    pub promoted: bool,
}

pub struct RunSpec {
    pub agent: AgentState,
    pub total_steps: u64,
    pub seed: u64,
    pub harness: HarnessConfig,
    pub env_factory: EnvFactory,
    pub evaluator: Option<Evaluator>,
    /// Raised from outside to end the run early.
    pub stop: Arc<AtomicBool>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub agent: AgentState,
    pub train_steps: u64,
    pub env_steps: u64,
    pub segments_produced: u64,
    pub segments_consumed: u64,
    /// Consumed over produced across the whole run.
    pub reuse_ratio: Option<f64>,
    pub ps_version: u64,
    pub cache_hit_rate: Option<f64>,
    pub last_eval: Option<EvalReport>,
    pub promotions: u64,
    pub worker_errors: Vec<String>,
    pub stopped_early: bool,
}

fn train_on(
    agent: &mut AgentState,
    batch: &[TrajectorySegment],
) -> Result<TrainMetrics, crate::agent::AgentError> {
    if agent.algorithm() == Algorithm::Qop {
        agent.train_step(TrainInput::Segments(batch))
    } else {
        let flat: Vec<Transition> = batch
            .iter()
            .flat_map(|s| s.transitions.iter().cloned())
            .collect();
        agent.train_step(TrainInput::Transitions(&flat))
    }
}

struct Trainer {
    agent: AgentState,
    meter: ReuseRatioMeter,
    train_steps: u64,
    consumed: u64,
    last_produced: u64,
    last_eval: Option<EvalReport>,
    promotions: u64,
    started: Instant,
    wall_time: bool,
}

impl Trainer {
    fn step(
        &mut self,
        batch: &[TrajectorySegment],
        produced: u64,
    ) -> Result<TrainMetrics, HarnessError> {
        let metrics = match train_on(&mut self.agent, batch) {
            Ok(m) => m,
            Err(e) => {
                return Err(HarnessError::NonFinite {
                    train_step: self.train_steps + 1,
                    detail: e.to_string(),
                    agent: Box::new(self.agent.clone()),
                })
            }
        };
        let finite = [
            metrics.loss1,
            metrics.loss2,
            metrics.alpha,
            metrics.mean_entropy,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.agent.q1.is_finite()
            && self.agent.q2.is_finite();
        if !finite {
            return Err(HarnessError::NonFinite {
                train_step: self.train_steps + 1,
                detail: format!(
                    "loss1={} loss2={} alpha={}",
                    metrics.loss1, metrics.loss2, metrics.alpha
                ),
                agent: Box::new(self.agent.clone()),
            });
        }
        self.train_steps += 1;
        self.consumed += batch.len() as u64;
        self.meter
            .record(batch.len() as u64, produced - self.last_produced);
        self.last_produced = produced;
        Ok(metrics)
    }

    fn record(
        &self,
        m: &TrainMetrics,
        env_steps: u64,
        version: u64,
        eval: Option<&EvalReport>,
    ) -> MetricsRecord {
        MetricsRecord {
            step: self.train_steps,
            env_steps,
            wall_time: self.wall_time.then(|| self.started.elapsed().as_secs_f64()),
            loss1: m.loss1,
            loss2: m.loss2,
            alpha: m.alpha,
            entropy: m.mean_entropy,
            reuse_ratio: self.meter.ratio(),
            ps_version: version,
            win_rate: eval.and_then(|e| e.win_rate),
            tabular_gap: eval.and_then(|e| e.tabular_gap),
        }
    }
}

/// Runs training to `total_steps` environment steps or until `stop` is
/// raised. Every emitted metrics line goes through `sink`.
pub fn run(
    spec: RunSpec,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<(), String>,
) -> Result<RunOutcome, HarnessError> {
    spec.harness.validate()?;
    if spec.harness.lockstep() {
        run_lockstep(spec, sink)
    } else {
        run_concurrent(spec, sink)
    }
}

fn run_lockstep(
    spec: RunSpec,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<(), String>,
) -> Result<RunOutcome, HarnessError> {
    let h = &spec.harness;
    let n = spec.agent.config.n;
    let ps = ParameterServer::new();
    ps.publish(Arc::new(spec.agent.snapshot()));
    let buffer = ReplayBuffer::new(h.buffer_capacity)?;
    let throttle = Throttle::new(h.reuse_ratio_target, h.batch_size, h.warmup_segments);
    let mut roller = RolloutWorker::new(
        (spec.env_factory)(0)?,
        n,
        h.refresh_interval,
        mix_seed(spec.seed, 1),
    )?
    .with_exploration(h.exploration)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 2));
    let mut trainer = Trainer {
        agent: spec.agent,
        meter: ReuseRatioMeter::new(h.meter_window),
        train_steps: 0,
        consumed: 0,
        last_produced: 0,
        last_eval: None,
        promotions: 0,
        started: Instant::now(),
        wall_time: false,
    };
    let mut env_steps = 0u64;
    let mut produced = 0u64;
    let mut evals = 0u64;
    let mut stopped_early = false;
    'outer: loop {
        if spec.stop.load(Ordering::Acquire) {
            stopped_early = true;
            break;
        }
        while !throttle.trainer_may_draw(trainer.consumed, produced) {
            if env_steps >= spec.total_steps {
                break 'outer;
            }
            let seg = roller.next_segment(&ps, || {
                let ok = env_steps < spec.total_steps;
                env_steps += ok as u64;
                ok
            })?;
            match seg {
                Some(s) => {
                    buffer.push(s);
                    produced += 1;
                }
                None => break 'outer,
            }
        }
        let batch = buffer.sample(h.batch_size, &mut rng)?;
        let m = trainer.step(&batch, produced)?;
        if trainer.train_steps.is_multiple_of(h.publish_interval as u64) {
            ps.publish(Arc::new(trainer.agent.snapshot()));
        }
        let mut evaluated = false;
        if let Some(ev) = &spec.evaluator {
            if h.eval_interval > 0 && trainer.train_steps.is_multiple_of(h.eval_interval as u64) {
                let snapshot = Arc::new(trainer.agent.snapshot());
                let latest = Published {
                    checksum: snapshot.checksum(),
                    snapshot,
                    version: ps.version(),
                };
                let report = ev(&latest, evals).map_err(HarnessError::Worker)?;
                evals += 1;
                trainer.promotions += report.promoted as u64;
                trainer.last_eval = Some(report);
                evaluated = true;
            }
        }
        if evaluated || trainer.train_steps.is_multiple_of(h.log_interval as u64) {
            let eval = if evaluated {
                trainer.last_eval.as_ref()
            } else {
                None
            };
            sink(&trainer.record(&m, env_steps, ps.version(), eval)).map_err(HarnessError::Sink)?;
        }
    }
    Ok(RunOutcome {
        reuse_ratio: (produced > 0).then(|| trainer.consumed as f64 / produced as f64),
        train_steps: trainer.train_steps,
        env_steps,
        segments_produced: produced,
        segments_consumed: trainer.consumed,
        ps_version: ps.version(),
        cache_hit_rate: None,
        last_eval: trainer.last_eval,
        promotions: trainer.promotions,
        worker_errors: Vec::new(),
        stopped_early,
        agent: trainer.agent,
    })
}

fn run_concurrent(
    spec: RunSpec,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<(), String>,
) -> Result<RunOutcome, HarnessError> {
    let h = spec.harness.clone();
    let n = spec.agent.config.n;
    let total = spec.total_steps;
    let ps = Arc::new(ParameterServer::new());
    ps.publish(Arc::new(spec.agent.snapshot()));
    let buffer = Arc::new(ReplayBuffer::new(h.buffer_capacity)?);
    let throttle = Throttle::new(h.reuse_ratio_target, h.batch_size, h.warmup_segments);
    let env_steps = AtomicU64::new(0);
    let consumed = AtomicU64::new(0);
    let alive = AtomicUsize::new(h.num_rollout_workers);
    let halt = AtomicBool::new(false);
    let errors = Mutex::new(Vec::<String>::new());

    let mut rollers = Vec::with_capacity(h.num_rollout_workers);
    for w in 0..h.num_rollout_workers {
        rollers.push(
            RolloutWorker::new(
                (spec.env_factory)(w)?,
                n,
                h.refresh_interval,
                mix_seed(spec.seed, 100 + w as u64),
            )?
            .with_exploration(h.exploration)?,
        );
    }
    let mut cache = Cache::spawn(
        Arc::clone(&buffer),
        h.batch_size,
        h.cache_depth,
        mix_seed(spec.seed, 2),
    )?;
    let (req_tx, req_rx) = bounded::<(Arc<Published>, u64)>(1);
    let (rep_tx, rep_rx) = bounded::<Result<EvalReport, String>>(64);

    let mut trainer = Trainer {
        agent: spec.agent,
        meter: ReuseRatioMeter::new(h.meter_window),
        train_steps: 0,
        consumed: 0,
        last_produced: 0,
        last_eval: None,
        promotions: 0,
        started: Instant::now(),
        wall_time: true,
    };
    let mut stopped_early = false;

    let result: Result<(), HarnessError> = std::thread::scope(|sc| {
        for (w, mut roller) in rollers.into_iter().enumerate() {
            let (ps, buffer, env_steps, consumed, alive, halt, errors, stop) = (
                &ps, &buffer, &env_steps, &consumed, &alive, &halt, &errors, &spec.stop,
            );
            sc.spawn(move || {
                let outcome: Result<(), HarnessError> = (|| loop {
                    if halt.load(Ordering::Acquire)
                        || stop.load(Ordering::Acquire)
                        || env_steps.load(Ordering::Acquire) >= total
                    {
                        return Ok(());
                    }
                    if !throttle
                        .roller_may_push(consumed.load(Ordering::Acquire), buffer.total_pushed())
                    {
                        std::thread::sleep(IDLE);
                        continue;
                    }
                    let seg = roller.next_segment(ps, || {
                        env_steps
                            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |v| {
                                (v < total).then_some(v + 1)
                            })
                            .is_ok()
                    })?;
                    match seg {
                        Some(s) => buffer.push(s),
                        None => return Ok(()),
                    }
                })();
                if let Err(e) = outcome {
                    errors.lock().push(format!("rollout worker {w}: {e}"));
                }
                alive.fetch_sub(1, Ordering::AcqRel);
            });
        }
        if let Some(ev) = spec.evaluator.clone() {
            let halt = &halt;
            sc.spawn(move || {
                while let Ok((published, idx)) = req_rx.recv() {
                    if halt.load(Ordering::Acquire) {
                        break;
                    }
                    if rep_tx.send(ev(&published, idx)).is_err() {
                        break;
                    }
                }
            });
        } else {
            drop(req_rx);
        }

        let mut evals = 0u64;
        let body = (|| -> Result<(), HarnessError> {
            loop {
                if spec.stop.load(Ordering::Acquire) {
                    stopped_early = true;
                    return Ok(());
                }
                let produced = buffer.total_pushed();
                if !throttle.trainer_may_draw(trainer.consumed, produced) {
                    if alive.load(Ordering::Acquire) == 0 && buffer.total_pushed() == produced {
                        return Ok(());
                    }
                    std::thread::sleep(IDLE);
                    continue;
                }
                let batch = match cache.take() {
                    Ok(b) => b,
                    Err(HarnessError::Closed) => return Ok(()),
                    Err(e) => return Err(e),
                };
                let m = trainer.step(&batch, produced)?;
                consumed.store(trainer.consumed, Ordering::Release);
                if trainer.train_steps.is_multiple_of(h.publish_interval as u64) {
                    ps.publish(Arc::new(trainer.agent.snapshot()));
                }
                if spec.evaluator.is_some()
                    && h.eval_interval > 0
                    && trainer.train_steps.is_multiple_of(h.eval_interval as u64)
                {
                    let snapshot = Arc::new(trainer.agent.snapshot());
                    let latest = Arc::new(Published {
                        checksum: snapshot.checksum(),
                        snapshot,
                        version: ps.version(),
                    });
                    if req_tx.try_send((latest, evals)).is_ok() {
                        evals += 1;
                    }
                }
                let mut evaluated = false;
                match rep_rx.try_recv() {
                    Ok(Ok(report)) => {
                        trainer.promotions += report.promoted as u64;
                        trainer.last_eval = Some(report);
                        evaluated = true;
                    }
                    Ok(Err(e)) => errors.lock().push(format!("test worker: {e}")),
                    Err(TryRecvError::Empty | TryRecvError::Disconnected) => {}
                }
                if evaluated || trainer.train_steps.is_multiple_of(h.log_interval as u64) {
                    let eval = if evaluated {
                        trainer.last_eval.as_ref()
                    } else {
                        None
                    };
                    let rec =
                        trainer.record(&m, env_steps.load(Ordering::Acquire), ps.version(), eval);
                    sink(&rec).map_err(HarnessError::Sink)?;
                }
            }
        })();
        halt.store(true, Ordering::Release);
        drop(req_tx);
        cache.shutdown();
        body
    });
    result?;

    let produced = buffer.total_pushed();
    let worker_errors = errors.into_inner();
    Ok(RunOutcome {
        reuse_ratio: (produced > 0).then(|| trainer.consumed as f64 / produced as f64),
        train_steps: trainer.train_steps,
        env_steps: env_steps.load(Ordering::Acquire),
        segments_produced: produced,
        segments_consumed: trainer.consumed,
        ps_version: ps.version(),
        cache_hit_rate: cache.hit_rate(),
        last_eval: trainer.last_eval,
        promotions: trainer.promotions,
        worker_errors,
        stopped_early,
        agent: trainer.agent,
    })
}
