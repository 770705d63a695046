mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use softq::agent::{AgentConfig, AgentState, Algorithm};
use softq::env::{Environment, GridSoccerConfig, TabularEnv};
use softq::experiment;
use softq::harness::{
    run, test_worker, Cache, EnvFactory, HarnessConfig, HarnessError, ParameterServer,
    ReplayBuffer, ReuseRatioMeter, RolloutWorker, RunSpec, Schedule, Throttle,
};
use softq::mdp::build_random_mdp;
use softq::nn::MlpParams;
use softq::selfplay::Player;

use common::{filled_snapshot, tag, tagged};

#[test]
fn push_to_empty_buffer() {
    let b = ReplayBuffer::new(4).unwrap();
    assert!(b.is_empty());
    b.push(tagged(0, 0));
    assert_eq!(b.len(), 1);
}

#[test]
fn full_buffer_evicts_oldest() {
    let b = ReplayBuffer::new(2).unwrap();
    for seq in 0..3 {
        b.push(tagged(0, seq));
    }
    assert_eq!(b.len(), 2);
    let held: Vec<u64> = b.contents().iter().map(|s| tag(s).1).collect();
    assert_eq!(held, vec![1, 2]);
}

#[test]
fn push_counter_ignores_eviction() {
    let b = ReplayBuffer::new(3).unwrap();
    for seq in 0..17 {
        b.push(tagged(0, seq));
    }
    assert_eq!(b.total_pushed(), 17);
    assert_eq!(b.len(), 3);
}

#[test]
fn zero_capacity_rejected() {
    assert!(matches!(ReplayBuffer::new(0), Err(HarnessError::Config(_))));
}

#[test]
fn single_element_sample_repeats_it() {
    let b = ReplayBuffer::new(8).unwrap();
    b.push(tagged(3, 9));
    let batch = b.sample(5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(batch.len(), 5);
    assert!(batch.iter().all(|s| tag(s) == (3, 9)));
    assert_eq!(b.total_sampled(), 5);
}

#[test]
fn sampling_is_uniform() {
    let b = ReplayBuffer::new(10).unwrap();
    for seq in 0..10 {
        b.push(tagged(0, seq));
    }
    let draws = 100_000;
    let mut counts = [0u64; 10];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seg in b.sample(draws, &mut rng).unwrap() {
        counts[tag(&seg).1 as usize] += 1;
    }
    let (n, p) = (draws as f64, 0.1);
    let sigma = (n * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - n * p).abs() <= 3.0 * sigma,
            "element {i}: {c} draws"
        );
    }
}

#[test]
fn sampling_is_deterministic_under_a_seed() {
    let b = ReplayBuffer::new(50).unwrap();
    for seq in 0..50 {
        b.push(tagged(0, seq));
    }
    let a = b.sample(64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let c = b.sample(64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, c);
}

#[test]
fn empty_buffer_is_not_ready() {
    let b = ReplayBuffer::new(4).unwrap();
    assert!(matches!(
        b.sample(1, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(HarnessError::NotReady)
    ));
    assert_eq!(b.total_sampled(), 0);
}

#[test]
fn server_versions_count_from_one() {
    let ps = ParameterServer::new();
    assert!(ps.fetch().is_none());
    assert_eq!(ps.version(), 0);
    assert_eq!(ps.publish(Arc::new(filled_snapshot(&[2, 2], 1.0))), 1);
    assert_eq!(ps.publish(Arc::new(filled_snapshot(&[2, 2], 2.0))), 2);
    let latest = ps.fetch().unwrap();
    assert_eq!(latest.version, 2);
    assert!(latest.is_consistent());
    assert_eq!(latest.snapshot.q_a.data()[0], 2.0);
}

#[test]
fn short_concurrent_stress_finds_no_violation() {
    let report = common::stress(Duration::from_secs(2), 8);
    assert!(report.violations.is_empty(), "{:#?}", report.violations);
    assert!(
        report.pushes > 64 && report.publishes > 1 && report.fetches > 0 && report.audits > 0,
        "{report:?}"
    );
}

#[test]
fn cache_serves_staged_batches_to_a_slow_trainer() {
    let buffer = Arc::new(ReplayBuffer::new(100).unwrap());
    for seq in 0..100 {
        buffer.push(tagged(0, seq));
    }
    let cache = Cache::spawn(Arc::clone(&buffer), 8, 1, 3).unwrap();
    std::thread::sleep(Duration::from_millis(50));
    for _ in 0..100 {
        let batch = cache.take().unwrap();
        assert_eq!(batch.len(), 8);
        std::thread::sleep(Duration::from_millis(2));
    }
    let rate = cache.hit_rate().unwrap();
    assert!(rate > 0.95, "staged hit rate {rate}");
}

#[test]
fn cache_refills_with_valid_segments() {
    let buffer = Arc::new(ReplayBuffer::new(10).unwrap());
    for seq in 0..10 {
        buffer.push(tagged(1, seq));
    }
    let cache = Cache::spawn(Arc::clone(&buffer), 4, 2, 0).unwrap();
    for _ in 0..20 {
        for seg in cache.take().unwrap() {
            assert!(seg.validate(1).is_ok());
            let (p, seq) = tag(&seg);
            assert!(p == 1 && seq < 10);
        }
    }
}

#[test]
fn shutdown_unblocks_a_waiting_take() {
    let buffer = Arc::new(ReplayBuffer::new(4).unwrap());
    let cache = Cache::spawn(buffer, 4, 1, 0).unwrap();
    let stop = cache.stop_handle();
    let started = Instant::now();
    std::thread::scope(|sc| {
        sc.spawn(|| {
            std::thread::sleep(Duration::from_millis(100));
            stop.store(true, Ordering::Release);
        });
        assert!(matches!(cache.take(), Err(HarnessError::Closed)));
    });
    assert!(started.elapsed() < Duration::from_secs(5));
}

/// Three-state MDP without terminal states, so episodes always run to the
/// step limit.
fn ten_step_env() -> Box<dyn Environment> {
    let mdp = Arc::new(build_random_mdp(1, 3, 2, 0.9).unwrap());
    Box::new(TabularEnv::new(mdp, 0, 10).unwrap())
}

fn published_server() -> ParameterServer {
    let ps = ParameterServer::new();
    let net = MlpParams::init(&[3, 4, 2], 0).unwrap();
    ps.publish(Arc::new(softq::agent::PolicySnapshot {
        q_a: net.clone(),
        q_b: net,
        alpha: 1.0,
    }));
    ps
}

#[test]
fn stopped_worker_pushes_nothing() {
    let ps = published_server();
    let mut worker = RolloutWorker::new(ten_step_env(), 4, 1, 0).unwrap();
    assert!(worker.next_segment(&ps, || false).unwrap().is_none());
    assert_eq!(worker.episodes_finished(), 0);
}

#[test]
fn ten_step_episodes_split_four_four_two() {
    let ps = published_server();
    let mut worker = RolloutWorker::new(ten_step_env(), 4, 1, 0).unwrap();
    let mut lengths = Vec::new();
    for _ in 0..6 {
        let seg = worker.next_segment(&ps, || true).unwrap().unwrap();
        seg.validate(4).unwrap();
        assert!(seg.truncated);
        lengths.push(seg.len());
    }
    assert_eq!(lengths, vec![4, 4, 2, 4, 4, 2]);
    assert_eq!(worker.episodes_finished(), 2);
}

#[test]
fn refresh_every_segment_tags_current_version() {
    let ps = published_server();
    let mut worker = RolloutWorker::new(ten_step_env(), 4, 1, 0).unwrap();
    for _ in 0..5 {
        let version = ps.version();
        let seg = worker.next_segment(&ps, || true).unwrap().unwrap();
        assert!(seg.transitions.iter().all(|t| t.policy_version == version));
        let snap = ps.fetch().unwrap().snapshot.as_ref().clone();
        ps.publish(Arc::new(snap));
    }
}

#[test]
fn longer_refresh_interval_reuses_the_fetched_version() {
    let ps = published_server();
    let mut worker = RolloutWorker::new(ten_step_env(), 2, 3, 0).unwrap();
    let mut versions = Vec::new();
    for _ in 0..7 {
        let seg = worker.next_segment(&ps, || true).unwrap().unwrap();
        versions.push(seg.transitions[0].policy_version);
        let snap = ps.fetch().unwrap().snapshot.as_ref().clone();
        ps.publish(Arc::new(snap));
    }
    assert_eq!(versions, vec![1, 1, 1, 4, 4, 4, 7]);
}

#[test]
fn exploration_logs_mixture_probabilities() {
    let ps = published_server();
    let mut worker = RolloutWorker::new(ten_step_env(), 4, 1, 0)
        .unwrap()
        .with_exploration(1.0)
        .unwrap();
    let seg = worker.next_segment(&ps, || true).unwrap().unwrap();
    for t in &seg.transitions {
        assert!((t.behavior_log_prob - 0.5f64.ln()).abs() < 1e-12);
    }
    assert!(RolloutWorker::new(ten_step_env(), 4, 1, 0)
        .unwrap()
        .with_exploration(1.5)
        .is_err());
}

#[test]
fn meter_examples() {
    let mut m = ReuseRatioMeter::new(10);
    assert!(m.ratio().is_none());
    m.record(50, 100);
    assert_eq!(m.ratio(), Some(0.5));
    let mut m = ReuseRatioMeter::new(10);
    m.record(400, 100);
    assert_eq!(m.ratio(), Some(4.0));
    let mut m = ReuseRatioMeter::new(10);
    m.record(32, 0);
    assert!(m.ratio().is_none());
}

#[test]
fn meter_window_slides() {
    let mut m = ReuseRatioMeter::new(2);
    m.record(100, 1);
    m.record(10, 10);
    m.record(10, 10);
    assert_eq!(m.window_totals(), (20, 20));
    assert_eq!(m.ratio(), Some(1.0));
}

#[test]
fn throttle_rules() {
    let t = Throttle::new(2.0, 4, 3);
    assert!(!t.trainer_may_draw(0, 2));
    assert!(t.trainer_may_draw(0, 3));
    assert!(!t.trainer_may_draw(4, 3));
    assert!(t.trainer_may_draw(4, 4));
    assert!(t.roller_may_push(0, 0));
    assert!(!t.roller_may_push(0, 100));
}

fn tabular_spec(harness: HarnessConfig, total_steps: u64, seed: u64) -> RunSpec {
    let mdp = Arc::new(build_random_mdp(2, 5, 3, 0.9).unwrap());
    let factory: EnvFactory = Arc::new(move |_| {
        Ok(
            Box::new(TabularEnv::new(Arc::clone(&mdp), 0, 20)?.with_random_start())
                as Box<dyn Environment>,
        )
    });
    let mut cfg = AgentConfig::new(Algorithm::Qop, vec![5, 16, 3]);
    cfg.n = 4;
    cfg.seed = seed;
    RunSpec {
        agent: AgentState::new(cfg).unwrap(),
        total_steps,
        seed,
        harness,
        env_factory: factory,
        evaluator: None,
        stop: Arc::new(AtomicBool::new(false)),
    }
}

fn paced(target: f64, schedule: Schedule, workers: usize) -> HarnessConfig {
    HarnessConfig {
        batch_size: 8,
        reuse_ratio_target: target,
        num_rollout_workers: workers,
        schedule,
        warmup_segments: 8,
        eval_interval: 0,
        ..HarnessConfig::default()
    }
}

#[test]
fn server_version_steps_once_per_publish_interval() {
    let mut h = paced(4.0, Schedule::Lockstep, 1);
    h.publish_interval = 10;
    let out = run(tabular_spec(h, 4_000, 0), &mut |_| Ok(())).unwrap();
    assert!(out.train_steps >= 100, "{} train steps", out.train_steps);
    assert_eq!(out.ps_version, 1 + out.train_steps / 10);
}

#[test]
fn unit_target_holds_within_a_fifth() {
    let out = run(
        tabular_spec(paced(1.0, Schedule::Lockstep, 1), 20_000, 1),
        &mut |_| Ok(()),
    )
    .unwrap();
    let ratio = out.reuse_ratio.unwrap();
    assert!((ratio - 1.0).abs() <= 0.2, "measured {ratio}");
}

#[test]
fn half_target_consumes_each_segment_at_most_once_on_average() {
    let out = run(
        tabular_spec(paced(0.5, Schedule::Lockstep, 1), 20_000, 2),
        &mut |_| Ok(()),
    )
    .unwrap();
    assert!(out.reuse_ratio.unwrap() < 1.0);
}

#[test]
fn concurrent_throttle_stays_under_its_target() {
    for target in [0.5, 4.0] {
        let out = run(
            tabular_spec(paced(target, Schedule::Concurrent, 2), 20_000, 3),
            &mut |_| Ok(()),
        )
        .unwrap();
        let ratio = out.reuse_ratio.unwrap();
        assert!(ratio <= 1.25 * target, "target {target}, measured {ratio}");
        assert!(out.worker_errors.is_empty(), "{:?}", out.worker_errors);
    }
}

#[test]
fn stop_signal_ends_a_concurrent_run() {
    let spec = tabular_spec(paced(1.0, Schedule::Concurrent, 2), u64::MAX, 4);
    let stop = Arc::clone(&spec.stop);
    let started = Instant::now();
    let out = std::thread::scope(|sc| {
        sc.spawn(move || {
            std::thread::sleep(Duration::from_millis(300));
            stop.store(true, Ordering::Release);
        });
        run(spec, &mut |_| Ok(())).unwrap()
    });
    assert!(out.stopped_early);
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn test_worker_self_play_is_symmetric() {
    let soccer = GridSoccerConfig::default();
    let ps = ParameterServer::new();
    let net = MlpParams::init(&[GridSoccerConfig::OBSERVATION_LENGTH, 16, 6], 4).unwrap();
    let snap = Arc::new(softq::agent::PolicySnapshot {
        q_a: net.clone(),
        q_b: net,
        alpha: 0.1,
    });
    ps.publish(Arc::clone(&snap));
    let report = test_worker(&ps, &soccer, 1000, &Player::Greedy(snap), 9).unwrap();
    let r = &report.rates;
    assert_eq!(report.version, 1);
    assert_eq!(r.win_rate + r.draw_rate + r.loss_rate, 1.0);
    let decided = (r.wins + r.losses) as f64;
    let sigma = decided.sqrt();
    assert!(
        (r.wins as f64 - r.losses as f64).abs() <= 3.0 * sigma.max(1.0),
        "{r:?}"
    );
}

#[test]
fn test_worker_rates_sum_to_one_and_reject_zero_episodes() {
    let soccer = GridSoccerConfig::default();
    let ps = ParameterServer::new();
    assert!(matches!(
        test_worker(&ps, &soccer, 10, &Player::Random, 0),
        Err(HarnessError::NotReady)
    ));
    let net = MlpParams::init(&[GridSoccerConfig::OBSERVATION_LENGTH, 8, 6], 1).unwrap();
    ps.publish(Arc::new(softq::agent::PolicySnapshot {
        q_a: net.clone(),
        q_b: net,
        alpha: 0.1,
    }));
    for seed in 0..5 {
        let r = test_worker(&ps, &soccer, 37, &Player::Random, seed)
            .unwrap()
            .rates;
        assert_eq!(r.win_rate + r.draw_rate + r.loss_rate, 1.0);
        assert_eq!(r.wins + r.draws + r.losses, 37);
    }
    assert!(test_worker(&ps, &soccer, 0, &Player::Random, 0).is_err());
}

#[test]
fn experiment_env_factory_builds_independent_workers() {
    let cfg = common::gridworld_config(100);
    let factory = experiment::env_factory(&cfg, None).unwrap();
    let mut a = factory(0).unwrap();
    let mut b = factory(1).unwrap();
    assert_eq!(a.reset(3), b.reset(3));
    assert_eq!(a.observation_len(), 16);
}
