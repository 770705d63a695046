//! Experiment drivers behind the command-line subcommands.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, AgentState, PolicySnapshot};
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, EnvKind, ExperimentConfig};
use crate::env::{EnvError, Environment, GridSoccerConfig, TabularEnv};
use crate::harness::{
    self, mix_seed, EnvFactory, EvalReport, Evaluator, HarnessError, MetricsRecord, RunSpec,
};
use crate::mdp::{build_chain, build_gridworld, build_random_mdp, MdpError, TabularMdp};
use crate::selfplay::{
    self, evaluate_match, GateState, MatchReport, OpponentPool, Player, SelfPlayEnv, SelfPlayError,
    SharedSelfPlay, VersionedSnapshot,
};
use crate::tabular::{soft_value_iteration, TabularError, TabularPolicy};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Harness(HarnessError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error(transparent)]
    SelfPlay(#[from] SelfPlayError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("training diverged at train step {train_step}: {detail}; diagnostic checkpoint at {checkpoint}")]
    Diverged {
        train_step: u64,
        detail: String,
        checkpoint: String,
    },
    #[error("{} worker(s) failed: {}", .0.len(), .0.join("; "))]
    Workers(Vec<String>),
}

impl ExperimentError {
    /// Configuration or request problems, as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_) | ExperimentError::Invalid(_)
        )
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Append-only JSONL writer; every record is one `write` of a full line.
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, ExperimentError> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), ExperimentError> {
        let mut line = serde_json::to_string(record).expect("serializable");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(io_err(&self.path))
    }
}

pub fn build_mdp(cfg: &ExperimentConfig) -> Result<TabularMdp, ExperimentError> {
    let e = &cfg.environment;
    let gamma = cfg.agent.gamma;
    Ok(match cfg.env {
        EnvKind::Gridworld => build_gridworld(e.width, e.height, gamma, e.slip)?,
        EnvKind::Chain => build_chain(e.chain_length, gamma)?,
        EnvKind::RandomMdp => build_random_mdp(e.mdp_seed, e.num_states, e.num_actions, gamma)?,
        EnvKind::GridSoccer => {
            return Err(ExperimentError::Invalid(
                "grid_soccer has no tabular model".into(),
            ))
        }
    })
}

/// Opponent pool seeded with `initial` as version 1, when self-play applies.
pub fn selfplay_state(
    cfg: &ExperimentConfig,
    initial: &PolicySnapshot,
) -> Result<Option<SharedSelfPlay>, ExperimentError> {
    if cfg.env != EnvKind::GridSoccer || !cfg.selfplay.enabled {
        return Ok(None);
    }
    let s = &cfg.selfplay;
    let target = VersionedSnapshot {
        version: 1,
        snapshot: Arc::new(initial.clone()),
    };
    let pool = OpponentPool::new(target, s.mix_prob, s.history_bound)?;
    let gate = GateState::new(s.gate_window, s.gate_threshold, s.min_games)?;
    Ok(Some(selfplay::shared(pool, gate)))
}

pub fn env_factory(
    cfg: &ExperimentConfig,
    shared: Option<SharedSelfPlay>,
) -> Result<EnvFactory, ExperimentError> {
    if cfg.env == EnvKind::GridSoccer {
        let soccer = cfg.soccer();
        soccer.validate()?;
        return Ok(Arc::new(move |_| {
            Ok(Box::new(SelfPlayEnv::new(soccer.clone(), shared.clone())?) as Box<dyn Environment>)
        }));
    }
    let mdp = Arc::new(build_mdp(cfg)?);
    let (max_steps, random_start) = (cfg.max_steps(), cfg.environment.random_start);
    Ok(Arc::new(move |_| {
        let env = TabularEnv::new(Arc::clone(&mdp), 0, max_steps)?;
        Ok(Box::new(if random_start {
            env.with_random_start()
        } else {
            env
        }) as Box<dyn Environment>)
    }))
}

/// `max |Q_snapshot - Q*|` over non-terminal states, for a one-hot snapshot.
pub fn snapshot_gap(
    mdp: &TabularMdp,
    q_star: &crate::tabular::QTable,
    snap: &PolicySnapshot,
) -> Result<f64, ExperimentError> {
    let ns = mdp.num_states();
    let mut gap: f64 = 0.0;
    for s in (0..ns).filter(|&s| !mdp.is_terminal(s)) {
        let row = snap
            .q_row(&crate::env::one_hot(s, ns))
            .map_err(AgentError::from)?;
        for (a, q) in row.iter().enumerate() {
            gap = gap.max((q - q_star.get(s, a)).abs());
        }
    }
    Ok(gap)
}

/// Test-worker evaluation for the configured environment.
pub fn evaluator(
    cfg: &ExperimentConfig,
    shared: Option<SharedSelfPlay>,
) -> Result<Evaluator, ExperimentError> {
    let seed = cfg.seed;
    if cfg.env == EnvKind::GridSoccer {
        let soccer = cfg.soccer();
        let episodes = cfg.harness.eval_episodes;
        let gate_games = cfg.harness.gate_games;
        return Ok(Arc::new(move |published, idx| {
            let me = Player::Greedy(Arc::clone(&published.snapshot));
            let eval_seed = mix_seed(seed, 50_000 + idx);
            let report = evaluate_match(&soccer, &me, &Player::Random, episodes, eval_seed)
                .map_err(|e| e.to_string())?;
            let mut promoted = false;
            if let (Some(shared), true) = (&shared, gate_games > 0) {
                let current = VersionedSnapshot {
                    version: published.version,
                    snapshot: Arc::clone(&published.snapshot),
                };
                promoted = selfplay::run_gate_games(
                    shared,
                    &current,
                    &soccer,
                    gate_games,
                    mix_seed(seed, 90_000 + idx),
                )
                .map_err(|e| e.to_string())?
                .promoted;
            }
            Ok(EvalReport {
                win_rate: Some(report.win_rate),
                tabular_gap: None,
                mean_return: report.mean_return,
                promoted,
            })
        }));
    }
    let mdp = build_mdp(cfg)?;
    let q_star = soft_value_iteration(&mdp, cfg.agent.alpha, 1e-12, 1_000_000)?.q;
    Ok(Arc::new(move |published, _| {
        let gap = snapshot_gap(&mdp, &q_star, &published.snapshot).map_err(|e| e.to_string())?;
        Ok(EvalReport {
            win_rate: None,
            tabular_gap: Some(gap),
            mean_return: 0.0,
            promoted: false,
        })
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub algorithm: String,
    pub env: String,
    pub seed: u64,
    pub total_steps: u64,
    pub env_steps: u64,
    pub train_steps: u64,
    pub wall_time: f64,
    pub segments_produced: u64,
    pub segments_consumed: u64,
    pub reuse_ratio: Option<f64>,
    pub ps_version: u64,
    pub cache_hit_rate: Option<f64>,
    pub alpha: f64,
    /// Greedy win rate against a uniform-random opponent (grid soccer).
    pub final_win_rate: Option<f64>,
    pub final_draw_rate: Option<f64>,
    /// Consistency gap against the exact soft optimum (tabular environments).
    pub tabular_gap: Option<f64>,
    pub promotions: u64,
    pub stopped_early: bool,
    pub worker_errors: Vec<String>,
    pub checkpoint: String,
}

/// Trains per `cfg`, writing `metrics.jsonl`, `agent.ckpt`, the opponent
/// pool when self-play is on, and `summary.json` into `out`.
pub fn run_train(
    cfg: &ExperimentConfig,
    out: &Path,
    stop: Arc<AtomicBool>,
) -> Result<TrainSummary, ExperimentError> {
    train_with_sink(cfg, out, stop, &mut |_| false)
}

/// Like [`run_train`]; `observe` sees every metrics record and may return
/// true to end the run.
pub fn train_with_sink(
    cfg: &ExperimentConfig,
    out: &Path,
    stop: Arc<AtomicBool>,
    observe: &mut dyn FnMut(&MetricsRecord) -> bool,
) -> Result<TrainSummary, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let started = Instant::now();
    let agent = AgentState::new(cfg.agent_config())?;
    let shared = selfplay_state(cfg, &agent.snapshot())?;
    let evaluator = if cfg.harness.eval_interval > 0 {
        Some(evaluator(cfg, shared.clone())?)
    } else {
        None
    };
    let spec = RunSpec {
        agent,
        total_steps: cfg.total_steps,
        seed: cfg.seed,
        harness: cfg.harness.clone(),
        env_factory: env_factory(cfg, shared.clone())?,
        evaluator,
        stop: Arc::clone(&stop),
    };
    let mut writer = MetricsWriter::create(&out.join("metrics.jsonl"))?;
    let mut sink = |rec: &MetricsRecord| -> Result<(), String> {
        writer.write(rec).map_err(|e| e.to_string())?;
        if observe(rec) {
            stop.store(true, Ordering::Release);
        }
        Ok(())
    };
    let outcome = match harness::run(spec, &mut sink) {
        Ok(o) => o,
        Err(HarnessError::NonFinite {
            train_step,
            detail,
            agent,
        }) => {
            let path = out.join("diagnostic.ckpt");
            checkpoint::save_agent(&path, &agent)?;
            return Err(ExperimentError::Diverged {
                train_step,
                detail,
                checkpoint: path.display().to_string(),
            });
        }
        Err(e) => return Err(ExperimentError::Harness(e)),
    };

    let ckpt = out.join("agent.ckpt");
    checkpoint::save_agent(&ckpt, &outcome.agent)?;
    if let Some(shared) = &shared {
        checkpoint::save_pool(&out.join("pool"), &shared.lock().pool)?;
    }
    let (mut final_win_rate, mut final_draw_rate, mut tabular_gap) = (None, None, None);
    if cfg.env == EnvKind::GridSoccer {
        let me = Player::Greedy(Arc::new(outcome.agent.snapshot()));
        let r = evaluate_match(
            &cfg.soccer(),
            &me,
            &Player::Random,
            cfg.harness.eval_episodes,
            mix_seed(cfg.seed, 77_777),
        )?;
        final_win_rate = Some(r.win_rate);
        final_draw_rate = Some(r.draw_rate);
    } else {
        tabular_gap = Some(outcome.agent.tabular_consistency_probe(&build_mdp(cfg)?)?);
    }
    let summary = TrainSummary {
        algorithm: cfg.algorithm.as_str().into(),
        env: cfg.env.as_str().into(),
        seed: cfg.seed,
        total_steps: cfg.total_steps,
        env_steps: outcome.env_steps,
        train_steps: outcome.train_steps,
        wall_time: started.elapsed().as_secs_f64(),
        segments_produced: outcome.segments_produced,
        segments_consumed: outcome.segments_consumed,
        reuse_ratio: outcome.reuse_ratio,
        ps_version: outcome.ps_version,
        cache_hit_rate: outcome.cache_hit_rate,
        alpha: outcome.agent.alpha(),
        final_win_rate,
        final_draw_rate,
        tabular_gap,
        promotions: outcome.promotions,
        stopped_early: outcome.stopped_early,
        worker_errors: outcome.worker_errors.clone(),
        checkpoint: ckpt.display().to_string(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    if !outcome.worker_errors.is_empty() {
        return Err(ExperimentError::Workers(outcome.worker_errors));
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub seed: u64,
    pub env: String,
    /// Environment steps until the threshold was first met.
    pub steps_to_threshold: Option<u64>,
    /// Train steps until the threshold was first met.
    pub grad_steps_to_threshold: Option<u64>,
    pub wall_time: f64,
    pub reached: bool,
    pub measured_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub threshold: String,
    pub rows: Vec<SweepRow>,
    /// Whether steps to threshold never decrease as the ratio grows,
    /// counting unreached runs as slowest.
    pub steps_nondecreasing_in_ratio: bool,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ratio,seed,env,steps_to_threshold,grad_steps_to_threshold,wall_time,reached,measured_ratio\n");
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{:.3},{},{}\n",
                r.ratio,
                r.seed,
                r.env,
                opt(r.steps_to_threshold.map(|v| v.to_string())),
                opt(r.grad_steps_to_threshold.map(|v| v.to_string())),
                r.wall_time,
                r.reached,
                opt(r.measured_ratio.map(|v| format!("{v:.4}"))),
            ));
        }
        s
    }
}

/// One training run per reuse ratio with identical seed and environment,
/// each stopped once it meets the performance threshold. Writes
/// `reuse_sweep.csv` and `reuse_sweep.json`.
pub fn run_reuse_sweep(
    cfg: &ExperimentConfig,
    ratios: &[f64],
    out: &Path,
    stop: Arc<AtomicBool>,
) -> Result<SweepReport, ExperimentError> {
    if ratios.len() < 2 {
        return Err(ExperimentError::Invalid(format!(
            "a sweep needs at least two ratios, got {}",
            ratios.len()
        )));
    }
    if let Some(bad) = ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(ExperimentError::Invalid(format!(
            "reuse ratio {bad} must be positive"
        )));
    }
    let soccer = cfg.env == EnvKind::GridSoccer;
    let threshold = if soccer {
        "win rate >= 0.6 vs random"
    } else {
        "tabular gap <= 0.1"
    };
    let mut rows = Vec::with_capacity(ratios.len());
    for (i, &ratio) in ratios.iter().enumerate() {
        let mut c = cfg.clone();
        c.harness.reuse_ratio_target = ratio;
        if c.harness.eval_interval == 0 {
            c.harness.eval_interval = 100;
        }
        let mut hit: Option<(u64, u64)> = None;
        let mut observe = |rec: &MetricsRecord| {
            let reached = match (rec.win_rate, rec.tabular_gap) {
                (Some(w), _) if soccer => w >= 0.6,
                (_, Some(g)) if !soccer => g <= 0.1,
                _ => false,
            };
            if reached && hit.is_none() {
                hit = Some((rec.env_steps, rec.step));
            }
            reached
        };
        let started = Instant::now();
        let summary = train_with_sink(
            &c,
            &out.join(format!("ratio_{i}")),
            Arc::clone(&stop),
            &mut observe,
        )?;
        rows.push(SweepRow {
            ratio,
            seed: c.seed,
            env: c.env.as_str().into(),
            steps_to_threshold: hit.map(|h| h.0),
            grad_steps_to_threshold: hit.map(|h| h.1),
            wall_time: started.elapsed().as_secs_f64(),
            reached: hit.is_some(),
            measured_ratio: summary.reuse_ratio,
        });
        if stop.load(Ordering::Acquire) && hit.is_none() {
            break;
        }
        stop.store(false, Ordering::Release);
    }
    let mut order: Vec<&SweepRow> = rows.iter().collect();
    order.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let key = |r: &SweepRow| r.steps_to_threshold.unwrap_or(u64::MAX);
    let steps_nondecreasing_in_ratio = order.windows(2).all(|w| key(w[0]) <= key(w[1]));
    let report = SweepReport {
        threshold: threshold.into(),
        rows,
        steps_nondecreasing_in_ratio,
    };
    let csv = out.join("reuse_sweep.csv");
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    std::fs::write(&csv, report.to_csv()).map_err(io_err(&csv))?;
    write_json(&out.join("reuse_sweep.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: String,
    pub opponent: String,
    pub seed: u64,
    #[serde(flatten)]
    pub report: MatchReport,
}

/// Greedy games of a checkpoint as side A against another checkpoint, also
/// greedy, or against a uniform-random player.
pub fn run_eval(
    soccer: &GridSoccerConfig,
    checkpoint_path: &Path,
    opponent: Option<&Path>,
    episodes: usize,
    seed: u64,
) -> Result<EvalOutput, ExperimentError> {
    if episodes == 0 {
        return Err(ExperimentError::Invalid("episodes must be positive".into()));
    }
    let me = checkpoint::load_policy(checkpoint_path)?;
    let expected = [GridSoccerConfig::OBSERVATION_LENGTH];
    if me.input_dim() != expected[0] || me.q_a.output_dim() != crate::env::soccer_action::COUNT {
        return Err(CheckpointError::Shape {
            expected: vec![
                GridSoccerConfig::OBSERVATION_LENGTH,
                crate::env::soccer_action::COUNT,
            ],
            found: vec![me.input_dim(), me.q_a.output_dim()],
        }
        .into());
    }
    let (opp, name) = match opponent {
        Some(p) => {
            let snap = checkpoint::load_policy(p)?;
            if snap.q_a.layer_sizes().first() != me.q_a.layer_sizes().first()
                || snap.q_a.output_dim() != me.q_a.output_dim()
            {
                return Err(CheckpointError::Shape {
                    expected: me.q_a.layer_sizes().to_vec(),
                    found: snap.q_a.layer_sizes().to_vec(),
                }
                .into());
            }
            (Player::Greedy(Arc::new(snap)), p.display().to_string())
        }
        None => (Player::Random, "random".to_string()),
    };
    let report = evaluate_match(soccer, &Player::Greedy(Arc::new(me)), &opp, episodes, seed)?;
    Ok(EvalOutput {
        checkpoint: checkpoint_path.display().to_string(),
        opponent: name,
        seed,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutput {
    pub env: String,
    pub alpha: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub csv: String,
}

/// Exact soft-optimal `Q*` and `pi*` as CSV (`state,action,q,pi`), plus the
/// same tables in checkpoint format.
pub fn solve_tabular(cfg: &ExperimentConfig, out: &Path) -> Result<SolveOutput, ExperimentError> {
    cfg.validate()?;
    if !cfg.env.is_tabular() {
        return Err(ExperimentError::Invalid(format!(
            "{} is not a tabular environment",
            cfg.env.as_str()
        )));
    }
    let mdp = build_mdp(cfg)?;
    let vi = soft_value_iteration(&mdp, cfg.agent.alpha, 1e-12, 1_000_000)?;
    let pi = TabularPolicy::softmax_of(&vi.q)?;
    let mut csv = String::from("state,action,q,pi\n");
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            csv.push_str(&format!(
                "{s},{a},{:.17e},{:.17e}\n",
                vi.q.get(s, a),
                pi.row(s)[a]
            ));
        }
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("q_star.csv");
    std::fs::write(&path, &csv).map_err(io_err(&path))?;
    checkpoint::save_q_table(&out.join("q_star.tbl"), &vi.q)?;
    checkpoint::save_policy_table(&out.join("pi_star.tbl"), &pi)?;
    Ok(SolveOutput {
        env: cfg.env.as_str().into(),
        alpha: cfg.agent.alpha,
        gamma: cfg.agent.gamma,
        iterations: vi.residuals.len(),
        csv: path.display().to_string(),
    })
}
