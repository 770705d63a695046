//! In-process training fabric: a replay buffer and a parameter server shared
//! by rollout workers, a trainer with a prefetching cache, a test worker,
//! and reuse-ratio pacing between them.

mod buffer;
mod cache;
mod meter;
mod rollout;
mod run;
mod server;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use buffer::ReplayBuffer;
pub use cache::Cache;
pub use meter::{ReuseRatioMeter, Throttle};
pub use rollout::{mix_seed, RolloutWorker};
pub use run::{run, EvalReport, Evaluator, RunOutcome, RunSpec};
pub use server::{ParameterServer, Published};

use crate::agent::{AgentError, AgentState};
use crate::env::{EnvError, Environment, GridSoccerConfig};
use crate::selfplay::{evaluate_match, MatchReport, Player, SelfPlayError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("replay buffer is empty")]
    NotReady,
    #[error("cache closed")]
    Closed,
    #[error("invalid harness config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    SelfPlay(#[from] SelfPlayError),
    #[error("worker failed: {0}")]
    Worker(String),
    #[error("metrics sink failed: {0}")]
    Sink(String),
    #[error("non-finite training signal at train step {train_step}: {detail}")]
    NonFinite {
        train_step: u64,
        detail: String,
        agent: Box<AgentState>,
    },
}

/// How the workers are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Lockstep when there is one rollout worker, threads otherwise.
    Auto,
    /// One rollout worker interleaved with the trainer on the calling
    /// thread. Bit-reproducible for a fixed seed.
    Lockstep,
    /// Rollout workers, cache and test worker on their own threads.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub reuse_ratio_target: f64,
    pub publish_interval: usize,
    pub num_rollout_workers: usize,
    /// Segments between parameter fetches in a rollout worker.
    pub refresh_interval: usize,
    /// Probability of a uniformly random action in rollouts.
    pub exploration: f64,
    pub cache_depth: usize,
    /// Segments required before the first train step.
    pub warmup_segments: usize,
    /// Train steps in the reuse-ratio window.
    pub meter_window: usize,
    pub log_interval: usize,
    /// Train steps between test-worker evaluations; 0 disables them.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub gate_games: usize,
    pub schedule: Schedule,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            buffer_capacity: 10_000,
            reuse_ratio_target: 16.0,
            publish_interval: 10,
            num_rollout_workers: 1,
            refresh_interval: 1,
            exploration: 0.1,
            cache_depth: 4,
            warmup_segments: 32,
            meter_window: 200,
            log_interval: 100,
            eval_interval: 500,
            eval_episodes: 100,
            gate_games: 50,
            schedule: Schedule::Auto,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("publish_interval", self.publish_interval),
            ("num_rollout_workers", self.num_rollout_workers),
            ("refresh_interval", self.refresh_interval),
            ("cache_depth", self.cache_depth),
            ("meter_window", self.meter_window),
            ("log_interval", self.log_interval),
            ("eval_episodes", self.eval_episodes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(HarnessError::Config(format!("{key} must be positive")));
            }
        }
        if !(self.reuse_ratio_target > 0.0 && self.reuse_ratio_target.is_finite()) {
            return Err(HarnessError::Config(format!(
                "reuse_ratio_target must be positive, got {}",
                self.reuse_ratio_target
            )));
        }
        if !(0.0..=1.0).contains(&self.exploration) {
            return Err(HarnessError::Config(format!(
                "exploration must lie in [0, 1], got {}",
                self.exploration
            )));
        }
        if self.schedule == Schedule::Lockstep && self.num_rollout_workers != 1 {
            return Err(HarnessError::Config(
                "lockstep schedule needs exactly one rollout worker".into(),
            ));
        }
        Ok(())
    }

    pub fn lockstep(&self) -> bool {
        match self.schedule {
            Schedule::Auto => self.num_rollout_workers == 1,
            Schedule::Lockstep => true,
            Schedule::Concurrent => false,
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub env_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    pub loss1: f64,
    pub loss2: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub reuse_ratio: Option<f64>,
    pub ps_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub win_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tabular_gap: Option<f64>,
}

/// Builds the environment for rollout worker `i`.
pub type EnvFactory = Arc<dyn Fn(usize) -> Result<Box<dyn Environment>, EnvError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    #[serde(flatten)]
    pub rates: MatchReport,
    pub version: u64,
}

/// Greedy play of the latest snapshot as side A against `opponent`.
pub fn test_worker(
    ps: &ParameterServer,
    config: &GridSoccerConfig,
    episodes: usize,
    opponent: &Player,
    seed: u64,
) -> Result<TestReport, HarnessError> {
    let latest = ps.fetch().ok_or(HarnessError::NotReady)?;
    let me = Player::Greedy(Arc::clone(&latest.snapshot));
    let rates = evaluate_match(config, &me, opponent, episodes, seed)?;
    Ok(TestReport {
        rates,
        version: latest.version,
    })
}
