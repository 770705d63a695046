//! Experiment configuration: TOML with top-level `algorithm`, `env`, `seed`
//! and `total_steps`, and the sections `[environment]`, `[agent]`,
//! `[harness]` and `[selfplay]`.
//!
//! ```toml
//! algorithm = "qop"
//! env = "grid_soccer"
//!
//! [agent]
//! hidden = [64, 64]
//! gamma = 0.99
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, Algorithm, AlphaMode, BackupScheme};
use crate::env::GridSoccerConfig;
use crate::harness::{HarnessConfig, Schedule};
use crate::selfplay::{
    DEFAULT_GATE_THRESHOLD, DEFAULT_GATE_WINDOW, DEFAULT_HISTORY_BOUND, DEFAULT_MIN_GAMES,
    DEFAULT_MIX_PROB,
};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Missing { path: String, message: String },
    #[error("malformed config at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown key `{key}`{}{}", at_line(*.line), suggestion.as_ref().map(|s| format!("; did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey {
        key: String,
        line: Option<usize>,
        suggestion: Option<String>,
    },
    #[error("invalid value for `{key}`{}: {message}", at_line(*.line))]
    Range {
        key: String,
        line: Option<usize>,
        message: String,
    },
    #[error("cannot serialize config: {0}")]
    Serialize(String),
}

fn at_line(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Gridworld,
    Chain,
    RandomMdp,
    GridSoccer,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Gridworld => "gridworld",
            EnvKind::Chain => "chain",
            EnvKind::RandomMdp => "random_mdp",
            EnvKind::GridSoccer => "grid_soccer",
        }
    }

    pub fn is_tabular(self) -> bool {
        self != EnvKind::GridSoccer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentSection {
    /// Gridworld width and height.
    pub width: usize,
    pub height: usize,
    /// Probability that a gridworld move goes in another direction.
    pub slip: f64,
    pub chain_length: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub mdp_seed: u64,
    /// Episode step limit; 100 for tabular environments and 40 for grid
    /// soccer when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Tabular episodes start in a uniformly drawn non-terminal state.
    pub random_start: bool,
    pub grid_width: usize,
    pub grid_height: usize,
}

impl Default for EnvironmentSection {
    fn default() -> Self {
        let soccer = GridSoccerConfig::default();
        Self {
            width: 4,
            height: 4,
            slip: 0.0,
            chain_length: 5,
            num_states: 6,
            num_actions: 3,
            mdp_seed: 0,
            max_steps: None,
            random_start: true,
            grid_width: soccer.grid_width,
            grid_height: soccer.grid_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSection {
    pub hidden: Vec<usize>,
    pub scheme: BackupScheme,
    /// Segment length; 8 for QOP and 1 otherwise when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub alpha_mode: AlphaMode,
    pub alpha: f64,
    pub target_entropy_factor: f64,
    pub alpha_lr: f64,
}

impl Default for AgentSection {
    fn default() -> Self {
        let base = AgentConfig::new(Algorithm::Qop, vec![1, 1]);
        Self {
            hidden: vec![64, 64],
            scheme: base.scheme,
            n: None,
            gamma: base.gamma,
            tau: base.tau,
            lr: base.lr,
            alpha_mode: base.alpha_mode,
            alpha: base.alpha,
            target_entropy_factor: base.target_entropy_factor,
            alpha_lr: base.alpha_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfPlaySection {
    pub enabled: bool,
    pub mix_prob: f64,
    pub gate_threshold: f64,
    pub min_games: usize,
    pub gate_window: usize,
    pub history_bound: usize,
}

impl Default for SelfPlaySection {
    fn default() -> Self {
        Self {
            enabled: true,
            mix_prob: DEFAULT_MIX_PROB,
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            min_games: DEFAULT_MIN_GAMES,
            gate_window: DEFAULT_GATE_WINDOW,
            history_bound: DEFAULT_HISTORY_BOUND,
        }
    }
}

fn default_total_steps() -> u64 {
    200_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub env: EnvKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default)]
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub agent: AgentSection,
    #[serde(default)]
    pub harness: HarnessConfig,
    #[serde(default)]
    pub selfplay: SelfPlaySection,
}

const TOP_KEYS: &[&str] = &["algorithm", "env", "seed", "total_steps"];
const SECTIONS: &[(&str, &[&str])] = &[
    (
        "environment",
        &[
            "width",
            "height",
            "slip",
            "chain_length",
            "num_states",
            "num_actions",
            "mdp_seed",
            "max_steps",
            "random_start",
            "grid_width",
            "grid_height",
        ],
    ),
    (
        "agent",
        &[
            "hidden",
            "scheme",
            "n",
            "gamma",
            "tau",
            "lr",
            "alpha_mode",
            "alpha",
            "target_entropy_factor",
            "alpha_lr",
        ],
    ),
    (
        "harness",
        &[
            "batch_size",
            "buffer_capacity",
            "reuse_ratio_target",
            "publish_interval",
            "num_rollout_workers",
            "refresh_interval",
            "exploration",
            "cache_depth",
            "warmup_segments",
            "meter_window",
            "log_interval",
            "eval_interval",
            "eval_episodes",
            "gate_games",
            "schedule",
        ],
    ),
    (
        "selfplay",
        &[
            "enabled",
            "mix_prob",
            "gate_threshold",
            "min_games",
            "gate_window",
            "history_bound",
        ],
    ),
];

/// Every accepted key, section-qualified.
pub fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = TOP_KEYS.iter().map(|k| k.to_string()).collect();
    for (section, ks) in SECTIONS {
        keys.push(section.to_string());
        keys.extend(ks.iter().map(|k| format!("{section}.{k}")));
    }
    keys
}

fn nearest<'a>(key: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<String> {
    candidates
        .into_iter()
        .map(|c| (strsim::damerau_levenshtein(key, c), c))
        .filter(|(d, c)| *d <= 2.max(c.len() / 3))
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c.to_string())
}

/// 1-based line of `key` inside `section` (top level when `None`).
fn locate(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[') {
            let name = header.trim_end().trim_end_matches(']').trim().to_string();
            if section.is_none() && name == key {
                return Some(i + 1);
            }
            current = Some(name);
            continue;
        }
        if current.as_deref() != section {
            continue;
        }
        if let Some(rest) = line.strip_prefix(key) {
            let rest = rest.trim_start();
            if rest.starts_with('=') {
                return Some(i + 1);
            }
        }
    }
    None
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

fn check_keys(text: &str, table: &toml::Table) -> Result<(), ConfigError> {
    for (key, value) in table {
        if TOP_KEYS.contains(&key.as_str()) {
            continue;
        }
        let Some((_, allowed)) = SECTIONS.iter().find(|(s, _)| s == key) else {
            let candidates = TOP_KEYS
                .iter()
                .copied()
                .chain(SECTIONS.iter().map(|(s, _)| *s));
            return Err(ConfigError::UnknownKey {
                key: key.clone(),
                line: locate(text, None, key),
                suggestion: nearest(key, candidates),
            });
        };
        let Some(inner) = value.as_table() else {
            return Err(ConfigError::Range {
                key: key.clone(),
                line: locate(text, None, key),
                message: "expected a section".into(),
            });
        };
        for sub in inner.keys() {
            if !allowed.contains(&sub.as_str()) {
                return Err(ConfigError::UnknownKey {
                    key: format!("{key}.{sub}"),
                    line: locate(text, Some(key), sub),
                    suggestion: nearest(sub, allowed.iter().copied()).map(|s| format!("{key}.{s}")),
                });
            }
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// All defaults for `algorithm` on `env`.
    pub fn new(algorithm: Algorithm, env: EnvKind) -> Self {
        Self {
            algorithm,
            env,
            seed: 0,
            total_steps: default_total_steps(),
            environment: EnvironmentSection::default(),
            agent: AgentSection::default(),
            harness: HarnessConfig::default(),
            selfplay: SelfPlaySection::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Missing {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let syntax = |e: toml::de::Error| {
            let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
            ConfigError::Syntax {
                line,
                column,
                message: e.message().to_string(),
            }
        };
        let table: toml::Table = text.parse().map_err(syntax)?;
        check_keys(text, &table)?;
        let config: Self = toml::from_str(text).map_err(syntax)?;
        config.validate_in(text)?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_in("")
    }

    fn validate_in(&self, text: &str) -> Result<(), ConfigError> {
        let fail = |section: Option<&str>, key: &str, message: String| {
            let qualified = section.map_or(key.to_string(), |s| format!("{s}.{key}"));
            Err(ConfigError::Range {
                key: qualified,
                line: locate(text, section, key),
                message,
            })
        };
        if self.seed > i64::MAX as u64 {
            return fail(None, "seed", format!("{} exceeds {}", self.seed, i64::MAX));
        }
        if self.total_steps > i64::MAX as u64 {
            return fail(
                None,
                "total_steps",
                format!("{} exceeds {}", self.total_steps, i64::MAX),
            );
        }

        let e = &self.environment;
        let env = Some("environment");
        if !(0.0..=1.0).contains(&e.slip) {
            return fail(env, "slip", format!("{} outside [0, 1]", e.slip));
        }
        if e.width == 0 || e.height == 0 || e.width * e.height < 2 {
            return fail(
                env,
                "width",
                format!(
                    "gridworld {}x{} needs at least two cells",
                    e.width, e.height
                ),
            );
        }
        if e.chain_length < 2 {
            return fail(
                env,
                "chain_length",
                format!("{} is below 2", e.chain_length),
            );
        }
        if e.num_states == 0 {
            return fail(env, "num_states", "must be positive".into());
        }
        if e.num_actions == 0 {
            return fail(env, "num_actions", "must be positive".into());
        }
        if e.max_steps == Some(0) {
            return fail(env, "max_steps", "must be positive".into());
        }
        if e.grid_width < 3 || e.grid_width.is_multiple_of(2) {
            return fail(
                env,
                "grid_width",
                format!("{} must be odd and at least 3", e.grid_width),
            );
        }
        if e.grid_height == 0 {
            return fail(env, "grid_height", "must be positive".into());
        }
        if e.mdp_seed > i64::MAX as u64 {
            return fail(
                env,
                "mdp_seed",
                format!("{} exceeds {}", e.mdp_seed, i64::MAX),
            );
        }

        let a = &self.agent;
        let agent = Some("agent");
        if a.hidden.contains(&0) {
            return fail(agent, "hidden", "layer widths must be positive".into());
        }
        if a.n == Some(0) {
            return fail(agent, "n", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&a.gamma) {
            return fail(agent, "gamma", format!("{} outside [0, 1)", a.gamma));
        }
        if !(0.0..=1.0).contains(&a.tau) {
            return fail(agent, "tau", format!("{} outside [0, 1]", a.tau));
        }
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return fail(agent, "lr", format!("{} must be positive", a.lr));
        }
        if !(a.alpha > 0.0 && a.alpha.is_finite()) {
            return fail(agent, "alpha", format!("{} must be positive", a.alpha));
        }
        if !(a.alpha_lr >= 0.0 && a.alpha_lr.is_finite()) {
            return fail(
                agent,
                "alpha_lr",
                format!("{} must be non-negative", a.alpha_lr),
            );
        }
        if !a.target_entropy_factor.is_finite() {
            return fail(agent, "target_entropy_factor", "must be finite".into());
        }

        let h = &self.harness;
        let harness = Some("harness");
        for (key, v) in [
            ("batch_size", h.batch_size),
            ("buffer_capacity", h.buffer_capacity),
            ("publish_interval", h.publish_interval),
            ("num_rollout_workers", h.num_rollout_workers),
            ("refresh_interval", h.refresh_interval),
            ("cache_depth", h.cache_depth),
            ("meter_window", h.meter_window),
            ("log_interval", h.log_interval),
            ("eval_episodes", h.eval_episodes),
        ] {
            if v == 0 {
                return fail(harness, key, "must be positive".into());
            }
        }
        if !(h.reuse_ratio_target > 0.0 && h.reuse_ratio_target.is_finite()) {
            return fail(
                harness,
                "reuse_ratio_target",
                format!("{} must be positive", h.reuse_ratio_target),
            );
        }
        if !(0.0..=1.0).contains(&h.exploration) {
            return fail(
                harness,
                "exploration",
                format!("{} outside [0, 1]", h.exploration),
            );
        }
        if h.schedule == Schedule::Lockstep && h.num_rollout_workers != 1 {
            return fail(
                harness,
                "schedule",
                "lockstep needs num_rollout_workers = 1".into(),
            );
        }

        let s = &self.selfplay;
        let sp = Some("selfplay");
        if !(0.0..=1.0).contains(&s.mix_prob) {
            return fail(sp, "mix_prob", format!("{} outside [0, 1]", s.mix_prob));
        }
        if !(s.gate_threshold > 0.0 && s.gate_threshold <= 1.0) {
            return fail(
                sp,
                "gate_threshold",
                format!("{} outside (0, 1]", s.gate_threshold),
            );
        }
        if s.min_games == 0 {
            return fail(sp, "min_games", "must be positive".into());
        }
        if s.gate_window < s.min_games {
            return fail(
                sp,
                "gate_window",
                format!(
                    "{} is smaller than min_games {}",
                    s.gate_window, s.min_games
                ),
            );
        }
        if s.history_bound == 0 {
            return fail(sp, "history_bound", "must be positive".into());
        }
        Ok(())
    }

    pub fn max_steps(&self) -> usize {
        self.environment
            .max_steps
            .unwrap_or(if self.env == EnvKind::GridSoccer {
                40
            } else {
                100
            })
    }

    pub fn soccer(&self) -> GridSoccerConfig {
        GridSoccerConfig {
            grid_width: self.environment.grid_width,
            grid_height: self.environment.grid_height,
            max_steps: self.max_steps(),
        }
    }

    /// Observation length and action count of the configured environment.
    pub fn env_dims(&self) -> (usize, usize) {
        let e = &self.environment;
        match self.env {
            EnvKind::Gridworld => (e.width * e.height, crate::mdp::GRID_ACTIONS.len()),
            EnvKind::Chain => (e.chain_length, 2),
            EnvKind::RandomMdp => (e.num_states, e.num_actions),
            EnvKind::GridSoccer => (
                GridSoccerConfig::OBSERVATION_LENGTH,
                crate::env::soccer_action::COUNT,
            ),
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let (obs, actions) = self.env_dims();
        std::iter::once(obs)
            .chain(self.agent.hidden.iter().copied())
            .chain(std::iter::once(actions))
            .collect()
    }

    pub fn agent_config(&self) -> AgentConfig {
        let a = &self.agent;
        let mut c = AgentConfig::new(self.algorithm, self.layer_sizes());
        c.scheme = a.scheme;
        if let Some(n) = a.n {
            c.n = n;
        }
        c.gamma = a.gamma;
        c.tau = a.tau;
        c.lr = a.lr;
        c.alpha_mode = a.alpha_mode;
        c.alpha = a.alpha;
        c.target_entropy_factor = a.target_entropy_factor;
        c.alpha_lr = a.alpha_lr;
        c.seed = self.seed;
        c
    }
}
