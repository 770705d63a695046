//! Self-play opponents: a frozen target opponent, a bounded archive of past
//! snapshots, and a win-rate gate that decides when the target is replaced.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, PolicySnapshot};
use parking_lot::Mutex;

use crate::env::{EnvError, Environment, GridSoccer, GridSoccerConfig, Step};

pub const DEFAULT_MIX_PROB: f64 = 0.8;
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.6;
pub const DEFAULT_MIN_GAMES: usize = 100;
pub const DEFAULT_GATE_WINDOW: usize = 200;
pub const DEFAULT_HISTORY_BOUND: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum SelfPlayError {
    #[error("mix probability must lie in [0, 1], got {0}")]
    MixProb(f64),
    #[error("history bound must be positive")]
    HistoryBound,
    #[error("gate threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error("gate window {window} is smaller than min_games {min_games}")]
    Window { window: usize, min_games: usize },
    #[error("at least one episode is required")]
    NoEpisodes,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Outcome of one game from the learning player's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameResult {
    Win,
    Draw,
    Loss,
}

impl GameResult {
    pub fn from_return(ret: f64) -> Self {
        if ret > 0.0 {
            GameResult::Win
        } else if ret < 0.0 {
            GameResult::Loss
        } else {
            GameResult::Draw
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpponentKind {
    Target,
    History,
}

/// A policy snapshot tagged with the parameter-server version it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct VersionedSnapshot {
    pub version: u64,
    pub snapshot: Arc<PolicySnapshot>,
}

#[derive(Debug, Clone)]
pub struct OpponentPool {
    target: VersionedSnapshot,
    history: VecDeque<VersionedSnapshot>,
    history_bound: usize,
    pub mix_prob: f64,
}

impl OpponentPool {
    pub fn new(
        target: VersionedSnapshot,
        mix_prob: f64,
        history_bound: usize,
    ) -> Result<Self, SelfPlayError> {
        if !(0.0..=1.0).contains(&mix_prob) {
            return Err(SelfPlayError::MixProb(mix_prob));
        }
        if history_bound == 0 {
            return Err(SelfPlayError::HistoryBound);
        }
        Ok(Self {
            target,
            history: VecDeque::new(),
            history_bound,
            mix_prob,
        })
    }

    pub fn target(&self) -> &VersionedSnapshot {
        &self.target
    }

    pub fn history(&self) -> impl ExactSizeIterator<Item = &VersionedSnapshot> {
        self.history.iter()
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn history_bound(&self) -> usize {
        self.history_bound
    }

    /// Target with probability `mix_prob`, otherwise a uniform history entry.
    pub fn sample_opponent<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> (VersionedSnapshot, OpponentKind) {
        let u: f64 = rng.random();
        if self.history.is_empty() || u < self.mix_prob {
            return (self.target.clone(), OpponentKind::Target);
        }
        let i = rng.random_range(0..self.history.len());
        (self.history[i].clone(), OpponentKind::History)
    }

    /// Archives the old target and installs `current`.
    pub fn promote_target(&mut self, current: VersionedSnapshot, gate: &mut GateState) {
        if current.version != self.target.version {
            let old = std::mem::replace(&mut self.target, current);
            if self.history.len() == self.history_bound {
                self.history.pop_front();
            }
            self.history.push_back(old);
        }
        gate.clear();
    }

    /// Rebuilds a pool from persisted parts, keeping the newest entries.
    pub fn from_parts(
        target: VersionedSnapshot,
        history: Vec<VersionedSnapshot>,
        mix_prob: f64,
        history_bound: usize,
    ) -> Result<Self, SelfPlayError> {
        let mut pool = Self::new(target, mix_prob, history_bound)?;
        let skip = history.len().saturating_sub(history_bound);
        pool.history = history.into_iter().skip(skip).collect();
        Ok(pool)
    }
}

/// Trailing window of results against the target opponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    window: VecDeque<GameResult>,
    capacity: usize,
    pub threshold: f64,
    pub min_games: usize,
}

impl Default for GateState {
    fn default() -> Self {
        Self::new(
            DEFAULT_GATE_WINDOW,
            DEFAULT_GATE_THRESHOLD,
            DEFAULT_MIN_GAMES,
        )
        .expect("defaults are valid")
    }
}

impl GateState {
    pub fn new(capacity: usize, threshold: f64, min_games: usize) -> Result<Self, SelfPlayError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(SelfPlayError::Threshold(threshold));
        }
        if capacity < min_games.max(1) {
            return Err(SelfPlayError::Window {
                window: capacity,
                min_games,
            });
        }
        Ok(Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            threshold,
            min_games,
        })
    }

    pub fn record_result(&mut self, result: GameResult, vs_target: bool) {
        if !vs_target {
            return;
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(result);
    }

    pub fn games(&self) -> usize {
        self.window.len()
    }

    pub fn wins(&self) -> usize {
        self.window
            .iter()
            .filter(|r| **r == GameResult::Win)
            .count()
    }

    /// `None` until `min_games` results are in.
    pub fn win_rate(&self) -> Option<f64> {
        if self.window.is_empty() || self.window.len() < self.min_games {
            return None;
        }
        Some(self.wins() as f64 / self.window.len() as f64)
    }

    pub fn should_promote(&self) -> bool {
        let games = self.window.len();
        games >= self.min_games.max(1)
            && (self.wins() as f64) >= self.threshold * games as f64 - 1e-9
    }

    pub fn clear(&mut self) {
        self.window.clear();
    }

    pub fn results(&self) -> impl Iterator<Item = &GameResult> {
        self.window.iter()
    }
}

/// How a player picks its actions.
#[derive(Debug, Clone)]
pub enum Player {
    /// Argmax action; exact ties are broken uniformly at random.
    Greedy(Arc<PolicySnapshot>),
    Sampled(Arc<PolicySnapshot>),
    Random,
}

impl Player {
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        num_actions: usize,
        rng: &mut R,
    ) -> Result<usize, AgentError> {
        match self {
            Player::Greedy(p) => {
                let row = p.q_row(obs)?;
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ties: Vec<usize> = (0..row.len()).filter(|&a| row[a] == best).collect();
                match ties.len() {
                    0 => p.greedy(obs),
                    1 => Ok(ties[0]),
                    k => Ok(ties[rng.random_range(0..k)]),
                }
            }
            Player::Sampled(p) => Ok(p.act(obs, rng)?.0),
            Player::Random => Ok(rng.random_range(0..num_actions)),
        }
    }
}

/// Plays one game; returns player A's undiscounted return.
pub fn play_game<R: Rng + ?Sized>(
    env: &mut GridSoccer,
    a: &Player,
    b: &Player,
    seed: u64,
    rng: &mut R,
) -> Result<f64, SelfPlayError> {
    let (mut obs_a, mut obs_b) = env.reset(seed);
    let n = env.num_actions();
    let mut ret = 0.0;
    loop {
        let act_a = a.act(&obs_a, n, rng)?;
        let act_b = b.act(&obs_b, n, rng)?;
        let step = env.step(act_a, act_b)?;
        ret += step.reward_a;
        if step.done {
            return Ok(ret);
        }
        obs_a = step.obs_a;
        obs_b = step.obs_b;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub episodes: usize,
    pub wins: usize,
    pub draws: usize,
    pub losses: usize,
    pub win_rate: f64,
    pub draw_rate: f64,
    pub loss_rate: f64,
    pub mean_return: f64,
}

impl MatchReport {
    pub fn from_counts(wins: usize, draws: usize, losses: usize, total_return: f64) -> Self {
        let episodes = wins + draws + losses;
        let n = episodes.max(1) as f64;
        let win_rate = wins as f64 / n;
        let draw_rate = draws as f64 / n;
        Self {
            episodes,
            wins,
            draws,
            losses,
            win_rate,
            draw_rate,
            loss_rate: 1.0 - (win_rate + draw_rate),
            mean_return: total_return / n,
        }
    }
}

/// `episodes` games of `a` (as side A) against `b`.
pub fn evaluate_match(
    config: &GridSoccerConfig,
    a: &Player,
    b: &Player,
    episodes: usize,
    seed: u64,
) -> Result<MatchReport, SelfPlayError> {
    if episodes == 0 {
        return Err(SelfPlayError::NoEpisodes);
    }
    let mut env = GridSoccer::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut w, mut d, mut l, mut total) = (0, 0, 0, 0.0);
    for ep in 0..episodes {
        let ret = play_game(
            &mut env,
            a,
            b,
            seed.wrapping_mul(1_000_003).wrapping_add(ep as u64),
            &mut rng,
        )?;
        total += ret;
        match GameResult::from_return(ret) {
            GameResult::Win => w += 1,
            GameResult::Draw => d += 1,
            GameResult::Loss => l += 1,
        }
    }
    Ok(MatchReport::from_counts(w, d, l, total))
}

/// Pool and gate shared between rollout and test workers.
#[derive(Debug)]
pub struct SelfPlayShared {
    pub pool: OpponentPool,
    pub gate: GateState,
    pub promotions: u64,
}

pub type SharedSelfPlay = Arc<Mutex<SelfPlayShared>>;

pub fn shared(pool: OpponentPool, gate: GateState) -> SharedSelfPlay {
    Arc::new(Mutex::new(SelfPlayShared {
        pool,
        gate,
        promotions: 0,
    }))
}

/// Grid soccer seen from side A. Side B is played by an opponent drawn from
/// the pool at every reset, acting with its sampled softmax policy, or by a
/// uniform-random player when no pool is attached.
pub struct SelfPlayEnv {
    game: GridSoccer,
    shared: Option<SharedSelfPlay>,
    opponent: Player,
    kind: Option<OpponentKind>,
    obs_b: Vec<f64>,
    rng: ChaCha8Rng,
}

impl SelfPlayEnv {
    pub fn new(config: GridSoccerConfig, shared: Option<SharedSelfPlay>) -> Result<Self, EnvError> {
        let game = GridSoccer::new(config)?;
        Ok(Self {
            game,
            shared,
            opponent: Player::Random,
            kind: None,
            obs_b: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// Kind of the opponent in the current episode.
    pub fn opponent_kind(&self) -> Option<OpponentKind> {
        self.kind
    }
}

impl Environment for SelfPlayEnv {
    fn observation_len(&self) -> usize {
        self.game.observation_len()
    }

    fn num_actions(&self) -> usize {
        self.game.num_actions()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0bb0_5e7f);
        match &self.shared {
            Some(shared) => {
                let (snap, kind) = shared.lock().pool.sample_opponent(&mut self.rng);
                self.opponent = Player::Sampled(snap.snapshot);
                self.kind = Some(kind);
            }
            None => {
                self.opponent = Player::Random;
                self.kind = None;
            }
        }
        let (a, b) = self.game.reset(seed);
        self.obs_b = b;
        a
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        let n = self.game.num_actions();
        let b = self
            .opponent
            .act(&self.obs_b, n, &mut self.rng)
            .map_err(|e| EnvError::Opponent(e.to_string()))?;
        let s = self.game.step(action, b)?;
        self.obs_b = s.obs_b;
        Ok(Step {
            observation: s.obs_a,
            reward: s.reward_a,
            done: s.done,
            truncated: s.truncated,
        })
    }
}

/// Outcome of one batch of gate games.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRound {
    pub games: usize,
    pub games_vs_target: usize,
    pub wins_vs_target: usize,
    pub promoted: bool,
}

/// Greedy games of `current` against pool opponents, also greedy. Results
/// against the target feed the gate; the target is replaced by `current`
/// when the gate opens.
pub fn run_gate_games(
    shared: &SharedSelfPlay,
    current: &VersionedSnapshot,
    config: &GridSoccerConfig,
    games: usize,
    seed: u64,
) -> Result<GateRound, SelfPlayError> {
    let mut env = GridSoccer::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let me = Player::Greedy(Arc::clone(&current.snapshot));
    let mut round = GateRound {
        games,
        games_vs_target: 0,
        wins_vs_target: 0,
        promoted: false,
    };
    for g in 0..games {
        let (opp, kind) = shared.lock().pool.sample_opponent(&mut rng);
        let ret = play_game(
            &mut env,
            &me,
            &Player::Greedy(opp.snapshot),
            seed.wrapping_add(g as u64),
            &mut rng,
        )?;
        let result = GameResult::from_return(ret);
        let vs_target = kind == OpponentKind::Target;
        if vs_target {
            round.games_vs_target += 1;
            round.wins_vs_target += (result == GameResult::Win) as usize;
        }
        shared.lock().gate.record_result(result, vs_target);
    }
    let mut guard = shared.lock();
    if guard.gate.should_promote() {
        let SelfPlayShared {
            pool,
            gate,
            promotions,
        } = &mut *guard;
        pool.promote_target(current.clone(), gate);
        *promotions += 1;
        round.promoted = true;
    }
    Ok(round)
}
