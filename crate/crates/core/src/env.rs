//! Episodic environments driven by the rollout and test workers.
//!
//! Single-agent tabular environments expose a one-hot observation of the
//! underlying [`TabularMdp`] state. [`GridSoccer`] is a two-player zero-sum
//! game with a fixed-length float observation per player, expressed in that
//! player's own frame so one network can play either side.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::TabularMdp;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("step called on a finished episode; reset first")]
    EpisodeOver,
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("opponent failed to act: {0}")]
    Opponent(String),
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Episode ended for any reason.
    pub done: bool,
    /// Ended by the step limit rather than a terminal state.
    pub truncated: bool,
}

impl Step {
    /// True when the episode reached a terminal state (no bootstrap).
    pub fn terminal(&self) -> bool {
        self.done && !self.truncated
    }
}

/// A single-agent episodic environment.
pub trait Environment: Send {
    fn observation_len(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<Step, EnvError>;
}

/// One-hot encoding of `state` among `num_states`.
pub fn one_hot(state: usize, num_states: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_states];
    v[state] = 1.0;
    v
}

/// Episodic view of a [`TabularMdp`]: starts in `start_state`, ends on
/// entering a terminal state or after `max_steps` steps.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: Arc<TabularMdp>,
    start_state: usize,
    random_start: bool,
    max_steps: usize,
    state: usize,
    steps: usize,
    finished: bool,
    rng: ChaCha8Rng,
}

impl TabularEnv {
    pub fn new(
        mdp: Arc<TabularMdp>,
        start_state: usize,
        max_steps: usize,
    ) -> Result<Self, EnvError> {
        if start_state >= mdp.num_states() {
            return Err(EnvError::Config(format!(
                "start state {start_state} out of range"
            )));
        }
        if max_steps == 0 {
            return Err(EnvError::Config("max_steps must be positive".into()));
        }
        Ok(Self {
            mdp,
            start_state,
            random_start: false,
            max_steps,
            state: start_state,
            steps: 0,
            finished: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// Episodes start in a uniformly drawn non-terminal state instead of
    /// the fixed start state.
    pub fn with_random_start(mut self) -> Self {
        self.random_start = true;
        self
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Environment for TabularEnv {
    fn observation_len(&self) -> usize {
        self.mdp.num_states()
    }

    fn num_actions(&self) -> usize {
        self.mdp.num_actions()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.start_state;
        if self.random_start {
            let open: Vec<usize> = (0..self.mdp.num_states())
                .filter(|&s| !self.mdp.is_terminal(s))
                .collect();
            if !open.is_empty() {
                self.state = open[self.rng.random_range(0..open.len())];
            }
        }
        self.steps = 0;
        self.finished = false;
        one_hot(self.state, self.mdp.num_states())
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        let num_actions = self.mdp.num_actions();
        if action >= num_actions {
            return Err(EnvError::InvalidAction {
                action,
                num_actions,
            });
        }
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        let reward = self.mdp.reward(self.state, action);
        let next = if self.mdp.is_terminal(self.state) {
            self.state
        } else {
            self.mdp.sample_next(self.state, action, &mut self.rng)
        };
        self.state = next;
        self.steps += 1;
        let terminal = self.mdp.is_terminal(next);
        let truncated = !terminal && self.steps >= self.max_steps;
        self.finished = terminal || truncated;
        Ok(Step {
            observation: one_hot(next, self.mdp.num_states()),
            reward,
            done: self.finished,
            truncated,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSoccerConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub max_steps: usize,
}

impl Default for GridSoccerConfig {
    fn default() -> Self {
        Self {
            grid_width: 7,
            grid_height: 5,
            max_steps: 40,
        }
    }
}

impl GridSoccerConfig {
    /// Observation length; identical for both players and every state.
    pub const OBSERVATION_LENGTH: usize = 14;

    pub fn observation_length(&self) -> usize {
        Self::OBSERVATION_LENGTH
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.grid_width < 3 || self.grid_width.is_multiple_of(2) {
            return Err(EnvError::Config(format!(
                "grid_width must be odd and >= 3, got {}",
                self.grid_width
            )));
        }
        if self.grid_height == 0 {
            return Err(EnvError::Config("grid_height must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(EnvError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Soccer actions, in each player's own frame.
pub mod soccer_action {
    pub const STAY: usize = 0;
    pub const UP: usize = 1;
    pub const DOWN: usize = 2;
    pub const BACK: usize = 3;
    pub const FORWARD: usize = 4;
    pub const SHOOT: usize = 5;
    pub const COUNT: usize = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl Side {
    fn other(self) -> Self {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ball {
    Free(i64, i64),
    Held(Side),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoccerStep {
    pub obs_a: Vec<f64>,
    pub obs_b: Vec<f64>,
    pub reward_a: f64,
    pub reward_b: f64,
    pub done: bool,
    pub truncated: bool,
}

/// Two-player grid soccer. Player A attacks towards `x = width - 1`, player
/// B towards `x = 0`. A player holding the ball in the column next to the
/// opponent's goal scores by shooting; shooting from elsewhere kicks the
/// ball two cells forward. Moving into an opponent who holds the ball
/// steals it. The order in which the two actions resolve is a fair coin
/// flip each step, which keeps the game symmetric.
#[derive(Debug, Clone)]
pub struct GridSoccer {
    config: GridSoccerConfig,
    pos: [(i64, i64); 2],
    ball: Ball,
    steps: usize,
    finished: bool,
    rng: ChaCha8Rng,
}

impl GridSoccer {
    pub fn new(config: GridSoccerConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let mut env = Self {
            config,
            pos: [(0, 0); 2],
            ball: Ball::Free(0, 0),
            steps: 0,
            finished: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &GridSoccerConfig {
        &self.config
    }

    pub fn observation_len(&self) -> usize {
        self.config.observation_length()
    }

    pub fn num_actions(&self) -> usize {
        soccer_action::COUNT
    }

    fn w(&self) -> i64 {
        self.config.grid_width as i64
    }

    fn h(&self) -> i64 {
        self.config.grid_height as i64
    }

    /// Resets to kickoff: ball free at the centre, players mirrored about it.
    pub fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<f64>) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let cx = (self.w() - 1) / 2;
        let cy = (self.h() - 1) / 2;
        let d = ((self.w() - 1) / 3).max(1);
        self.pos = [(cx - d, cy), (self.w() - 1 - (cx - d), cy)];
        self.ball = Ball::Free(cx, cy);
        self.steps = 0;
        self.finished = false;
        (self.observe(Side::A), self.observe(Side::B))
    }

    /// Overrides positions and ball state mid-episode.
    pub fn place(&mut self, pos_a: (i64, i64), pos_b: (i64, i64), ball: Ball) {
        self.pos = [pos_a, pos_b];
        self.ball = ball;
    }

    pub fn positions(&self) -> [(i64, i64); 2] {
        self.pos
    }

    pub fn ball(&self) -> Ball {
        self.ball
    }

    fn idx(side: Side) -> usize {
        match side {
            Side::A => 0,
            Side::B => 1,
        }
    }

    /// Absolute x-direction of "forward" for `side`.
    fn forward(side: Side) -> i64 {
        match side {
            Side::A => 1,
            Side::B => -1,
        }
    }

    fn holds(&self, side: Side) -> bool {
        self.ball == Ball::Held(side)
    }

    fn ball_pos(&self) -> (i64, i64) {
        match self.ball {
            Ball::Free(x, y) => (x, y),
            Ball::Held(s) => self.pos[Self::idx(s)],
        }
    }

    fn in_bounds(&self, (x, y): (i64, i64)) -> bool {
        x >= 0 && y >= 0 && x < self.w() && y < self.h()
    }

    /// Applies one action; returns true on a goal by `side`.
    fn apply(&mut self, side: Side, action: usize) -> bool {
        use soccer_action::*;
        let me = Self::idx(side);
        let them = Self::idx(side.other());
        let fwd = Self::forward(side);
        let delta = match action {
            UP => (0, -1),
            DOWN => (0, 1),
            BACK => (-fwd, 0),
            FORWARD => (fwd, 0),
            SHOOT => {
                if !self.holds(side) {
                    return false;
                }
                let (x, y) = self.pos[me];
                let goal_column = if fwd > 0 { self.w() - 1 } else { 0 };
                if x == goal_column {
                    return true;
                }
                let land = ((x + 2 * fwd).clamp(0, self.w() - 1), y);
                self.ball = if land == self.pos[them] {
                    Ball::Held(side.other())
                } else {
                    Ball::Free(land.0, land.1)
                };
                return false;
            }
            _ => return false,
        };
        let target = (self.pos[me].0 + delta.0, self.pos[me].1 + delta.1);
        if !self.in_bounds(target) {
            return false;
        }
        if target == self.pos[them] {
            if self.holds(side.other()) {
                self.ball = Ball::Held(side);
            }
            return false;
        }
        self.pos[me] = target;
        if self.ball == Ball::Free(target.0, target.1) {
            self.ball = Ball::Held(side);
        }
        false
    }

    pub fn step(&mut self, action_a: usize, action_b: usize) -> Result<SoccerStep, EnvError> {
        for action in [action_a, action_b] {
            if action >= soccer_action::COUNT {
                return Err(EnvError::InvalidAction {
                    action,
                    num_actions: soccer_action::COUNT,
                });
            }
        }
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        let order = if self.rng.random::<bool>() {
            [Side::A, Side::B]
        } else {
            [Side::B, Side::A]
        };
        let mut reward_a = 0.0;
        for side in order {
            let action = if side == Side::A { action_a } else { action_b };
            if self.apply(side, action) {
                reward_a = if side == Side::A { 1.0 } else { -1.0 };
                break;
            }
        }
        self.steps += 1;
        let scored = reward_a != 0.0;
        let truncated = !scored && self.steps >= self.config.max_steps;
        self.finished = scored || truncated;
        Ok(SoccerStep {
            obs_a: self.observe(Side::A),
            obs_b: self.observe(Side::B),
            reward_a,
            reward_b: -reward_a,
            done: self.finished,
            truncated,
        })
    }

    /// Observation of `side` in its own frame (attacking towards +x).
    pub fn observe(&self, side: Side) -> Vec<f64> {
        let sx = (self.w() - 1).max(1) as f64;
        let sy = (self.h() - 1).max(1) as f64;
        let frame = |(x, y): (i64, i64)| -> (f64, f64) {
            let x = if side == Side::A { x } else { self.w() - 1 - x };
            (x as f64 / sx, y as f64 / sy)
        };
        let (ox, oy) = frame(self.pos[Self::idx(side)]);
        let (px, py) = frame(self.pos[Self::idx(side.other())]);
        let (bx, by) = frame(self.ball_pos());
        let mine = self.holds(side) as u8 as f64;
        let theirs = self.holds(side.other()) as u8 as f64;
        let free = matches!(self.ball, Ball::Free(..)) as u8 as f64;
        let remaining = 1.0 - self.steps as f64 / self.config.max_steps as f64;
        vec![
            ox,
            oy,
            px,
            py,
            bx,
            by,
            mine,
            theirs,
            free,
            bx - ox,
            by - oy,
            1.0 - ox,
            px - ox,
            remaining,
        ]
    }
}
