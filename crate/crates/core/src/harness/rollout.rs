use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HarnessError, ParameterServer, Published};
use crate::env::Environment;
use crate::trajectory::{TrajectorySegment, Transition};

/// Derives a per-stream seed from a base seed.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Acts in one environment with the latest published policy and cuts the
/// experience into segments of at most `n` transitions. Segments never
/// cross episode boundaries.
pub struct RolloutWorker {
    env: Box<dyn Environment>,
    n: usize,
    refresh_interval: usize,
    seed: u64,
    episode: u64,
    obs: Option<Vec<f64>>,
    policy: Option<Arc<Published>>,
    since_refresh: usize,
    rng: ChaCha8Rng,
    episodes_finished: u64,
    explore: f64,
}

impl RolloutWorker {
    pub fn new(
        env: Box<dyn Environment>,
        n: usize,
        refresh_interval: usize,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        if n == 0 || refresh_interval == 0 {
            return Err(HarnessError::Config(
                "segment length and refresh interval must be positive".into(),
            ));
        }
        Ok(Self {
            env,
            n,
            refresh_interval,
            seed,
            episode: 0,
            obs: None,
            policy: None,
            since_refresh: 0,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xac7)),
            episodes_finished: 0,
            explore: 0.0,
        })
    }

    /// With probability `eps` an action is drawn uniformly instead of from
    /// the policy; logged behavior probabilities account for the mixture.
    pub fn with_exploration(mut self, eps: f64) -> Result<Self, HarnessError> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(HarnessError::Config(format!(
                "exploration must lie in [0, 1], got {eps}"
            )));
        }
        self.explore = eps;
        Ok(self)
    }

    pub fn episodes_finished(&self) -> u64 {
        self.episodes_finished
    }

    fn refresh(&mut self, ps: &ParameterServer) -> Result<(), HarnessError> {
        if self.policy.is_none() || self.since_refresh >= self.refresh_interval {
            self.policy = Some(ps.fetch().ok_or(HarnessError::NotReady)?);
            self.since_refresh = 0;
        }
        Ok(())
    }

    /// Produces the next segment. `budget` is called once before every
    /// environment step and may refuse it; a partial segment is then
    /// returned as truncated, or `None` when no step was taken.
    pub fn next_segment(
        &mut self,
        ps: &ParameterServer,
        mut budget: impl FnMut() -> bool,
    ) -> Result<Option<TrajectorySegment>, HarnessError> {
        self.refresh(ps)?;
        self.since_refresh += 1;
        let policy = Arc::clone(self.policy.as_ref().expect("refreshed"));
        let mut transitions = Vec::with_capacity(self.n);
        while transitions.len() < self.n {
            if !budget() {
                break;
            }
            let state = match self.obs.take() {
                Some(o) => o,
                None => {
                    let s = self.env.reset(mix_seed(self.seed, self.episode));
                    self.episode += 1;
                    s
                }
            };
            let (action, log_prob) = self.behave(&policy, &state)?;
            let step = self.env.step(action)?;
            let terminal = step.terminal();
            transitions.push(Transition {
                state,
                action,
                reward: step.reward,
                next_state: step.observation.clone(),
                done: terminal,
                behavior_log_prob: log_prob,
                policy_version: policy.version,
            });
            if step.done {
                self.episodes_finished += 1;
                let done = terminal;
                return Ok(Some(TrajectorySegment::new(transitions, !done)));
            }
            self.obs = Some(step.observation);
        }
        if transitions.is_empty() {
            return Ok(None);
        }
        Ok(Some(TrajectorySegment::new(transitions, true)))
    }

    fn behave(&mut self, policy: &Published, state: &[f64]) -> Result<(usize, f64), HarnessError> {
        if self.explore == 0.0 {
            return Ok(policy.snapshot.act(state, &mut self.rng)?);
        }
        let n = self.env.num_actions();
        let row = policy
            .snapshot
            .q_row(state)
            .map_err(crate::agent::AgentError::from)?;
        let pi = crate::tabular::softmax_policy(&row, policy.snapshot.alpha)
            .map_err(crate::agent::AgentError::from)?;
        let action = if self.rng.random::<f64>() < self.explore {
            self.rng.random_range(0..n)
        } else {
            policy.snapshot.act(state, &mut self.rng)?.0
        };
        Ok((
            action,
            ((1.0 - self.explore) * pi.0[action] + self.explore / n as f64).ln(),
        ))
    }
}
