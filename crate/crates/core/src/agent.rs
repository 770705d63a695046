//! Soft Q agents: SQN, SQN with corrective feedback (CF), and the n-step
//! on-policy variant (QOP).
//!
//! Every agent keeps two main Q-networks, two polyak-averaged target
//! networks, and a temperature. Targets are computed from the target
//! networks only and are treated as constants by the regression loss.
//!
//! SQN acts with `softmax(min(Q1, Q2) / alpha)` on the main networks; CF
//! and QOP act with the same softmax over the target networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::one_hot;
use crate::mdp::TabularMdp;
use crate::nn::{adam_step, polyak_update, AdamState, Gradients, MlpParams, NnError};
use crate::tabular::{
    log_softmax, policy_entropy, soft_value_iteration, soft_value_lse, softmax_policy, TabularError,
};
use crate::trajectory::{SegmentError, TrajectorySegment, Transition};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite target {0}")]
    NonFiniteTarget(f64),
    #[error("{0} targets for {1} anchors")]
    Misaligned(usize, usize),
    #[error("{algorithm:?} cannot train on {input}")]
    InputKind {
        algorithm: Algorithm,
        input: &'static str,
    },
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("probe needs a one-hot network over {states} states and {actions} actions")]
    Encoding { states: usize, actions: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sqn,
    SqnCf,
    Qop,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Sqn => "sqn",
            Algorithm::SqnCf => "sqn_cf",
            Algorithm::Qop => "qop",
        }
    }

    /// True when acting uses the target networks.
    pub fn acts_on_targets(self) -> bool {
        !matches!(self, Algorithm::Sqn)
    }
}

/// How SQN estimates the soft value of the next state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupScheme {
    /// `sum_a pi(a|s') (Q(s',a) - alpha log pi(a|s'))`.
    Expectation,
    /// `alpha log sum_a exp(Q(s',a) / alpha)`.
    Lse,
    /// `Q(s',a') - alpha log pi(a'|s')` for one `a' ~ pi`.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Fixed,
    Adaptive,
}

/// Entropy temperature, optionally adapted towards a target entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureState {
    pub mode: AlphaMode,
    pub alpha: f64,
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub alpha_lr: f64,
}

impl TemperatureState {
    pub fn fixed(alpha: f64) -> Self {
        Self {
            mode: AlphaMode::Fixed,
            alpha,
            log_alpha: alpha.ln(),
            target_entropy: 0.0,
            alpha_lr: 0.0,
        }
    }

    pub fn adaptive(alpha: f64, target_entropy: f64, alpha_lr: f64) -> Self {
        let log_alpha = alpha.ln();
        Self {
            mode: AlphaMode::Adaptive,
            alpha: log_alpha.exp(),
            log_alpha,
            target_entropy,
            alpha_lr,
        }
    }
}

/// Dual step on `J(alpha) = E[-alpha (log pi(a|s) + target_entropy)]` in
/// `log alpha`. `batch_log_probs` are log-probabilities (or their
/// expectations, i.e. negative entropies) of the acting policy.
pub fn temperature_update(temp: &TemperatureState, batch_log_probs: &[f64]) -> TemperatureState {
    if temp.mode == AlphaMode::Fixed || batch_log_probs.is_empty() {
        return temp.clone();
    }
    let mean = batch_log_probs.iter().sum::<f64>() / batch_log_probs.len() as f64;
    let grad = -temp.alpha * (mean + temp.target_entropy);
    let log_alpha = temp.log_alpha - temp.alpha_lr * grad;
    TemperatureState {
        log_alpha,
        alpha: log_alpha.exp(),
        ..temp.clone()
    }
}

/// Hyperparameters of an agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub scheme: BackupScheme,
    /// Input, hidden..., action count.
    pub layer_sizes: Vec<usize>,
    pub n: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub alpha_mode: AlphaMode,
    pub alpha: f64,
    /// Target entropy as a fraction of `log(action_count)`.
    pub target_entropy_factor: f64,
    pub alpha_lr: f64,
    pub seed: u64,
}

impl AgentConfig {
    pub fn new(algorithm: Algorithm, layer_sizes: Vec<usize>) -> Self {
        Self {
            algorithm,
            scheme: BackupScheme::Lse,
            layer_sizes,
            n: if algorithm == Algorithm::Qop { 8 } else { 1 },
            gamma: 0.95,
            tau: 0.005,
            lr: 1e-3,
            alpha_mode: AlphaMode::Fixed,
            alpha: 0.01,
            target_entropy_factor: 0.5,
            alpha_lr: 3e-4,
            seed: 0,
        }
    }

    pub fn num_actions(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(AgentError::Config(format!(
                "bad layer sizes {:?}",
                self.layer_sizes
            )));
        }
        if self.n == 0 {
            return Err(AgentError::Config("n must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(AgentError::Config(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(AgentError::Config(format!(
                "tau {} outside [0, 1]",
                self.tau
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AgentError::Config(format!(
                "alpha {} must be positive",
                self.alpha
            )));
        }
        Ok(())
    }

    fn temperature(&self) -> TemperatureState {
        match self.alpha_mode {
            AlphaMode::Fixed => TemperatureState::fixed(self.alpha),
            AlphaMode::Adaptive => {
                let target = self.target_entropy_factor * (self.num_actions() as f64).ln();
                TemperatureState::adaptive(self.alpha, target, self.alpha_lr)
            }
        }
    }
}

/// Row-wise minimum of two Q-networks at `obs`.
pub fn min_q(a: &MlpParams, b: &MlpParams, obs: &[f64]) -> Result<Vec<f64>, NnError> {
    let qa = a.predict(obs)?;
    let qb = b.predict(obs)?;
    Ok(qa.into_iter().zip(qb).map(|(x, y)| x.min(y)).collect())
}

/// Samples from `softmax(q_row / alpha)` and returns `(action, log pi(action))`.
pub fn sample_softmax<R: Rng + ?Sized>(
    q_row: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<(usize, f64), TabularError> {
    let probs = softmax_policy(q_row, alpha)?.0;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = None;
    let mut last_positive = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = a;
            acc += p;
            if u < acc {
                chosen = Some(a);
                break;
            }
        }
    }
    let a = chosen.unwrap_or(last_positive);
    Ok((a, probs[a].ln()))
}

/// The two networks and temperature an acting worker needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub q_a: MlpParams,
    pub q_b: MlpParams,
    pub alpha: f64,
}

impl PolicySnapshot {
    pub fn q_row(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        min_q(&self.q_a, &self.q_b, obs)
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        rng: &mut R,
    ) -> Result<(usize, f64), AgentError> {
        let row = self.q_row(obs)?;
        Ok(sample_softmax(&row, self.alpha, rng)?)
    }

    /// Argmax action; lowest index wins ties.
    pub fn greedy(&self, obs: &[f64]) -> Result<usize, AgentError> {
        Ok(crate::tabular::argmax(&self.q_row(obs)?))
    }

    pub fn checksum(&self) -> u64 {
        self.q_a.checksum().rotate_left(1) ^ self.q_b.checksum() ^ self.alpha.to_bits()
    }

    pub fn input_dim(&self) -> usize {
        self.q_a.input_dim()
    }
}

/// Regression anchor: the `(state, action)` whose Q-value is trained.
#[derive(Debug, Clone, Copy)]
pub struct Anchor<'a> {
    pub state: &'a [f64],
    pub action: usize,
}

/// Loss/gradient bookkeeping of one train step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub loss1: f64,
    pub loss2: f64,
    pub mean_entropy: f64,
    pub alpha: f64,
    pub target_mean: f64,
}

/// Training input: single transitions (SQN, CF) or n-step segments (QOP).
#[derive(Debug, Clone, Copy)]
pub enum TrainInput<'a> {
    Transitions(&'a [Transition]),
    Segments(&'a [TrajectorySegment]),
}

/// Mean squared soft-Q regression loss `mean ½ (Q(s,a) - y)²` and its exact
/// gradient; targets are constants.
pub fn q_loss_and_grad(
    params: &MlpParams,
    anchors: &[Anchor<'_>],
    targets: &[f64],
) -> Result<(f64, Gradients), AgentError> {
    if anchors.len() != targets.len() {
        return Err(AgentError::Misaligned(targets.len(), anchors.len()));
    }
    if anchors.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    if let Some(&bad) = targets.iter().find(|t| !t.is_finite()) {
        return Err(AgentError::NonFiniteTarget(bad));
    }
    let inv = 1.0 / anchors.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut loss = 0.0;
    let mut out_grad = vec![0.0; params.output_dim()];
    for (anchor, &y) in anchors.iter().zip(targets) {
        let (q, cache) = params.forward(anchor.state)?;
        let err = q[anchor.action] - y;
        loss += 0.5 * err * err;
        out_grad.iter_mut().for_each(|g| *g = 0.0);
        out_grad[anchor.action] = err * inv;
        params.backward_into(&cache, &out_grad, &mut grads)?;
    }
    Ok((loss * inv, grads))
}

/// `r + gamma * v`, or exactly `r` when the episode terminated.
fn bootstrap(reward: f64, gamma: f64, done: bool, value: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * value
    }
}

/// Full learner state.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub config: AgentConfig,
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
    pub opt1: AdamState,
    pub opt2: AdamState,
    pub temperature: TemperatureState,
    rng: ChaCha8Rng,
}

impl AgentState {
    /// Two independently initialized main networks with zero output
    /// weights, so the initial policy is uniform; targets start as copies.
    pub fn new(config: AgentConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let mut q1 = MlpParams::init(
            &config.layer_sizes,
            config.seed.wrapping_mul(2).wrapping_add(1),
        )?;
        let mut q2 = MlpParams::init(
            &config.layer_sizes,
            config.seed.wrapping_mul(2).wrapping_add(2),
        )?;
        for net in [&mut q1, &mut q2] {
            let last = net.num_layers() - 1;
            net.weights_mut(last).fill(0.0);
        }
        Self::from_networks(config, q1, q2)
    }

    pub fn from_networks(
        config: AgentConfig,
        q1: MlpParams,
        q2: MlpParams,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        for net in [&q1, &q2] {
            if net.layer_sizes() != config.layer_sizes.as_slice() {
                return Err(AgentError::Nn(NnError::Shape(
                    config.layer_sizes.clone(),
                    net.layer_sizes().to_vec(),
                )));
            }
        }
        let q1_target = q1.clone();
        let q2_target = q2.clone();
        Ok(Self {
            opt1: AdamState::new(&q1),
            opt2: AdamState::new(&q2),
            temperature: config.temperature(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_a9e7),
            q1,
            q2,
            q1_target,
            q2_target,
            config,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.temperature.alpha
    }

    pub fn algorithm(&self) -> Algorithm {
        self.config.algorithm
    }

    fn acting_nets(&self) -> (&MlpParams, &MlpParams) {
        if self.config.algorithm.acts_on_targets() {
            (&self.q1_target, &self.q2_target)
        } else {
            (&self.q1, &self.q2)
        }
    }

    /// Immutable copy of what acting needs.
    pub fn snapshot(&self) -> PolicySnapshot {
        let (a, b) = self.acting_nets();
        PolicySnapshot {
            q_a: a.clone(),
            q_b: b.clone(),
            alpha: self.alpha(),
        }
    }

    /// Samples an action from the acting policy.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        rng: &mut R,
    ) -> Result<(usize, f64), AgentError> {
        let (a, b) = self.acting_nets();
        let row = min_q(a, b, obs)?;
        Ok(sample_softmax(&row, self.alpha(), rng)?)
    }

    /// `min(Q1_target, Q2_target)` at `obs`.
    pub fn target_q(&self, obs: &[f64]) -> Result<Vec<f64>, AgentError> {
        Ok(min_q(&self.q1_target, &self.q2_target, obs)?)
    }

    fn soft_value(
        &self,
        q_row: &[f64],
        scheme: BackupScheme,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, AgentError> {
        let alpha = self.alpha();
        Ok(match scheme {
            BackupScheme::Lse => soft_value_lse(q_row, alpha)?,
            BackupScheme::Expectation => {
                let pi = softmax_policy(q_row, alpha)?.0;
                let log_pi = log_softmax(q_row, alpha)?;
                pi.iter()
                    .zip(q_row)
                    .zip(&log_pi)
                    .map(|((p, q), lp)| p * (q - alpha * lp))
                    .sum()
            }
            BackupScheme::Sampled => {
                let (a, log_p) = sample_softmax(q_row, alpha, rng)?;
                q_row[a] - alpha * log_p
            }
        })
    }

    /// One-step SQN targets `r + gamma (1 - done) V(s')` under `scheme`.
    pub fn sqn_targets(
        &mut self,
        batch: &[Transition],
        scheme: BackupScheme,
    ) -> Result<Vec<f64>, AgentError> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let mut rng = self.rng.clone();
        let out = batch
            .iter()
            .map(|t| {
                if t.done {
                    return Ok(t.reward);
                }
                let row = self.target_q(&t.next_state)?;
                let v = self.soft_value(&row, scheme, &mut rng)?;
                Ok(bootstrap(t.reward, self.config.gamma, false, v))
            })
            .collect::<Result<Vec<_>, AgentError>>();
        self.rng = rng;
        out
    }

    /// Corrective-feedback targets `r + gamma (1 - done) alpha logsumexp(Q̄(s') / alpha)`.
    pub fn cf_targets(&self, batch: &[Transition]) -> Result<Vec<f64>, AgentError> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        batch.iter().map(|t| self.cf_target(t)).collect()
    }

    fn cf_target(&self, t: &Transition) -> Result<f64, AgentError> {
        if t.done {
            return Ok(t.reward);
        }
        let v = soft_value_lse(&self.target_q(&t.next_state)?, self.alpha())?;
        Ok(bootstrap(t.reward, self.config.gamma, false, v))
    }

    /// n-step target for a segment of length `L`:
    ///
    /// ```text
    /// sum_{k<L} gamma^k r_k + sum_{1<=k<L} gamma^k alpha H(pi(.|s_k))
    ///   + gamma^L (1 - done) alpha logsumexp(Q̄(s_L) / alpha)
    /// ```
    ///
    /// with `pi` the target-network softmax. Returns the target and the
    /// anchor transition `(s_0, a_0)`.
    pub fn qop_target<'a>(
        &self,
        segment: &'a TrajectorySegment,
    ) -> Result<(f64, &'a Transition), AgentError> {
        let first = segment.first().ok_or(SegmentError::Empty)?;
        let gamma = self.config.gamma;
        let alpha = self.alpha();
        let mut acc = first.reward;
        let mut discount = 1.0;
        for t in &segment.transitions[1..] {
            discount *= gamma;
            let pi = softmax_policy(&self.target_q(&t.state)?, alpha)?;
            acc += discount * t.reward + discount * alpha * policy_entropy(&pi.0);
        }
        let last = segment.last().expect("non-empty");
        if last.done {
            return Ok((acc, first));
        }
        let v = soft_value_lse(&self.target_q(&last.next_state)?, alpha)?;
        let tail = gamma.powi(segment.len() as i32);
        Ok((acc + tail * v, first))
    }

    pub fn qop_targets<'a>(
        &self,
        segments: &'a [TrajectorySegment],
    ) -> Result<(Vec<f64>, Vec<Anchor<'a>>), AgentError> {
        if segments.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let mut targets = Vec::with_capacity(segments.len());
        let mut anchors = Vec::with_capacity(segments.len());
        for seg in segments {
            let (y, first) = self.qop_target(seg)?;
            targets.push(y);
            anchors.push(Anchor {
                state: &first.state,
                action: first.action,
            });
        }
        Ok((targets, anchors))
    }

    /// Computes targets once, regresses both main networks on them, then
    /// polyak-averages the target networks and adapts the temperature.
    pub fn train_step(&mut self, input: TrainInput<'_>) -> Result<TrainMetrics, AgentError> {
        let (targets, anchors) = match (self.config.algorithm, input) {
            (Algorithm::Qop, TrainInput::Segments(segs)) => self.qop_targets(segs)?,
            (Algorithm::Qop, TrainInput::Transitions(_)) => {
                return Err(AgentError::InputKind {
                    algorithm: Algorithm::Qop,
                    input: "transitions",
                })
            }
            (algo, TrainInput::Transitions(batch)) => {
                let targets = match algo {
                    Algorithm::Sqn => self.sqn_targets(batch, self.config.scheme)?,
                    _ => self.cf_targets(batch)?,
                };
                (
                    targets,
                    batch
                        .iter()
                        .map(|t| Anchor {
                            state: &t.state,
                            action: t.action,
                        })
                        .collect(),
                )
            }
            (algo, TrainInput::Segments(_)) => {
                return Err(AgentError::InputKind {
                    algorithm: algo,
                    input: "segments",
                })
            }
        };

        let (loss1, g1) = q_loss_and_grad(&self.q1, &anchors, &targets)?;
        let (loss2, g2) = q_loss_and_grad(&self.q2, &anchors, &targets)?;
        adam_step(&mut self.q1, &g1, &mut self.opt1, self.config.lr)?;
        adam_step(&mut self.q2, &g2, &mut self.opt2, self.config.lr)?;
        polyak_update(&mut self.q1_target, &self.q1, self.config.tau)?;
        polyak_update(&mut self.q2_target, &self.q2, self.config.tau)?;

        let (a, b) = self.acting_nets();
        let mut entropies = Vec::with_capacity(anchors.len());
        for anchor in &anchors {
            let pi = softmax_policy(&min_q(a, b, anchor.state)?, self.alpha())?;
            entropies.push(policy_entropy(&pi.0));
        }
        let mean_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
        let neg: Vec<f64> = entropies.iter().map(|h| -h).collect();
        self.temperature = temperature_update(&self.temperature, &neg);

        Ok(TrainMetrics {
            loss1,
            loss2,
            mean_entropy,
            alpha: self.alpha(),
            target_mean: targets.iter().sum::<f64>() / targets.len() as f64,
        })
    }

    /// `max |min(Q1_target, Q2_target)(s, a) - Q*(s, a)|` over non-terminal
    /// states, with `Q*` from exact soft value iteration at the agent's
    /// temperature.
    pub fn tabular_consistency_probe(&self, mdp: &TabularMdp) -> Result<f64, AgentError> {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        if self.config.layer_sizes[0] != ns || self.config.num_actions() != na {
            return Err(AgentError::Encoding {
                states: ns,
                actions: na,
            });
        }
        let star = soft_value_iteration(mdp, self.alpha(), 1e-12, 1_000_000)?.q;
        let mut gap: f64 = 0.0;
        for s in (0..ns).filter(|&s| !mdp.is_terminal(s)) {
            let row = self.target_q(&one_hot(s, ns))?;
            for (a, q) in row.iter().enumerate() {
                gap = gap.max((q - star.get(s, a)).abs());
            }
        }
        Ok(gap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(algorithm: Algorithm, sizes: &[usize]) -> AgentConfig {
        AgentConfig {
            gamma: 0.9,
            alpha: 0.5,
            ..AgentConfig::new(algorithm, sizes.to_vec())
        }
    }

    fn zero_agent(algorithm: Algorithm, sizes: &[usize]) -> AgentState {
        let c = cfg(algorithm, sizes);
        AgentState::from_networks(
            c,
            MlpParams::zeros(sizes).unwrap(),
            MlpParams::zeros(sizes).unwrap(),
        )
        .unwrap()
    }

    fn transition(rng: &mut ChaCha8Rng, dim: usize, actions: usize, done: bool) -> Transition {
        Transition {
            state: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: rng.random_range(0..actions),
            reward: rng.random_range(-1.0..1.0),
            next_state: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            done,
            behavior_log_prob: -1.0,
            policy_version: 1,
        }
    }

    #[test]
    fn zero_networks_sample_uniformly() {
        let agent = zero_agent(Algorithm::Sqn, &[3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let (a, lp) = agent.act(&[0.1, 0.2, 0.3], &mut rng).unwrap();
            assert!((lp - 0.25f64.ln()).abs() < 1e-15);
            counts[a] += 1;
        }
        let sigma = (10_000.0 * 0.25 * 0.75f64).sqrt();
        for c in counts {
            assert!((c as f64 - 2500.0).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn near_zero_temperature_is_greedy() {
        let c = AgentConfig {
            alpha: 1e-8,
            ..cfg(Algorithm::SqnCf, &[3, 8, 4])
        };
        let mut agent = AgentState::from_networks(
            c,
            MlpParams::init(&[3, 8, 4], 1).unwrap(),
            MlpParams::init(&[3, 8, 4], 2).unwrap(),
        )
        .unwrap();
        agent.temperature = TemperatureState::fixed(1e-8);
        let obs = [0.3, -0.4, 0.9];
        let best = crate::tabular::argmax(&agent.target_q(&obs).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert_eq!(agent.act(&obs, &mut rng).unwrap().0, best);
        }
    }

    #[test]
    fn fresh_agent_acts_uniformly() {
        let agent = AgentState::new(cfg(Algorithm::Qop, &[3, 8, 4])).unwrap();
        let row = agent.snapshot().q_row(&[0.3, -0.4, 0.9]).unwrap();
        assert!(row.iter().all(|&q| q == row[0]), "{row:?}");
    }

    #[test]
    fn log_prob_matches_softmax_output() {
        let agent = AgentState::new(cfg(Algorithm::Sqn, &[3, 8, 5])).unwrap();
        let obs = [0.3, -0.4, 0.9];
        let row = min_q(&agent.q1, &agent.q2, &obs).unwrap();
        let probs = softmax_policy(&row, agent.alpha()).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (a, lp) = agent.act(&obs, &mut rng).unwrap();
            assert_eq!(lp, probs[a].ln());
        }
    }

    #[test]
    fn acting_networks_follow_algorithm() {
        let mut agent = AgentState::new(cfg(Algorithm::Sqn, &[2, 3])).unwrap();
        agent.q1_target = MlpParams::zeros(&[2, 3]).unwrap();
        assert_eq!(agent.snapshot().q_a, agent.q1);
        agent.config.algorithm = Algorithm::Qop;
        assert_eq!(agent.snapshot().q_a, agent.q1_target);
    }

    #[test]
    fn done_transitions_target_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = AgentState::new(cfg(Algorithm::Sqn, &[3, 6, 3])).unwrap();
        let batch: Vec<_> = (0..10).map(|_| transition(&mut rng, 3, 3, true)).collect();
        for scheme in [
            BackupScheme::Expectation,
            BackupScheme::Lse,
            BackupScheme::Sampled,
        ] {
            let t = agent.sqn_targets(&batch, scheme).unwrap();
            for (y, tr) in t.iter().zip(&batch) {
                assert_eq!(*y, tr.reward);
            }
        }
        assert_eq!(
            agent.cf_targets(&batch).unwrap(),
            batch.iter().map(|t| t.reward).collect::<Vec<_>>()
        );
        assert_eq!(
            agent.sqn_targets(&[], BackupScheme::Lse),
            Err(AgentError::EmptyBatch)
        );
    }

    #[test]
    fn expectation_and_lse_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agent = AgentState::new(cfg(Algorithm::Sqn, &[4, 8, 5])).unwrap();
        let batch: Vec<_> = (0..100)
            .map(|_| transition(&mut rng, 4, 5, false))
            .collect();
        let e = agent
            .sqn_targets(&batch, BackupScheme::Expectation)
            .unwrap();
        let l = agent.sqn_targets(&batch, BackupScheme::Lse).unwrap();
        for (a, b) in e.iter().zip(&l) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(l, agent.cf_targets(&batch).unwrap());
    }

    #[test]
    fn single_action_cf_target_is_plain_bootstrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let agent = AgentState::new(cfg(Algorithm::SqnCf, &[3, 5, 1])).unwrap();
        let t = transition(&mut rng, 3, 1, false);
        let q = agent.target_q(&t.next_state).unwrap()[0];
        assert_eq!(
            agent.cf_targets(std::slice::from_ref(&t)).unwrap()[0],
            t.reward + 0.9 * q
        );
    }

    #[test]
    fn one_step_segment_collapses_to_cf() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let agent = AgentState::new(cfg(Algorithm::Qop, &[3, 6, 4])).unwrap();
        for i in 0..50 {
            let t = transition(&mut rng, 3, 4, i % 5 == 0);
            let seg = TrajectorySegment::new(vec![t.clone()], false);
            assert_eq!(
                agent.qop_target(&seg).unwrap().0.to_bits(),
                agent.cf_targets(&[t]).unwrap()[0].to_bits()
            );
        }
    }

    #[test]
    fn zero_discount_segment_target_is_first_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let agent = AgentState::new(AgentConfig {
            gamma: 0.0,
            ..cfg(Algorithm::Qop, &[2, 3])
        })
        .unwrap();
        let a = transition(&mut rng, 2, 3, false);
        let mut b = transition(&mut rng, 2, 3, false);
        b.state = a.next_state.clone();
        let seg = TrajectorySegment::new(vec![a.clone(), b], false);
        assert_eq!(agent.qop_target(&seg).unwrap().0, a.reward);
        assert_eq!(
            agent.qop_target(&TrajectorySegment::new(vec![], false)),
            Err(AgentError::Segment(SegmentError::Empty))
        );
    }

    #[test]
    fn temperature_rule() {
        let fixed = TemperatureState::fixed(0.2);
        assert_eq!(temperature_update(&fixed, &[-0.1, -3.0]), fixed);
        let t = TemperatureState::adaptive(0.2, 1.0, 0.1);
        // Mean entropy exactly at target: no change.
        assert_eq!(temperature_update(&t, &[-1.0, -1.0]).log_alpha, t.log_alpha);
        // Entropy below target: alpha grows.
        let up = temperature_update(&t, &[-0.2, -0.4]);
        assert!(up.alpha > t.alpha);
        assert!((up.alpha - up.log_alpha.exp()).abs() == 0.0);
        let down = temperature_update(&t, &[-1.5]);
        assert!(down.alpha < t.alpha);
    }

    #[test]
    fn loss_vanishes_at_current_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = MlpParams::init(&[3, 6, 4], 1).unwrap();
        let batch: Vec<_> = (0..8).map(|_| transition(&mut rng, 3, 4, false)).collect();
        let anchors: Vec<_> = batch
            .iter()
            .map(|t| Anchor {
                state: &t.state,
                action: t.action,
            })
            .collect();
        let targets: Vec<f64> = anchors
            .iter()
            .map(|a| net.predict(a.state).unwrap()[a.action])
            .collect();
        let (loss, g) = q_loss_and_grad(&net, &anchors, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        assert!(matches!(
            q_loss_and_grad(&net, &anchors, &targets[..3]),
            Err(AgentError::Misaligned(3, 8))
        ));
        let mut bad = targets.clone();
        bad[0] = f64::NAN;
        assert!(matches!(
            q_loss_and_grad(&net, &anchors, &bad),
            Err(AgentError::NonFiniteTarget(_))
        ));
    }

    #[test]
    fn linear_loss_gradient_single_sample() {
        let net = MlpParams::init(&[3, 2], 1).unwrap();
        let s = [0.5, -1.0, 2.0];
        let q = net.predict(&s).unwrap();
        let (_, g) = q_loss_and_grad(
            &net,
            &[Anchor {
                state: &s,
                action: 1,
            }],
            &[0.3],
        )
        .unwrap();
        let err = q[1] - 0.3;
        for i in 0..3 {
            assert_eq!(g.weights(0)[i], 0.0);
            assert_eq!(g.weights(0)[3 + i], err * s[i]);
        }
        assert_eq!(g.biases(0), &[0.0, err]);
    }

    #[test]
    fn train_step_is_deterministic_and_honours_tau_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch: Vec<_> = (0..16).map(|_| transition(&mut rng, 3, 4, false)).collect();
        let agent = AgentState::new(AgentConfig {
            tau: 0.0,
            ..cfg(Algorithm::SqnCf, &[3, 8, 4])
        })
        .unwrap();
        let mut a = agent.clone();
        let mut b = agent.clone();
        let ma = a.train_step(TrainInput::Transitions(&batch)).unwrap();
        let mb = b.train_step(TrainInput::Transitions(&batch)).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.q1_target, agent.q1_target);
        assert_eq!(a.q2_target, agent.q2_target);
        assert_ne!(a.q1, agent.q1);
    }

    #[test]
    fn train_step_rejects_wrong_input_kind() {
        let mut agent = AgentState::new(cfg(Algorithm::Qop, &[3, 4])).unwrap();
        assert!(matches!(
            agent.train_step(TrainInput::Transitions(&[])),
            Err(AgentError::InputKind { .. })
        ));
        let mut agent = AgentState::new(cfg(Algorithm::Sqn, &[3, 4])).unwrap();
        assert!(matches!(
            agent.train_step(TrainInput::Segments(&[])),
            Err(AgentError::InputKind { .. })
        ));
    }

    #[test]
    fn repeated_steps_fit_a_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch: Vec<_> = (0..16).map(|_| transition(&mut rng, 3, 4, true)).collect();
        let mut agent = AgentState::new(AgentConfig {
            lr: 1e-2,
            ..cfg(Algorithm::SqnCf, &[3, 16, 4])
        })
        .unwrap();
        let first = agent.train_step(TrainInput::Transitions(&batch)).unwrap();
        let mut last = first;
        for _ in 0..99 {
            last = agent.train_step(TrainInput::Transitions(&batch)).unwrap();
        }
        assert!(last.loss1 < first.loss1 && last.loss2 < first.loss2);
    }

    #[test]
    fn probe_of_untrained_zero_net_is_sup_norm_of_optimum() {
        let mdp = crate::mdp::build_gridworld(3, 2, 0.9, 0.1).unwrap();
        let agent = zero_agent(Algorithm::SqnCf, &[6, 4]);
        let star = soft_value_iteration(&mdp, 0.5, 1e-12, 100_000).unwrap().q;
        let gap = agent.tabular_consistency_probe(&mdp).unwrap();
        assert!(gap >= 0.0);
        assert!((gap - star.sup_norm()).abs() < 1e-12);
        let wrong = zero_agent(Algorithm::SqnCf, &[5, 4]);
        assert!(matches!(
            wrong.tabular_consistency_probe(&mdp),
            Err(AgentError::Encoding { .. })
        ));
    }
}
