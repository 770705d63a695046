//! Exact entropy-regularized computations on tabular MDPs.
//!
//! Everything here is a pure function in `f64` and serves as the oracle
//! against which the neural agents are checked. The soft value of a policy
//! at a non-terminal state is
//!
//! ```text
//! V(s) = sum_a pi(a|s) (Q(s,a) - alpha log pi(a|s))
//! Q(s,a) = r(s,a) + gamma * sum_s' P(s'|s,a) V(s')
//! ```
//!
//! and terminal states have `V = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::TabularMdp;

/// Row-normalization tolerance for policies.
pub const POLICY_TOL: f64 = 1e-12;

/// Above this many states evaluation iterates instead of solving directly.
const DIRECT_SOLVE_LIMIT: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum TabularError {
    #[error("temperature must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("empty action row")]
    EmptyRow,
    #[error("non-finite value {0} in input")]
    NonFinite(f64),
    #[error(
        "shape mismatch: expected {expected_states}x{expected_actions}, got {states}x{actions}"
    )]
    Shape {
        expected_states: usize,
        expected_actions: usize,
        states: usize,
        actions: usize,
    },
    #[error("policy row {state} is not a distribution (sum {sum})")]
    PolicyRow { state: usize, sum: f64 },
    #[error("no convergence after {iters} iterations (residual {residual:e})")]
    NotConverged { iters: usize, residual: f64 },
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("linear system is singular")]
    Singular,
}

/// A probability vector over discrete actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution(pub Vec<f64>);

impl ActionDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Index of the most probable action; lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Soft action values `Q[s][a]` at temperature `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
    pub alpha: f64,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize, alpha: f64) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
            alpha,
        }
    }

    pub fn from_values(
        num_states: usize,
        num_actions: usize,
        values: Vec<f64>,
        alpha: f64,
    ) -> Result<Self, TabularError> {
        if values.len() != num_states * num_actions {
            return Err(TabularError::Shape {
                expected_states: num_states,
                expected_actions: num_actions,
                states: values.len() / num_actions.max(1),
                actions: num_actions,
            });
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(TabularError::NonFinite(bad));
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
            alpha,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.num_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `max |self - other|` over all entries.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `max |Q|` over all entries.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<(), TabularError> {
        check_shape(mdp, self.num_states, self.num_actions)
    }
}

/// A stochastic policy `pi[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
    ) -> Result<Self, TabularError> {
        if probs.len() != num_states * num_actions {
            return Err(TabularError::Shape {
                expected_states: num_states,
                expected_actions: num_actions,
                states: probs.len() / num_actions.max(1),
                actions: num_actions,
            });
        }
        let policy = Self {
            num_states,
            num_actions,
            probs,
        };
        for s in 0..num_states {
            let row = policy.row(s);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > POLICY_TOL || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(TabularError::PolicyRow { state: s, sum });
            }
        }
        Ok(policy)
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// Puts all mass on `actions[s]` in each state.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * num_actions + a] = 1.0;
        }
        Self {
            num_states: actions.len(),
            num_actions,
            probs,
        }
    }

    /// Row-wise `softmax(Q / alpha)`.
    pub fn softmax_of(q: &QTable) -> Result<Self, TabularError> {
        let mut probs = Vec::with_capacity(q.values.len());
        for s in 0..q.num_states {
            probs.extend(softmax_policy(q.row(s), q.alpha)?.0);
        }
        Ok(Self {
            num_states: q.num_states,
            num_actions: q.num_actions,
            probs,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn check_shape(mdp: &TabularMdp, states: usize, actions: usize) -> Result<(), TabularError> {
    if mdp.num_states() != states || mdp.num_actions() != actions {
        return Err(TabularError::Shape {
            expected_states: mdp.num_states(),
            expected_actions: mdp.num_actions(),
            states,
            actions,
        });
    }
    Ok(())
}

fn check_row(q_row: &[f64], alpha: f64) -> Result<(), TabularError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(TabularError::Alpha(alpha));
    }
    if q_row.is_empty() {
        return Err(TabularError::EmptyRow);
    }
    if let Some(&bad) = q_row.iter().find(|v| !v.is_finite()) {
        return Err(TabularError::NonFinite(bad));
    }
    Ok(())
}

/// `log sum_i exp(x_i)` with max-subtraction. `x` must be non-empty.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `softmax(q_row / alpha)`, stabilized by subtracting the row maximum.
pub fn softmax_policy(q_row: &[f64], alpha: f64) -> Result<ActionDistribution, TabularError> {
    check_row(q_row, alpha)?;
    let m = q_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = q_row.iter().map(|q| ((q - m) / alpha).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    Ok(ActionDistribution(
        unnorm.into_iter().map(|u| u / z).collect(),
    ))
}

/// `log softmax(q_row / alpha)`.
pub fn log_softmax(q_row: &[f64], alpha: f64) -> Result<Vec<f64>, TabularError> {
    check_row(q_row, alpha)?;
    let scaled: Vec<f64> = q_row.iter().map(|q| q / alpha).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.into_iter().map(|x| x - lse).collect())
}

/// Soft state value `alpha * log sum_a exp(Q(s,a) / alpha)`.
pub fn soft_value_lse(q_row: &[f64], alpha: f64) -> Result<f64, TabularError> {
    check_row(q_row, alpha)?;
    if q_row.len() == 1 {
        return Ok(q_row[0]);
    }
    let m = q_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = q_row.iter().map(|q| ((q - m) / alpha).exp()).sum();
    Ok(m + alpha * sum.ln())
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn policy_entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Soft value of each state under `policy`:
/// `V(s) = sum_a pi(a|s) r(s,a) + alpha H(pi(.|s)) + gamma sum_s' P_pi(s'|s) V(s')`,
/// with `V = 0` on terminal states.
fn policy_state_values(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    alpha: f64,
) -> Result<Vec<f64>, TabularError> {
    let ns = mdp.num_states();
    let gamma = mdp.gamma();
    let mut bonus = vec![0.0; ns];
    let mut p_pi = vec![0.0; ns * ns];
    for s in 0..ns {
        if mdp.is_terminal(s) {
            continue;
        }
        let row = policy.row(s);
        bonus[s] = alpha * policy_entropy(row);
        for (a, &pa) in row.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            bonus[s] += pa * mdp.reward(s, a);
            for (next, &p) in mdp.next_distribution(s, a).iter().enumerate() {
                p_pi[s * ns + next] += pa * p;
            }
        }
    }

    if ns <= DIRECT_SOLVE_LIMIT {
        let mut system = DMatrix::<f64>::identity(ns, ns);
        for s in 0..ns {
            if mdp.is_terminal(s) {
                continue;
            }
            for next in 0..ns {
                system[(s, next)] -= gamma * p_pi[s * ns + next];
            }
        }
        let rhs = DVector::from_vec(bonus);
        let solution = system.lu().solve(&rhs).ok_or(TabularError::Singular)?;
        let mut values: Vec<f64> = solution.iter().copied().collect();
        // One Bellman sweep polishes the LU round-off.
        values = (0..ns)
            .map(|s| {
                if mdp.is_terminal(s) {
                    0.0
                } else {
                    let rhs = rhs[s];
                    rhs + gamma * (0..ns).map(|n| p_pi[s * ns + n] * values[n]).sum::<f64>()
                }
            })
            .collect();
        Ok(values)
    } else {
        let mut values = vec![0.0; ns];
        for _ in 0..100_000 {
            let next: Vec<f64> = (0..ns)
                .map(|s| {
                    bonus[s] + gamma * (0..ns).map(|n| p_pi[s * ns + n] * values[n]).sum::<f64>()
                })
                .collect();
            let residual = next
                .iter()
                .zip(&values)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            values = next;
            if residual < 1e-10 {
                return Ok(values);
            }
        }
        Err(TabularError::NotConverged {
            iters: 100_000,
            residual: f64::NAN,
        })
    }
}

fn q_from_state_values(mdp: &TabularMdp, values: &[f64], alpha: f64) -> QTable {
    let ns = mdp.num_states();
    let na = mdp.num_actions();
    let mut q = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let expected: f64 = mdp
                .next_distribution(s, a)
                .iter()
                .zip(values)
                .map(|(p, v)| p * v)
                .sum();
            q.push(mdp.reward(s, a) + mdp.gamma() * expected);
        }
    }
    QTable {
        num_states: ns,
        num_actions: na,
        values: q,
        alpha,
    }
}

/// Exact soft Q-function of `policy`: the fixed point of the soft Bellman
/// operator for that policy. Uses a direct linear solve over state values.
pub fn soft_policy_evaluation(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    alpha: f64,
) -> Result<QTable, TabularError> {
    check_shape(mdp, policy.num_states, policy.num_actions)?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(TabularError::Alpha(alpha));
    }
    let values = policy_state_values(mdp, policy, alpha)?;
    Ok(q_from_state_values(mdp, &values, alpha))
}

/// One full sweep of the corrective-feedback backup
/// `Q'(s,a) = r(s,a) + gamma * E_s'[alpha log Z(s')]`, with the expectation
/// taken exactly from the transition tensor.
pub fn cf_backup(mdp: &TabularMdp, q: &QTable) -> Result<QTable, TabularError> {
    q.check_shape(mdp)?;
    let values = (0..mdp.num_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                Ok(0.0)
            } else {
                soft_value_lse(q.row(s), q.alpha)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(q_from_state_values(mdp, &values, q.alpha))
}

/// Fixed point of [`cf_backup`] together with the sup-norm residual of every
/// sweep.
#[derive(Debug, Clone)]
pub struct ValueIteration {
    pub q: QTable,
    pub residuals: Vec<f64>,
}

/// Iterates [`cf_backup`] from `Q = 0` until the sup-norm change of a sweep
/// drops below `tol`.
pub fn soft_value_iteration(
    mdp: &TabularMdp,
    alpha: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ValueIteration, TabularError> {
    if !(tol > 0.0) {
        return Err(TabularError::Tolerance(tol));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(TabularError::Alpha(alpha));
    }
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions(), alpha);
    let mut residuals = Vec::new();
    for _ in 0..max_iters {
        let next = cf_backup(mdp, &q)?;
        let residual = next.sup_distance(&q);
        residuals.push(residual);
        q = next;
        if residual < tol {
            return Ok(ValueIteration { q, residuals });
        }
    }
    Err(TabularError::NotConverged {
        iters: max_iters,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// Standard (hard-max) value iteration; the `alpha -> 0` limit of
/// [`soft_value_iteration`]. Returns `Q*` as a table with `alpha = 0`.
pub fn hard_value_iteration(
    mdp: &TabularMdp,
    tol: f64,
    max_iters: usize,
) -> Result<QTable, TabularError> {
    let ns = mdp.num_states();
    let na = mdp.num_actions();
    let mut q = QTable::zeros(ns, na, 0.0);
    for _ in 0..max_iters {
        let values: Vec<f64> = (0..ns)
            .map(|s| {
                if mdp.is_terminal(s) {
                    0.0
                } else {
                    q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let next = q_from_state_values(mdp, &values, 0.0);
        let residual = next.sup_distance(&q);
        q = next;
        if residual < tol {
            return Ok(q);
        }
    }
    Err(TabularError::NotConverged {
        iters: max_iters,
        residual: f64::NAN,
    })
}

/// Sequence produced by exact soft policy iteration.
#[derive(Debug, Clone)]
pub struct PolicyIteration {
    /// `Q^{pi_k}` for `k = 1..=iters`.
    pub q_tables: Vec<QTable>,
    /// `pi_k = softmax(Q^{pi_{k-1}} / alpha)`, starting from `softmax(0)`.
    pub policies: Vec<TabularPolicy>,
}

/// Alternates `pi_new = softmax(Q_old / alpha)` with exact evaluation,
/// starting from `Q = 0`.
pub fn soft_policy_iteration(
    mdp: &TabularMdp,
    alpha: f64,
    iters: usize,
) -> Result<PolicyIteration, TabularError> {
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions(), alpha);
    let mut out = PolicyIteration {
        q_tables: Vec::with_capacity(iters),
        policies: Vec::with_capacity(iters),
    };
    for _ in 0..iters.max(1) {
        let policy = TabularPolicy::softmax_of(&q)?;
        q = soft_policy_evaluation(mdp, &policy, alpha)?;
        out.policies.push(policy);
        out.q_tables.push(q.clone());
    }
    Ok(out)
}

/// Upper bound on the truncation error of [`brute_force_return`].
pub fn truncation_bound(mdp: &TabularMdp, alpha: f64, horizon: usize) -> f64 {
    let g = mdp.gamma();
    let per_step = mdp.max_abs_reward() + alpha * (mdp.num_actions() as f64).ln();
    g.powi(horizon as i32 + 1) * per_step / (1.0 - g)
}

/// Expected entropy-regularized return from `(state, action)`, truncated
/// after `horizon` steps and computed by propagating the exact state
/// distribution forward. Rewards `r_t` for `t = 0..=horizon` and the entropy
/// bonus of `s_t` for `t = 1..=horizon` are weighted by `gamma^t`. Terminal
/// states contribute nothing.
pub fn brute_force_return(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    alpha: f64,
    horizon: usize,
    start: (usize, usize),
) -> Result<f64, TabularError> {
    check_shape(mdp, policy.num_states, policy.num_actions)?;
    let ns = mdp.num_states();
    let (s0, a0) = start;
    let gamma = mdp.gamma();
    let mut total = mdp.reward(s0, a0);
    if mdp.is_terminal(s0) {
        return Ok(total);
    }
    let per_state: Vec<f64> = (0..ns)
        .map(|s| {
            if mdp.is_terminal(s) {
                0.0
            } else {
                let row = policy.row(s);
                alpha * policy_entropy(row)
                    + row
                        .iter()
                        .enumerate()
                        .map(|(a, p)| p * mdp.reward(s, a))
                        .sum::<f64>()
            }
        })
        .collect();
    let mut dist = mdp.next_distribution(s0, a0).to_vec();
    let mut discount = 1.0;
    for _ in 1..=horizon {
        discount *= gamma;
        if discount == 0.0 {
            break;
        }
        total += discount * dist.iter().zip(&per_state).map(|(d, v)| d * v).sum::<f64>();
        let mut next = vec![0.0; ns];
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 || mdp.is_terminal(s) {
                continue;
            }
            for (a, &pa) in policy.row(s).iter().enumerate() {
                for (n, &p) in mdp.next_distribution(s, a).iter().enumerate() {
                    next[n] += mass * pa * p;
                }
            }
        }
        dist = next;
    }
    Ok(total)
}
