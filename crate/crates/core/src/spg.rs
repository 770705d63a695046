//! Numerical check that the soft-Q regression gradient equals a value
//! regression gradient plus a soft policy gradient.
//!
//! With `pi = softmax(Q / alpha)`, each Q-value splits as
//! `Q(s,a) = V(s) + alpha log pi(a|s)` where `V = alpha logsumexp(Q / alpha)`.
//! Differentiating `½ (Q(s,a) - y)²` through this split gives
//!
//! ```text
//! grad V (V - (y - alpha log pi(a|s)))                     value term
//! - alpha grad log pi(a|s) (y - V - alpha log pi(a|s))     policy term
//! ```
//!
//! The value term regresses `V` on the entropy-corrected target
//! `y - alpha log pi(a|s)`. Regressing `V` on `y` alone drops the cross term
//! `alpha log pi(a|s) grad V` and does not reproduce the soft-Q gradient;
//! [`SpgVariant::PlainValueTarget`] keeps that form around as a negative
//! control.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{q_loss_and_grad, sample_softmax, AgentError, Anchor};
use crate::nn::{
    finite_diff_grad, max_abs_deviation, max_relative_deviation, Gradients, MlpParams, NnError,
};
use crate::tabular::{log_sum_exp, TabularError};

/// Equivalence tolerance on the max relative deviation.
pub const EQUIVALENCE_TOL: f64 = 1e-6;
/// Finite-difference agreement tolerance.
pub const FINITE_DIFF_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum SpgError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error("temperature must be positive, got {0}")]
    Alpha(f64),
    #[error("non-finite {0} gradient")]
    NonFinite(&'static str),
    #[error("non-finite target {0}")]
    NonFiniteTarget(f64),
}

/// `(V, log pi)` with `V = alpha logsumexp(Q / alpha)` and
/// `log pi = Q / alpha - logsumexp(Q / alpha)`.
pub fn decompose_q(
    params: &MlpParams,
    obs: &[f64],
    alpha: f64,
) -> Result<(f64, Vec<f64>), SpgError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SpgError::Alpha(alpha));
    }
    let q = params.predict(obs)?;
    Ok(decompose_row(&q, alpha))
}

fn decompose_row(q: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let scaled: Vec<f64> = q.iter().map(|v| v / alpha).collect();
    let lse = log_sum_exp(&scaled);
    (alpha * lse, scaled.iter().map(|x| x - lse).collect())
}

/// Gradient of `mean ½ (Q(s,a) - y)²`.
pub fn sql_gradient(
    params: &MlpParams,
    anchors: &[Anchor<'_>],
    targets: &[f64],
) -> Result<Gradients, SpgError> {
    Ok(q_loss_and_grad(params, anchors, targets)?.1)
}

/// Which form of the split gradient to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpgVariant {
    /// Value term on `y - alpha log pi`, plus the policy term.
    Exact,
    /// Value term only.
    DropPolicyTerm,
    /// Value term on `y` instead of `y - alpha log pi`.
    PlainValueTarget,
}

/// The two halves of the split gradient and their sum.
#[derive(Debug, Clone)]
pub struct SpgGradients {
    pub value: Gradients,
    pub policy: Gradients,
    pub total: Gradients,
}

/// Value-plus-policy form of the soft-Q regression gradient.
pub fn spg_gradient(
    params: &MlpParams,
    anchors: &[Anchor<'_>],
    targets: &[f64],
    alpha: f64,
) -> Result<SpgGradients, SpgError> {
    spg_gradient_variant(params, anchors, targets, alpha, SpgVariant::Exact)
}

pub fn spg_gradient_variant(
    params: &MlpParams,
    anchors: &[Anchor<'_>],
    targets: &[f64],
    alpha: f64,
    variant: SpgVariant,
) -> Result<SpgGradients, SpgError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SpgError::Alpha(alpha));
    }
    if anchors.len() != targets.len() {
        return Err(AgentError::Misaligned(targets.len(), anchors.len()).into());
    }
    if anchors.is_empty() {
        return Err(AgentError::EmptyBatch.into());
    }
    if let Some(&bad) = targets.iter().find(|t| !t.is_finite()) {
        return Err(SpgError::NonFiniteTarget(bad));
    }
    let inv = 1.0 / anchors.len() as f64;
    let mut value = Gradients::zeros_like(params);
    let mut policy = Gradients::zeros_like(params);
    for (anchor, &y) in anchors.iter().zip(targets) {
        let (q, cache) = params.forward(anchor.state)?;
        let (v, log_pi) = decompose_row(&q, alpha);
        let pi: Vec<f64> = log_pi.iter().map(|l| l.exp()).collect();
        let a = anchor.action;
        let value_target = match variant {
            SpgVariant::PlainValueTarget => y,
            _ => y - alpha * log_pi[a],
        };
        // d V / d Q_j = pi_j
        let value_grad: Vec<f64> = pi.iter().map(|p| (v - value_target) * p * inv).collect();
        params.backward_into(&cache, &value_grad, &mut value)?;
        if variant != SpgVariant::DropPolicyTerm {
            // d log pi_a / d Q_j = (delta_aj - pi_j) / alpha
            let advantage = y - v - alpha * log_pi[a];
            let policy_grad: Vec<f64> = pi
                .iter()
                .enumerate()
                .map(|(j, p)| -((a == j) as u8 as f64 - p) * advantage * inv)
                .collect();
            params.backward_into(&cache, &policy_grad, &mut policy)?;
        }
    }
    let mut total = value.clone();
    total.add_assign(&policy)?;
    if total.data().iter().any(|g| !g.is_finite()) {
        return Err(SpgError::NonFinite("split"));
    }
    Ok(SpgGradients {
        value,
        policy,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDeviation {
    pub layer: usize,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDescriptor {
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub batch_size: usize,
    pub alpha: f64,
}

/// Outcome of comparing the two gradient routes on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub max_abs_deviation: f64,
    /// Relative to the sup norm of the soft-Q gradient.
    pub max_rel_deviation: f64,
    pub per_layer: Vec<LayerDeviation>,
    pub batch: BatchDescriptor,
    /// Soft-Q gradient against central differences of its loss.
    pub sql_vs_finite_diff: f64,
    /// Split gradient against the same central differences.
    pub spg_vs_finite_diff: f64,
    pub passed: bool,
    pub finite_diff_passed: bool,
}

/// A random batch whose actions are drawn from the network's own softmax.
pub struct SyntheticBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub targets: Vec<f64>,
}

impl SyntheticBatch {
    pub fn anchors(&self) -> Vec<Anchor<'_>> {
        self.states
            .iter()
            .zip(&self.actions)
            .map(|(s, &a)| Anchor {
                state: s,
                action: a,
            })
            .collect()
    }
}

/// Standard-normal states, on-policy actions, and targets offset from the
/// current Q-values by standard-normal noise.
pub fn synthetic_batch(
    params: &MlpParams,
    batch_size: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticBatch, SpgError> {
    let mut batch = SyntheticBatch {
        states: Vec::new(),
        actions: Vec::new(),
        targets: Vec::new(),
    };
    for _ in 0..batch_size {
        let s: Vec<f64> = (0..params.input_dim())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let q = params.predict(&s)?;
        let (a, _) = sample_softmax(&q, alpha, rng)?;
        let noise: f64 = StandardNormal.sample(rng);
        batch.targets.push(q[a] + noise);
        batch.actions.push(a);
        batch.states.push(s);
    }
    Ok(batch)
}

/// He-initialized weights with `N(0, 0.1²)` biases, so that no ReLU input
/// sits exactly at its kink.
pub fn random_network(
    sizes: &[usize],
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<MlpParams, SpgError> {
    let mut params = MlpParams::init(sizes, seed)?;
    for l in 0..params.num_layers() {
        for b in params.biases_mut(l) {
            let z: f64 = StandardNormal.sample(rng);
            *b = 0.1 * z;
        }
    }
    Ok(params)
}

/// Builds a random network and on-policy batch from `seed`, then compares
/// the soft-Q and split gradients. Passes iff the max relative deviation is
/// below [`EQUIVALENCE_TOL`].
pub fn verify_equivalence(
    seed: u64,
    net_spec: &[usize],
    batch_size: usize,
    alpha: f64,
) -> Result<GradientReport, SpgError> {
    verify_equivalence_variant(seed, net_spec, batch_size, alpha, SpgVariant::Exact)
}

pub fn verify_equivalence_variant(
    seed: u64,
    net_spec: &[usize],
    batch_size: usize,
    alpha: f64,
    variant: SpgVariant,
) -> Result<GradientReport, SpgError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb47c_4000);
    let params = random_network(net_spec, seed, &mut rng)?;
    let batch = synthetic_batch(&params, batch_size, alpha, &mut rng)?;
    let anchors = batch.anchors();
    let sql = sql_gradient(&params, &anchors, &batch.targets)?;
    let spg = spg_gradient_variant(&params, &anchors, &batch.targets, alpha, variant)?;
    if sql.data().iter().any(|g| !g.is_finite()) {
        return Err(SpgError::NonFinite("soft-Q"));
    }

    let per_layer = (0..params.num_layers())
        .map(|l| {
            let r = sql.layer_range(l);
            LayerDeviation {
                layer: l,
                max_abs: max_abs_deviation(&spg.total.data()[r.clone()], &sql.data()[r.clone()]),
                max_rel: max_relative_deviation(&spg.total.data()[r.clone()], &sql.data()[r]),
            }
        })
        .collect();

    let loss = |p: &MlpParams| {
        anchors
            .iter()
            .zip(&batch.targets)
            .map(|(an, y)| {
                0.5 * (p.predict(an.state).expect("shape checked")[an.action] - y).powi(2)
            })
            .sum::<f64>()
            / anchors.len() as f64
    };
    let numeric = finite_diff_grad(loss, &params, 1e-6)?;
    let sql_fd = max_relative_deviation(sql.data(), numeric.data());
    let spg_fd = max_relative_deviation(spg.total.data(), numeric.data());

    let max_rel = max_relative_deviation(spg.total.data(), sql.data());
    Ok(GradientReport {
        max_abs_deviation: max_abs_deviation(spg.total.data(), sql.data()),
        max_rel_deviation: max_rel,
        per_layer,
        batch: BatchDescriptor {
            seed,
            layer_sizes: net_spec.to_vec(),
            batch_size,
            alpha,
        },
        sql_vs_finite_diff: sql_fd,
        spg_vs_finite_diff: spg_fd,
        passed: max_rel < EQUIVALENCE_TOL,
        finite_diff_passed: sql_fd < FINITE_DIFF_TOL && spg_fd < FINITE_DIFF_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decompose_zero_row() {
        let p = MlpParams::zeros(&[2, 4]).unwrap();
        let (v, lp) = decompose_q(&p, &[0.3, 0.1], 0.7).unwrap();
        assert!((v - 0.7 * 4f64.ln()).abs() < 1e-15);
        for l in lp {
            assert!((l + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn decompose_single_action() {
        let p = MlpParams::init(&[3, 5, 1], 2).unwrap();
        let obs = [0.1, 0.2, -0.3];
        let (v, lp) = decompose_q(&p, &obs, 0.4).unwrap();
        assert!((v - p.predict(&obs).unwrap()[0]).abs() < 1e-15);
        assert_eq!(lp, vec![0.0]);
    }

    #[test]
    fn decompose_reconstructs_q() {
        let p = MlpParams::init(&[3, 8, 5], 3).unwrap();
        let obs = [0.5, -1.2, 0.8];
        let q = p.predict(&obs).unwrap();
        for alpha in [1e-2, 0.3, 1.0, 50.0] {
            let (v, lp) = decompose_q(&p, &obs, alpha).unwrap();
            for (a, l) in lp.iter().enumerate() {
                assert!((v + alpha * l - q[a]).abs() < 1e-12);
            }
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            decompose_q(&p, &obs, 0.0).unwrap_err(),
            SpgError::Alpha(0.0)
        );
    }

    #[test]
    fn targets_at_current_values_zero_both_routes() {
        let p = MlpParams::init(&[3, 8, 4], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = synthetic_batch(&p, 6, 0.5, &mut rng).unwrap();
        for (i, s) in batch.states.iter().enumerate() {
            batch.targets[i] = p.predict(s).unwrap()[batch.actions[i]];
        }
        let anchors = batch.anchors();
        assert_eq!(
            sql_gradient(&p, &anchors, &batch.targets)
                .unwrap()
                .max_abs(),
            0.0
        );
        let spg = spg_gradient(&p, &anchors, &batch.targets, 0.5).unwrap();
        assert!(spg.total.max_abs() < 1e-14);
    }

    #[test]
    fn single_action_network_is_pure_value_regression() {
        let p = MlpParams::init(&[3, 6, 1], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = synthetic_batch(&p, 1, 0.5, &mut rng).unwrap();
        let spg = spg_gradient(&p, &batch.anchors(), &batch.targets, 0.5).unwrap();
        assert_eq!(spg.policy.max_abs(), 0.0);
        let sql = sql_gradient(&p, &batch.anchors(), &batch.targets).unwrap();
        assert!(max_relative_deviation(spg.value.data(), sql.data()) < 1e-12);
    }

    #[test]
    fn duplicated_batch_leaves_mean_gradient_unchanged() {
        let p = MlpParams::init(&[3, 6, 4], 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = synthetic_batch(&p, 5, 0.5, &mut rng).unwrap();
        let mut anchors = b.anchors();
        let once = sql_gradient(&p, &anchors, &b.targets).unwrap();
        anchors.extend(b.anchors());
        let targets: Vec<f64> = b.targets.iter().chain(&b.targets).copied().collect();
        let twice = sql_gradient(&p, &anchors, &targets).unwrap();
        assert!(max_relative_deviation(twice.data(), once.data()) < 1e-14);
    }

    #[test]
    fn reference_draw_passes() {
        let report = verify_equivalence(0, &[8, 16, 4], 16, 0.7).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.finite_diff_passed, "{report:?}");
        assert_eq!(report.per_layer.len(), 2);
    }

    #[test]
    fn extreme_temperatures_pass() {
        for alpha in [1e3, 1e-2] {
            let report = verify_equivalence(1, &[8, 16, 4], 16, alpha).unwrap();
            assert!(report.passed, "alpha {alpha}: {report:?}");
        }
    }

    #[test]
    fn dropping_the_policy_term_is_detected() {
        let report =
            verify_equivalence_variant(0, &[8, 16, 4], 16, 0.7, SpgVariant::DropPolicyTerm)
                .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_deviation > 1e-3);
    }

    #[test]
    fn plain_value_target_misses_cross_term() {
        let report =
            verify_equivalence_variant(0, &[8, 16, 4], 16, 0.7, SpgVariant::PlainValueTarget)
                .unwrap();
        assert!(report.max_rel_deviation > 1e-3, "{report:?}");
    }
}
