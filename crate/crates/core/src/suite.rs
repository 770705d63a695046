//! Verification suites: each returns a list of named checks with the
//! measured value and the threshold it was held to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::harness::mix_seed;
use crate::mdp::{build_gridworld, build_random_mdp};
use crate::nn::{finite_diff_grad, max_relative_deviation, Gradients, MlpParams};
use crate::spg::{random_network, verify_equivalence, SpgError, EQUIVALENCE_TOL, FINITE_DIFF_TOL};
use crate::tabular::{
    brute_force_return, hard_value_iteration, soft_policy_iteration, soft_value_iteration,
    truncation_bound, TabularPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyKind {
    GradEquiv,
    TabularSuite,
    Gradcheck,
}

/// How a check compares `value` with `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Below,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub comparison: Comparison,
    pub threshold: f64,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value < threshold,
            value,
            comparison: Comparison::Below,
            threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            comparison: Comparison::AtLeast,
            threshold,
        }
    }

    fn failed(name: impl Into<String>, comparison: Comparison, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: false,
            value: f64::NAN,
            comparison,
            threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub kind: VerifyKind,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

pub fn run_verify(kind: VerifyKind, seed: u64) -> VerifyReport {
    let checks = match kind {
        VerifyKind::GradEquiv => grad_equiv_suite(seed, 50),
        VerifyKind::TabularSuite => tabular_suite(seed, 100),
        VerifyKind::Gradcheck => gradcheck_suite(seed, 8),
    };
    VerifyReport {
        kind,
        seed,
        passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
        checks,
    }
}

/// A random `(layer sizes, batch size, alpha)` draw; draw 0 is
/// `([8, 16, 4], 16, 0.7)`.
pub fn grad_draw(seed: u64, index: u64) -> (Vec<usize>, usize, f64) {
    if index == 0 {
        return (vec![8, 16, 4], 16, 0.7);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index));
    let mut sizes = vec![rng.random_range(2..=10)];
    for _ in 0..rng.random_range(1..=2) {
        sizes.push(rng.random_range(4..=24));
    }
    sizes.push(rng.random_range(2..=6));
    let batch = rng.random_range(1..=32);
    let alpha = 10f64.powf(rng.random_range(-2.0..3.0));
    (sizes, batch, alpha)
}

pub fn grad_equiv_suite(seed: u64, draws: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    for i in 0..draws {
        let (sizes, batch, alpha) = grad_draw(seed, i);
        let label = format!("draw {i} {sizes:?} batch {batch} alpha {alpha:.4}");
        match verify_equivalence(seed.wrapping_add(i), &sizes, batch, alpha) {
            Ok(r) => {
                checks.push(Check::below(
                    format!("{label}: split vs soft-Q gradient"),
                    r.max_rel_deviation,
                    EQUIVALENCE_TOL,
                ));
                checks.push(Check::below(
                    format!("{label}: soft-Q vs finite differences"),
                    r.sql_vs_finite_diff,
                    FINITE_DIFF_TOL,
                ));
                checks.push(Check::below(
                    format!("{label}: split vs finite differences"),
                    r.spg_vs_finite_diff,
                    FINITE_DIFF_TOL,
                ));
            }
            Err(e) => checks.push(Check::failed(
                format!("{label}: {e}"),
                Comparison::Below,
                EQUIVALENCE_TOL,
            )),
        }
    }
    checks
}

/// Fixed point, truncated-return, hard-max and monotone-improvement checks.
pub fn tabular_suite(seed: u64, num_mdps: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    let grid = build_gridworld(4, 4, 0.9, 0.0).expect("valid gridworld");
    let alpha = 0.1;
    match (
        soft_value_iteration(&grid, alpha, 1e-13, 100_000),
        soft_policy_iteration(&grid, alpha, 200),
    ) {
        (Ok(vi), Ok(pi)) => {
            let limit = pi.q_tables.last().expect("non-empty");
            checks.push(Check::below(
                "gridworld 4x4 value iteration vs policy iteration limit",
                vi.q.sup_distance(limit),
                1e-8,
            ));
            let horizon = 200;
            let bound = truncation_bound(&grid, alpha, horizon);
            let policy = TabularPolicy::softmax_of(&vi.q).expect("finite");
            let mut worst: f64 = 0.0;
            for s in 0..grid.num_states() {
                for a in 0..grid.num_actions() {
                    let r = brute_force_return(&grid, &policy, alpha, horizon, (s, a))
                        .unwrap_or(f64::NAN);
                    worst = worst.max((r - vi.q.get(s, a)).abs());
                }
            }
            checks.push(Check::below(
                "gridworld 4x4 truncated return vs fixed point",
                worst,
                bound + 1e-12,
            ));
        }
        (Err(e), _) | (_, Err(e)) => checks.push(Check::failed(
            format!("gridworld solve: {e}"),
            Comparison::Below,
            1e-8,
        )),
    }
    match (
        soft_value_iteration(&grid, 1e-4, 1e-12, 100_000),
        hard_value_iteration(&grid, 1e-12, 100_000),
    ) {
        (Ok(soft), Ok(hard)) => checks.push(Check::below(
            "gridworld 4x4 alpha 1e-4 vs hard-max value iteration",
            soft.q.sup_distance(&hard),
            1e-3,
        )),
        (Err(e), _) | (_, Err(e)) => checks.push(Check::failed(
            format!("hard-max limit: {e}"),
            Comparison::Below,
            1e-3,
        )),
    }

    let mut monotone = 0;
    for i in 0..num_mdps {
        let worst = monotone_margin(seed, i);
        let check = Check::at_least(format!("random mdp {i} policy improvement"), worst, -1e-9);
        monotone += check.passed as usize;
        checks.push(check);
    }
    checks.push(Check::at_least(
        "monotone random mdps",
        monotone as f64,
        num_mdps as f64,
    ));
    checks
}

/// Smallest elementwise change `Q^{pi_{k+1}} - Q^{pi_k}` over 30 exact
/// policy-iteration steps at three temperatures.
pub fn monotone_margin(seed: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x70b1, index));
    let ns = rng.random_range(1..=6);
    let na = rng.random_range(1..=4);
    let gamma = rng.random_range(0.5..0.95);
    let Ok(mdp) = build_random_mdp(rng.random(), ns, na, gamma) else {
        return f64::NAN;
    };
    let mut worst = f64::INFINITY;
    for alpha in [0.05, 0.5, 2.0] {
        let Ok(pi) = soft_policy_iteration(&mdp, alpha, 30) else {
            return f64::NAN;
        };
        for pair in pi.q_tables.windows(2) {
            for (new, old) in pair[1].values().iter().zip(pair[0].values()) {
                worst = worst.min(new - old);
            }
        }
    }
    worst
}

/// Backpropagation against central differences on random linear losses.
pub fn gradcheck_suite(seed: u64, nets: u64) -> Vec<Check> {
    (0..nets)
        .map(|i| {
            let (sizes, batch, _) = grad_draw(seed, i + 1);
            let label = format!("network {i} {sizes:?}");
            match gradcheck(mix_seed(seed, 1000 + i), &sizes, batch.min(8)) {
                Ok(err) => Check::below(
                    format!("{label}: backward vs finite differences"),
                    err,
                    FINITE_DIFF_TOL,
                ),
                Err(e) => {
                    Check::failed(format!("{label}: {e}"), Comparison::Below, FINITE_DIFF_TOL)
                }
            }
        })
        .collect()
}

/// Max relative error of backward against central differences for
/// `L = sum_i c_i . f(x_i)` with standard-normal `x_i` and `c_i`.
pub fn gradcheck(seed: u64, sizes: &[usize], batch: usize) -> Result<f64, SpgError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let params = random_network(sizes, seed, &mut rng)?;
    let mut normal =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let xs: Vec<Vec<f64>> = (0..batch).map(|_| normal(params.input_dim())).collect();
    let cs: Vec<Vec<f64>> = (0..batch).map(|_| normal(params.output_dim())).collect();
    let mut grads = Gradients::zeros_like(&params);
    for (x, c) in xs.iter().zip(&cs) {
        let (_, cache) = params.forward(x)?;
        params.backward_into(&cache, c, &mut grads)?;
    }
    let loss = |p: &MlpParams| {
        xs.iter()
            .zip(&cs)
            .map(|(x, c)| {
                p.predict(x)
                    .expect("shape checked")
                    .iter()
                    .zip(c)
                    .map(|(y, w)| y * w)
                    .sum::<f64>()
            })
            .sum::<f64>()
    };
    let numeric = finite_diff_grad(loss, &params, 1e-6)?;
    Ok(max_relative_deviation(grads.data(), numeric.data()))
}
