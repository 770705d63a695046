//! Finite Markov decision processes with exact transition tensors.
//!
//! A [`TabularMdp`] is the ground-truth substrate for every exact soft-value
//! computation in [`crate::tabular`]. Terminal states self-loop with zero
//! reward and carry zero continuation value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row-sum tolerance for transition distributions.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: usize },
    #[error("gamma must lie in [0, 1), got {0}")]
    Gamma(f64),
    #[error("slip probability must lie in [0, 1), got {0}")]
    Slip(f64),
    #[error("transition row ({state}, {action}) sums to {sum}")]
    RowSum {
        state: usize,
        action: usize,
        sum: f64,
    },
    #[error("transition probability P[{state}][{action}][{next}] = {p} outside [0, 1]")]
    Probability {
        state: usize,
        action: usize,
        next: usize,
        p: f64,
    },
    #[error("terminal state {0} must self-loop with zero reward")]
    Terminal(usize),
    #[error("table has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
}

/// An exact finite MDP.
///
/// `transition` is laid out as `[s][a][s']` and `reward` as `[s][a]`, both
/// row-major and flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    terminal: Vec<bool>,
}

impl TabularMdp {
    /// Builds and validates an MDP from flat tables.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        terminal: Vec<bool>,
    ) -> Result<Self, MdpError> {
        if num_states == 0 {
            return Err(MdpError::NonPositive {
                what: "num_states",
                value: 0,
            });
        }
        if num_actions == 0 {
            return Err(MdpError::NonPositive {
                what: "num_actions",
                value: 0,
            });
        }
        check_gamma(gamma)?;
        let expected = num_states * num_actions * num_states;
        if transition.len() != expected {
            return Err(MdpError::Shape {
                expected,
                got: transition.len(),
            });
        }
        if reward.len() != num_states * num_actions {
            return Err(MdpError::Shape {
                expected: num_states * num_actions,
                got: reward.len(),
            });
        }
        if terminal.len() != num_states {
            return Err(MdpError::Shape {
                expected: num_states,
                got: terminal.len(),
            });
        }
        let mdp = Self {
            num_states,
            num_actions,
            transition,
            reward,
            gamma,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<(), MdpError> {
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.next_distribution(s, a);
                for (next, &p) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(MdpError::Probability {
                            state: s,
                            action: a,
                            next,
                            p,
                        });
                    }
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(MdpError::RowSum {
                        state: s,
                        action: a,
                        sum,
                    });
                }
                if self.terminal[s] && (row[s] != 1.0 || self.reward(s, a) != 0.0) {
                    return Err(MdpError::Terminal(s));
                }
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Returns a copy with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self, MdpError> {
        check_gamma(gamma)?;
        Ok(Self {
            gamma,
            ..self.clone()
        })
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.reward[state * self.num_actions + action]
    }

    pub fn prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.next_distribution(state, action)[next]
    }

    /// `P(· | state, action)`.
    pub fn next_distribution(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    /// Largest absolute one-step reward.
    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Samples `s' ~ P(· | state, action)` by inverse CDF.
    pub fn sample_next<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        let row = self.next_distribution(state, action);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (next, &p) in row.iter().enumerate() {
            if p > 0.0 {
                last_positive = next;
                acc += p;
                if u < acc {
                    return next;
                }
            }
        }
        last_positive
    }
}

fn check_gamma(gamma: f64) -> Result<(), MdpError> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(MdpError::Gamma(gamma))
    }
}

/// Grid moves, in action-index order.
pub const GRID_ACTIONS: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;

/// A `width x height` grid. The start is the top-left cell (state 0) and the
/// absorbing goal is the bottom-right cell; entering the goal pays 1.
///
/// With probability `slip_prob` the agent executes one of the three other
/// moves uniformly at random. Moves off the grid leave the agent in place.
pub fn build_gridworld(
    width: usize,
    height: usize,
    gamma: f64,
    slip_prob: f64,
) -> Result<TabularMdp, MdpError> {
    if width == 0 {
        return Err(MdpError::NonPositive {
            what: "width",
            value: width,
        });
    }
    if height == 0 {
        return Err(MdpError::NonPositive {
            what: "height",
            value: height,
        });
    }
    check_gamma(gamma)?;
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(MdpError::Slip(slip_prob));
    }
    let ns = width * height;
    let na = GRID_ACTIONS.len();
    let goal = ns - 1;
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    let mut terminal = vec![false; ns];
    terminal[goal] = true;

    let neighbour = |s: usize, a: usize| -> usize {
        let (x, y) = ((s % width) as i64, (s / width) as i64);
        let (dx, dy) = GRID_ACTIONS[a];
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
            s
        } else {
            ny as usize * width + nx as usize
        }
    };

    for s in 0..ns {
        for a in 0..na {
            let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
            if s == goal {
                row[s] = 1.0;
                continue;
            }
            for executed in 0..na {
                let p = if executed == a {
                    1.0 - slip_prob
                } else {
                    slip_prob / (na - 1) as f64
                };
                row[neighbour(s, executed)] += p;
            }
            reward[s * na + a] = row[goal];
        }
    }
    TabularMdp::new(ns, na, transition, reward, gamma, terminal)
}

/// A deterministic corridor of `length` states with actions left (0) and
/// right (1). The rightmost state is an absorbing goal; entering it pays 1.
pub fn build_chain(length: usize, gamma: f64) -> Result<TabularMdp, MdpError> {
    if length == 0 {
        return Err(MdpError::NonPositive {
            what: "length",
            value: length,
        });
    }
    check_gamma(gamma)?;
    let na = 2;
    let goal = length - 1;
    let mut transition = vec![0.0; length * na * length];
    let mut reward = vec![0.0; length * na];
    let mut terminal = vec![false; length];
    terminal[goal] = true;
    for s in 0..length {
        for a in 0..na {
            let next = if s == goal {
                s
            } else if a == 0 {
                s.saturating_sub(1)
            } else {
                s + 1
            };
            transition[(s * na + a) * length + next] = 1.0;
            if s != goal && next == goal {
                reward[s * na + a] = 1.0;
            }
        }
    }
    TabularMdp::new(length, na, transition, reward, gamma, terminal)
}

/// An MDP with independent uniform-simplex transition rows and rewards in
/// `[-1, 1]`, deterministic in `seed`. No state is terminal.
pub fn build_random_mdp(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    gamma: f64,
) -> Result<TabularMdp, MdpError> {
    if num_states == 0 {
        return Err(MdpError::NonPositive {
            what: "num_states",
            value: 0,
        });
    }
    if num_actions == 0 {
        return Err(MdpError::NonPositive {
            what: "num_actions",
            value: 0,
        });
    }
    check_gamma(gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        // Normalized unit exponentials are uniform on the simplex.
        let raw: Vec<f64> = (0..num_states)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // Push the rounding residue into the largest entry.
        let residue = 1.0 - row.iter().sum::<f64>();
        let (imax, _) =
            row.iter().enumerate().fold(
                (0, f64::MIN),
                |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc },
            );
        row[imax] += residue;
        transition.extend(row);
    }
    let reward = (0..num_states * num_actions)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    TabularMdp::new(
        num_states,
        num_actions,
        transition,
        reward,
        gamma,
        vec![false; num_states],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_row_error(mdp: &TabularMdp) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..mdp.num_states() {
            for a in 0..mdp.num_actions() {
                let sum: f64 = mdp.next_distribution(s, a).iter().sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }

    #[test]
    fn single_cell_grid_self_loops() {
        let mdp = build_gridworld(1, 1, 0.9, 0.0).unwrap();
        assert_eq!(mdp.num_states(), 1);
        for a in 0..4 {
            assert_eq!(mdp.prob(0, a, 0), 1.0);
            assert_eq!(mdp.reward(0, a), 0.0);
        }
    }

    #[test]
    fn two_cell_grid_right_reaches_goal() {
        let mdp = build_gridworld(2, 1, 0.9, 0.0).unwrap();
        assert_eq!(mdp.num_states(), 2);
        assert_eq!(mdp.prob(0, RIGHT, 1), 1.0);
        assert_eq!(mdp.reward(0, RIGHT), 1.0);
        assert_eq!(mdp.reward(0, LEFT), 0.0);
        assert!(mdp.is_terminal(1));
    }

    #[test]
    fn slippery_grid_rows_are_stochastic() {
        let mdp = build_gridworld(4, 4, 0.9, 0.1).unwrap();
        assert!(max_row_error(&mdp) <= 1e-12);
        // From the start, "right" lands right w.p. 0.9 and bumps the wall
        // (stays) under slips to up and left.
        assert!((mdp.prob(0, RIGHT, 1) - 0.9).abs() < 1e-15);
        assert!((mdp.prob(0, RIGHT, 0) - 2.0 * 0.1 / 3.0).abs() < 1e-15);
        assert!((mdp.prob(0, RIGHT, 4) - 0.1 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(matches!(
            build_gridworld(0, 3, 0.9, 0.0),
            Err(MdpError::NonPositive { .. })
        ));
        assert!(matches!(
            build_gridworld(3, 0, 0.9, 0.0),
            Err(MdpError::NonPositive { .. })
        ));
        assert_eq!(build_gridworld(3, 3, 1.0, 0.0), Err(MdpError::Gamma(1.0)));
        assert_eq!(build_gridworld(3, 3, -0.1, 0.0), Err(MdpError::Gamma(-0.1)));
        assert_eq!(build_gridworld(3, 3, 0.9, 1.0), Err(MdpError::Slip(1.0)));
    }

    #[test]
    fn random_mdp_degenerate_and_deterministic() {
        let tiny = build_random_mdp(7, 1, 1, 0.5).unwrap();
        assert_eq!(tiny.prob(0, 0, 0), 1.0);
        let a = build_random_mdp(42, 5, 3, 0.9).unwrap();
        let b = build_random_mdp(42, 5, 3, 0.9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_random_mdp(43, 5, 3, 0.9).unwrap());
    }

    #[test]
    fn random_mdp_rows_sum_to_one() {
        let mdp = build_random_mdp(11, 5, 3, 0.9).unwrap();
        assert!(max_row_error(&mdp) <= 1e-12);
        for s in 0..5 {
            for a in 0..3 {
                assert!((-1.0..=1.0).contains(&mdp.reward(s, a)));
            }
        }
    }

    #[test]
    fn random_mdp_rejects_zero_counts() {
        assert!(build_random_mdp(0, 0, 2, 0.5).is_err());
        assert!(build_random_mdp(0, 2, 0, 0.5).is_err());
    }

    #[test]
    fn chain_moves_deterministically() {
        let mdp = build_chain(3, 0.9).unwrap();
        assert_eq!(mdp.prob(0, 1, 1), 1.0);
        assert_eq!(mdp.prob(1, 1, 2), 1.0);
        assert_eq!(mdp.reward(1, 1), 1.0);
        assert_eq!(mdp.prob(0, 0, 0), 1.0);
        assert!(mdp.is_terminal(2));
    }

    #[test]
    fn constructor_rejects_broken_rows() {
        let err = TabularMdp::new(1, 1, vec![0.5], vec![0.0], 0.5, vec![false]).unwrap_err();
        assert!(matches!(err, MdpError::RowSum { .. }));
        let err = TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0.0, 0.0],
            0.5,
            vec![true, false],
        )
        .unwrap_err();
        assert_eq!(err, MdpError::Terminal(0));
    }
}
