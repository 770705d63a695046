//! Experience records passed from rollout workers to the learner.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("segment is empty")]
    Empty,
    #[error("segment has {len} transitions, limit is {max}")]
    TooLong { len: usize, max: usize },
    #[error("transition {0} is marked done but is not the last one")]
    EarlyDone(usize),
    #[error("transition {0} does not continue from its predecessor")]
    Broken(usize),
    #[error("behaviour log-probability {0} is positive")]
    LogProb(f64),
}

/// One environment step as seen by the learning agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// The episode reached a terminal state; no bootstrap from `next_state`.
    pub done: bool,
    /// `log pi_behaviour(action | state)` when the action was sampled.
    pub behavior_log_prob: f64,
    /// Parameter-server version of the acting policy.
    pub policy_version: u64,
}

/// Up to `n` consecutive transitions of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub transitions: Vec<Transition>,
    /// Cut before the episode ended (step limit or segment length).
    pub truncated: bool,
}

impl TrajectorySegment {
    pub fn new(transitions: Vec<Transition>, truncated: bool) -> Self {
        Self {
            transitions,
            truncated,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn first(&self) -> Option<&Transition> {
        self.transitions.first()
    }

    pub fn last(&self) -> Option<&Transition> {
        self.transitions.last()
    }

    /// Checks chaining, done placement and length against `n_max`.
    pub fn validate(&self, n_max: usize) -> Result<(), SegmentError> {
        if self.transitions.is_empty() {
            return Err(SegmentError::Empty);
        }
        if self.transitions.len() > n_max {
            return Err(SegmentError::TooLong {
                len: self.transitions.len(),
                max: n_max,
            });
        }
        for (k, t) in self.transitions.iter().enumerate() {
            if t.behavior_log_prob > 0.0 {
                return Err(SegmentError::LogProb(t.behavior_log_prob));
            }
            if t.done && k + 1 != self.transitions.len() {
                return Err(SegmentError::EarlyDone(k));
            }
            if k > 0 && self.transitions[k - 1].next_state != t.state {
                return Err(SegmentError::Broken(k));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64, next: f64, done: bool) -> Transition {
        Transition {
            state: vec![s],
            action: 0,
            reward: 0.0,
            next_state: vec![next],
            done,
            behavior_log_prob: -0.5,
            policy_version: 1,
        }
    }

    #[test]
    fn validates_chain_and_done() {
        assert!(
            TrajectorySegment::new(vec![t(0.0, 1.0, false), t(1.0, 2.0, true)], false)
                .validate(2)
                .is_ok()
        );
        assert_eq!(
            TrajectorySegment::new(vec![], false).validate(2),
            Err(SegmentError::Empty)
        );
        assert_eq!(
            TrajectorySegment::new(vec![t(0.0, 1.0, true), t(1.0, 2.0, false)], false).validate(4),
            Err(SegmentError::EarlyDone(0))
        );
        assert_eq!(
            TrajectorySegment::new(vec![t(0.0, 1.0, false), t(5.0, 2.0, false)], false).validate(4),
            Err(SegmentError::Broken(1))
        );
        assert!(matches!(
            TrajectorySegment::new(vec![t(0.0, 1.0, false), t(1.0, 2.0, false)], false).validate(1),
            Err(SegmentError::TooLong { .. })
        ));
    }
}
