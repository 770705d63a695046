//! Maximum-entropy Q-learning toolkit.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod experiment;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod selfplay;
pub mod spg;
pub mod suite;
pub mod tabular;
pub mod trajectory;
