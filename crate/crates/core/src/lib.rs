//! Offline-to-online reinforcement learning lab.
//!
//! The crate bundles toy environments, an MBPO-style agent built on soft
//! actor-critic, a contrastive density model over state-action pairs, the
//! rate-driven exploration planner, several exploration baselines and the
//! experiment harness that compares them.

pub mod error;
pub mod rng;

pub mod numkit;
pub mod envs;
pub mod storage;
pub mod worldmodel;
pub mod agent;
pub mod ceb;
pub mod planner;
pub mod explorers;
pub mod harness;

pub use error::{Error, Result};
