//! Online action selection strategies.
//!
//! Every strategy implements [`Explorer`]. The online loop asks it for an
//! action at each environment step and calls its hooks around SAC updates
//! and model retraining, so strategies that keep their own learners (a
//! Q-ensemble, an RND predictor, a second agent) can train them on the same
//! data the base agent sees.

mod ptgood;
mod rnd;
mod ucb;

pub use ptgood::PtgoodExplorer;
pub use rnd::{Derl, Rnd, RndConfig, RndPair};
pub use ucb::{ucb_argmax, ucb_scores, QEnsemble, UcbQ, UcbT};

use serde::{Deserialize, Serialize};

use crate::agent::SacAgent;
use crate::ceb::CebConfig;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::planner::PlannerConfig;
use crate::rng::Rng;
use crate::storage::{Batch, ReplayBuffer};
use crate::worldmodel::DynamicsEnsemble;

/// Frozen components visible at selection time.
pub struct ExploreCtx<'a> {
    pub agent: &'a SacAgent,
    pub ensemble: &'a DynamicsEnsemble,
    pub env: &'a EnvSpec,
}

pub trait Explorer {
    fn name(&self) -> &'static str;

    fn select_action(&self, ctx: &ExploreCtx<'_>, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;

    /// Runs once after offline pretraining, before the first online step.
    fn pretrain(
        &mut self,
        _agent: &SacAgent,
        _offline: &ReplayBuffer,
        _env: &EnvSpec,
        _rng: &mut Rng,
    ) -> Result<()> {
        Ok(())
    }

    /// Whether the base agent starts online from scratch.
    fn skips_offline_pretraining(&self) -> bool {
        false
    }

    /// Edits rewards of a batch before the base agent trains on it.
    fn shape_rewards(&self, _batch: &mut Batch) -> Result<()> {
        Ok(())
    }

    fn after_sac_update(&mut self, _agent: &SacAgent, _batch: &Batch, _rng: &mut Rng) -> Result<()> {
        Ok(())
    }

    fn after_model_train(&mut self, _offline: &ReplayBuffer, _online: &ReplayBuffer, _rng: &mut Rng) -> Result<()> {
        Ok(())
    }
}

/// One stochastic policy sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct Naive;

impl Explorer for Naive {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn select_action(&self, ctx: &ExploreCtx<'_>, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(ctx.agent.policy_sample(s, rng, false)?.0)
    }
}

/// Policy sampling with an agent that was never pretrained offline.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPretrain;

impl Explorer for NoPretrain {
    fn name(&self) -> &'static str {
        "no_pretrain"
    }

    fn select_action(&self, ctx: &ExploreCtx<'_>, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Naive.select_action(ctx, s, rng)
    }

    fn skips_offline_pretraining(&self) -> bool {
        true
    }
}

fn default_candidates() -> usize {
    32
}
fn default_q_members() -> usize {
    7
}
fn default_q_pretrain() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExplorerConfig {
    Naive,
    NoPretrain,
    UcbQ {
        lambda: f64,
        #[serde(default = "default_candidates")]
        n_candidates: usize,
        #[serde(default = "default_q_members")]
        members: usize,
        /// Q-ensemble updates on offline batches before going online.
        #[serde(default = "default_q_pretrain")]
        pretrain_steps: usize,
    },
    UcbT {
        lambda: f64,
        #[serde(default = "default_candidates")]
        n_candidates: usize,
    },
    Rnd {
        lambda: f64,
        #[serde(default)]
        rnd: RndConfig,
    },
    Derl {
        lambda: f64,
        #[serde(default)]
        rnd: RndConfig,
    },
    Ptgood {
        planner: PlannerConfig,
        ceb: CebConfig,
    },
}

impl ExplorerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExplorerConfig::Naive => "naive",
            ExplorerConfig::NoPretrain => "no_pretrain",
            ExplorerConfig::UcbQ { .. } => "ucb_q",
            ExplorerConfig::UcbT { .. } => "ucb_t",
            ExplorerConfig::Rnd { .. } => "rnd",
            ExplorerConfig::Derl { .. } => "derl",
            ExplorerConfig::Ptgood { .. } => "ptgood",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_lambda = |l: f64| {
            if l.is_finite() && l >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("lambda must be finite and non-negative, got {l}")))
            }
        };
        match self {
            ExplorerConfig::Naive | ExplorerConfig::NoPretrain => Ok(()),
            ExplorerConfig::UcbQ { lambda, n_candidates, members, .. } => {
                check_lambda(*lambda)?;
                if *n_candidates == 0 {
                    return Err(Error::Config("n_candidates must be positive".into()));
                }
                if *members < 2 {
                    return Err(Error::Config("a Q-ensemble needs at least 2 members".into()));
                }
                Ok(())
            }
            ExplorerConfig::UcbT { lambda, n_candidates } => {
                check_lambda(*lambda)?;
                if *n_candidates == 0 {
                    return Err(Error::Config("n_candidates must be positive".into()));
                }
                Ok(())
            }
            ExplorerConfig::Rnd { lambda, rnd } | ExplorerConfig::Derl { lambda, rnd } => {
                check_lambda(*lambda)?;
                rnd.validate()
            }
            ExplorerConfig::Ptgood { planner, ceb } => {
                planner.validate()?;
                ceb.validate()
            }
        }
    }
}

/// Instantiates the configured strategy for `env`. Learned parts are sized
/// from `agent`, whose critic architecture the Q-ensemble copies.
pub fn build_explorer(config: &ExplorerConfig, env: &EnvSpec, agent: &SacAgent, rng: &mut Rng) -> Result<Box<dyn Explorer>> {
    config.validate()?;
    Ok(match config {
        ExplorerConfig::Naive => Box::new(Naive),
        ExplorerConfig::NoPretrain => Box::new(NoPretrain),
        ExplorerConfig::UcbQ { lambda, n_candidates, members, pretrain_steps } => {
            let q = QEnsemble::like_agent(agent, *members, rng)?;
            Box::new(UcbQ::new(q, *lambda, *n_candidates, *pretrain_steps)?)
        }
        ExplorerConfig::UcbT { lambda, n_candidates } => Box::new(UcbT::new(*lambda, *n_candidates)?),
        ExplorerConfig::Rnd { lambda, rnd } => Box::new(Rnd::new(RndPair::new(env.state_dim, rnd, *lambda, rng)?)),
        ExplorerConfig::Derl { lambda, rnd } => Box::new(Derl::new(RndPair::new(env.state_dim, rnd, *lambda, rng)?)),
        ExplorerConfig::Ptgood { planner, ceb } => Box::new(PtgoodExplorer::new(planner.clone(), ceb.clone())?),
    })
}
