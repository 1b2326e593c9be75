//! Rate-driven planning as an exploration strategy.

use crate::agent::SacAgent;
use crate::ceb::{fit_marginal, state_action_rows, CebConfig, RateModel};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::planner::{self, PlannerConfig};
use crate::rng::Rng;
use crate::storage::ReplayBuffer;

use super::{ExploreCtx, Explorer};

/// Fits the density model on the offline data, then picks each action with
/// the rate planner.
#[derive(Debug, Clone)]
pub struct PtgoodExplorer {
    pub planner: PlannerConfig,
    pub ceb: CebConfig,
    rate: Option<RateModel>,
    refreshed_at: usize,
}

impl PtgoodExplorer {
    pub fn new(planner: PlannerConfig, ceb: CebConfig) -> Result<Self> {
        planner.validate()?;
        ceb.validate()?;
        Ok(Self { planner, ceb, rate: None, refreshed_at: 0 })
    }

    /// Uses an already fitted rate model; `pretrain` then leaves it alone.
    pub fn with_rate(planner: PlannerConfig, ceb: CebConfig, rate: RateModel) -> Result<Self> {
        let mut e = Self::new(planner, ceb)?;
        e.rate = Some(rate);
        Ok(e)
    }

    pub fn rate_model(&self) -> Option<&RateModel> {
        self.rate.as_ref()
    }
}

impl Explorer for PtgoodExplorer {
    fn name(&self) -> &'static str {
        "ptgood"
    }

    fn select_action(&self, ctx: &ExploreCtx<'_>, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let rate = self
            .rate
            .as_ref()
            .ok_or_else(|| Error::State("rate model missing: pretrain was not run".into()))?;
        planner::plan(ctx.agent, ctx.ensemble, rate, s, &self.planner, Some(ctx.env), rng)
    }

    fn pretrain(&mut self, _agent: &SacAgent, offline: &ReplayBuffer, _env: &EnvSpec, rng: &mut Rng) -> Result<()> {
        if self.rate.is_none() {
            let x = state_action_rows(offline.iter())?;
            self.rate = Some(RateModel::fit(&x, &self.ceb, rng).map_err(|e| e.in_stage("density model fit"))?.0);
        }
        Ok(())
    }

    fn after_model_train(&mut self, offline: &ReplayBuffer, online: &ReplayBuffer, rng: &mut Rng) -> Result<()> {
        let Some(every) = self.ceb.marginal_refresh_every else {
            return Ok(());
        };
        if online.len() < self.refreshed_at + every {
            return Ok(());
        }
        if let Some(rate) = self.rate.as_mut() {
            let x = state_action_rows(offline.iter().chain(online.iter()))?;
            let (m, _) = fit_marginal(&rate.model, &x, self.ceb.mixture_components, self.ceb.em_iters, rng)?;
            rate.marginal = m;
            self.refreshed_at = online.len();
        }
        Ok(())
    }
}
