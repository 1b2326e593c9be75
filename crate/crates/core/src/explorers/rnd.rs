//! Random network distillation bonuses: the error of a predictor trained to
//! match a frozen random network, used as intrinsic reward.

use serde::{Deserialize, Serialize};

use crate::agent::SacAgent;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::numkit::{Activation, AdamConfig, Matrix, MlpParams, Normalizer, OptimState};
use crate::rng::{self, Rng};
use crate::storage::{Batch, ReplayBuffer};

use super::{ExploreCtx, Explorer, Naive};

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn default_out() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    128
}
fn default_pretrain() -> usize {
    1000
}
fn default_refresh() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RndConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_out")]
    pub out_dim: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Predictor steps on the offline data before going online.
    #[serde(default = "default_pretrain")]
    pub pretrain_steps: usize,
    /// Predictor steps each time the world model is retrained.
    #[serde(default = "default_refresh")]
    pub refresh_steps: usize,
}

impl Default for RndConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            out_dim: default_out(),
            lr: default_lr(),
            batch_size: default_batch(),
            pretrain_steps: default_pretrain(),
            refresh_steps: default_refresh(),
        }
    }
}

impl RndConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 || self.hidden.iter().any(|&h| h == 0) || self.batch_size == 0 {
            return Err(Error::Config("RND sizes must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("RND learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RndPair {
    pub target: MlpParams,
    pub predictor: MlpParams,
    pub lambda: f64,
    pub norm: Normalizer,
    pub config: RndConfig,
    opt: OptimState,
}

impl RndPair {
    pub fn new(state_dim: usize, config: &RndConfig, lambda: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![state_dim];
        sizes.extend(&config.hidden);
        sizes.push(config.out_dim);
        let target = MlpParams::new(&sizes, Activation::Elu, Activation::Identity, false, rng)?;
        let predictor = MlpParams::new(&sizes, Activation::Elu, Activation::Identity, false, rng)?;
        let opt = OptimState::for_mlp(&predictor, AdamConfig::new(config.lr));
        Ok(Self { target, predictor, lambda, norm: Normalizer::identity(state_dim), config: config.clone(), opt })
    }

    /// Squared distance between predictor and target outputs per row.
    pub fn intrinsic(&self, s: &Matrix) -> Result<Vec<f64>> {
        let x = self.norm.apply_matrix(s);
        let p = self.predictor.forward_batch(&x)?;
        let t = self.target.forward_batch(&x)?;
        Ok(p.iter_rows()
            .zip(t.iter_rows())
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
            .collect())
    }

    /// One predictor step on the mean intrinsic reward of `s`.
    pub fn train_step(&mut self, s: &Matrix) -> Result<f64> {
        let x = self.norm.apply_matrix(s);
        let t = self.target.forward_batch(&x)?;
        let cache = self.predictor.forward_cached(&x)?;
        let n = s.rows() as f64;
        let mut d_out = cache.output().clone();
        let mut loss = 0.0;
        for (d, tv) in d_out.data_mut().iter_mut().zip(t.data()) {
            let e = *d - tv;
            loss += e * e / n;
            *d = 2.0 * e / n;
        }
        if !loss.is_finite() {
            return Err(Error::training("rnd predictor", self.opt.step as usize, "loss is not finite"));
        }
        let (grads, _) = self.predictor.backward(&cache, &d_out)?;
        self.opt.step_mlp(&mut self.predictor, &grads)?;
        Ok(loss)
    }

    /// `steps` predictor updates on next states drawn from `data`.
    pub fn fit(&mut self, data: &[&ReplayBuffer], steps: usize, rng: &mut Rng) -> Result<()> {
        let total: usize = data.iter().map(|b| b.len()).sum();
        if total == 0 {
            return Ok(());
        }
        let dim = self.norm.dim();
        let mut batch = Matrix::zeros(self.config.batch_size, dim);
        for _ in 0..steps {
            for r in 0..self.config.batch_size {
                let mut i = rng::index(rng, total);
                let buf = data
                    .iter()
                    .find(|b| {
                        if i < b.len() {
                            true
                        } else {
                            i -= b.len();
                            false
                        }
                    })
                    .expect("index within total");
                batch.row_mut(r).copy_from_slice(&buf.get(i).s_next);
            }
            self.train_step(&batch)?;
        }
        Ok(())
    }

    /// Fits the input normalizer to next states of `data`.
    pub fn fit_norm(&mut self, data: &ReplayBuffer) {
        if !data.is_empty() {
            self.norm = Normalizer::fit(data.iter().map(|t| t.s_next.as_slice()), self.norm.dim());
        }
    }

    /// Copy of `batch` with `λ·r_i(s')` added to every reward.
    pub fn shaped(&self, batch: &Batch) -> Result<Batch> {
        let mut b = batch.clone();
        self.add_bonus(&mut b)?;
        Ok(b)
    }

    fn add_bonus(&self, batch: &mut Batch) -> Result<()> {
        if self.lambda == 0.0 {
            return Ok(());
        }
        let bonus = self.intrinsic(&batch.s_next)?;
        for (r, b) in batch.r.iter_mut().zip(bonus) {
            *r += self.lambda * b;
        }
        Ok(())
    }
}

/// Single agent trained on extrinsic plus intrinsic reward.
#[derive(Debug, Clone)]
pub struct Rnd {
    pub pair: RndPair,
}

impl Rnd {
    pub fn new(pair: RndPair) -> Self {
        Self { pair }
    }
}

impl Explorer for Rnd {
    fn name(&self) -> &'static str {
        "rnd"
    }

    fn select_action(&self, ctx: &ExploreCtx<'_>, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Naive.select_action(ctx, s, rng)
    }

    fn pretrain(&mut self, _agent: &SacAgent, offline: &ReplayBuffer, _env: &EnvSpec, rng: &mut Rng) -> Result<()> {
        self.pair.fit_norm(offline);
        let steps = self.pair.config.pretrain_steps;
        self.pair.fit(&[offline], steps, rng)
    }

    fn shape_rewards(&self, batch: &mut Batch) -> Result<()> {
        self.pair.add_bonus(batch)
    }

    fn after_model_train(&mut self, offline: &ReplayBuffer, online: &ReplayBuffer, rng: &mut Rng) -> Result<()> {
        let steps = self.pair.config.refresh_steps;
        self.pair.fit(&[offline, online], steps, rng)
    }
}

/// Decoupled exploration: a second agent, started from the pretrained one,
/// trains on shaped rewards and collects the data, while the base agent
/// trains on extrinsic reward only and is the one evaluated.
#[derive(Debug, Clone)]
pub struct Derl {
    pub pair: RndPair,
    explore: Option<SacAgent>,
}

impl Derl {
    pub fn new(pair: RndPair) -> Self {
        Self { pair, explore: None }
    }

    pub fn explore_agent(&self) -> Option<&SacAgent> {
        self.explore.as_ref()
    }
}

impl Explorer for Derl {
    fn name(&self) -> &'static str {
        "derl"
    }

    fn select_action(&self, _ctx: &ExploreCtx<'_>, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let agent = self
            .explore
            .as_ref()
            .ok_or_else(|| Error::State("exploration agent missing: pretrain was not run".into()))?;
        Ok(agent.policy_sample(s, rng, false)?.0)
    }

    fn pretrain(&mut self, agent: &SacAgent, offline: &ReplayBuffer, _env: &EnvSpec, rng: &mut Rng) -> Result<()> {
        self.explore = Some(agent.clone());
        self.pair.fit_norm(offline);
        let steps = self.pair.config.pretrain_steps;
        self.pair.fit(&[offline], steps, rng)
    }

    fn after_sac_update(&mut self, _agent: &SacAgent, batch: &Batch, rng: &mut Rng) -> Result<()> {
        let shaped = self.pair.shaped(batch)?;
        if let Some(explore) = self.explore.as_mut() {
            explore.update(&shaped, rng)?;
        }
        Ok(())
    }

    fn after_model_train(&mut self, offline: &ReplayBuffer, online: &ReplayBuffer, rng: &mut Rng) -> Result<()> {
        let steps = self.pair.config.refresh_steps;
        self.pair.fit(&[offline, online], steps, rng)
    }
}
