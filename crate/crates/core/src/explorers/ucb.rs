//! Optimism over sampled candidate actions: value plus λ times an ensemble
//! spread, either over Q-functions or over dynamics members.

use crate::agent::SacAgent;
use crate::error::{Error, Result};
use crate::numkit::{Activation, AdamConfig, Matrix, MlpGrads, MlpParams, OptimState};
use crate::planner::argmax_first;
use crate::rng::Rng;
use crate::storage::{Batch, ReplayBuffer};
use crate::worldmodel::ensemble_uncertainty;

use super::{ExploreCtx, Explorer};

const PRETRAIN_BATCH: usize = 96;

/// `mean + λ·std` per candidate.
pub fn ucb_scores(means: &[f64], stds: &[f64], lambda: f64) -> Vec<f64> {
    means.iter().zip(stds).map(|(m, s)| m + lambda * s).collect()
}

/// Index of the best candidate when row `i` of `member_values` holds every
/// member's value for candidate `i`. Spread is the population standard
/// deviation across members.
pub fn ucb_argmax(member_values: &Matrix, lambda: f64) -> usize {
    let k = member_values.cols() as f64;
    let (means, stds): (Vec<f64>, Vec<f64>) = member_values
        .iter_rows()
        .map(|row| {
            let m = row.iter().sum::<f64>() / k;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k;
            (m, v.sqrt())
        })
        .unzip();
    argmax_first(&ucb_scores(&means, &stds, lambda))
}

/// Independently initialized critics with their own targets, trained on the
/// same batches as the agent with targets built from its policy.
#[derive(Debug, Clone)]
pub struct QEnsemble {
    pub members: Vec<MlpParams>,
    pub targets: Vec<MlpParams>,
    opts: Vec<OptimState>,
    gamma: f64,
    tau: f64,
}

impl QEnsemble {
    pub fn like_agent(agent: &SacAgent, members: usize, rng: &mut Rng) -> Result<Self> {
        if members < 2 {
            return Err(Error::Config("a Q-ensemble needs at least 2 members".into()));
        }
        let mut sizes = vec![agent.state_dim + agent.action_dim];
        sizes.extend(&agent.config.critic_hidden);
        sizes.push(1);
        let nets = (0..members)
            .map(|_| MlpParams::new(&sizes, Activation::Elu, Activation::Identity, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_members(nets, agent.config.critic_lr, agent.config.gamma, agent.config.tau))
    }

    pub fn from_members(members: Vec<MlpParams>, lr: f64, gamma: f64, tau: f64) -> Self {
        let opts = members.iter().map(|m| OptimState::for_mlp(m, AdamConfig::new(lr))).collect();
        Self { targets: members.clone(), members, opts, gamma, tau }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// One row per `(s, a)` pair, one column per member.
    pub fn values(&self, s: &Matrix, a: &Matrix) -> Result<Matrix> {
        let x = s.hcat(a)?;
        let mut out = Matrix::zeros(x.rows(), self.members.len());
        for (k, m) in self.members.iter().enumerate() {
            let q = m.forward_batch(&x)?;
            for i in 0..x.rows() {
                out.set(i, k, q.get(i, 0));
            }
        }
        Ok(out)
    }

    /// One TD step per member towards `r + γ(1−done)(Q̄_k(s',a') − α log π(a'|s'))`.
    /// Returns the mean squared TD error across members.
    pub fn update(&mut self, agent: &SacAgent, batch: &Batch, rng: &mut Rng) -> Result<f64> {
        let n = batch.len();
        let next = agent.sample_actions(&batch.s_next, rng)?;
        let xn = batch.s_next.hcat(&next.actions)?;
        let x = batch.s.hcat(&batch.a)?;
        let alpha = agent.alpha();
        let mut total = 0.0;
        for k in 0..self.members.len() {
            let tq = self.targets[k].forward_batch(&xn)?;
            let cache = self.members[k].forward_cached(&x)?;
            let q = cache.output();
            let mut d_out = Matrix::zeros(n, 1);
            let mut loss = 0.0;
            for i in 0..n {
                let not_done = if batch.done[i] { 0.0 } else { 1.0 };
                let y = batch.r[i] + self.gamma * not_done * (tq.get(i, 0) - alpha * next.log_prob[i]);
                let e = q.get(i, 0) - y;
                loss += e * e / n as f64;
                d_out.set(i, 0, 2.0 * e / n as f64);
            }
            if !loss.is_finite() {
                return Err(Error::training("q-ensemble", k, "TD loss is not finite"));
            }
            let (grads, _): (MlpGrads, _) = self.members[k].backward(&cache, &d_out)?;
            self.opts[k].step_mlp(&mut self.members[k], &grads)?;
            self.targets[k].polyak_from(&self.members[k], self.tau)?;
            total += loss;
        }
        Ok(total / self.members.len() as f64)
    }
}

fn candidates(agent: &SacAgent, s: &[f64], n: usize, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    let rows: Vec<&[f64]> = vec![s; n];
    let sm = Matrix::from_rows(&rows)?;
    let a = agent.sample_actions(&sm, rng)?.actions;
    Ok((sm, a))
}

/// Candidates scored by Q-ensemble mean plus λ times its spread.
#[derive(Debug, Clone)]
pub struct UcbQ {
    pub q: QEnsemble,
    pub lambda: f64,
    pub n_candidates: usize,
    pub pretrain_steps: usize,
}

impl UcbQ {
    pub fn new(q: QEnsemble, lambda: f64, n_candidates: usize, pretrain_steps: usize) -> Result<Self> {
        if n_candidates == 0 {
            return Err(Error::Config("n_candidates must be positive".into()));
        }
        Ok(Self { q, lambda, n_candidates, pretrain_steps })
    }
}

impl Explorer for UcbQ {
    fn name(&self) -> &'static str {
        "ucb_q"
    }

    fn select_action(&self, ctx: &ExploreCtx<'_>, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let (sm, a) = candidates(ctx.agent, s, self.n_candidates, rng)?;
        let best = ucb_argmax(&self.q.values(&sm, &a)?, self.lambda);
        Ok(a.row(best).to_vec())
    }

    fn pretrain(
        &mut self,
        agent: &SacAgent,
        offline: &ReplayBuffer,
        _env: &crate::envs::EnvSpec,
        rng: &mut Rng,
    ) -> Result<()> {
        if offline.is_empty() {
            return Ok(());
        }
        for _ in 0..self.pretrain_steps {
            let batch = offline.sample(PRETRAIN_BATCH, rng)?;
            self.q.update(agent, &batch, rng)?;
        }
        Ok(())
    }

    fn after_sac_update(&mut self, agent: &SacAgent, batch: &Batch, rng: &mut Rng) -> Result<()> {
        self.q.update(agent, batch, rng).map(|_| ())
    }
}

/// Candidates scored by the agent's mean Q plus λ times the disagreement of
/// the dynamics members' next-state means.
#[derive(Debug, Clone)]
pub struct UcbT {
    pub lambda: f64,
    pub n_candidates: usize,
}

impl UcbT {
    pub fn new(lambda: f64, n_candidates: usize) -> Result<Self> {
        if n_candidates == 0 {
            return Err(Error::Config("n_candidates must be positive".into()));
        }
        Ok(Self { lambda, n_candidates })
    }

    /// Scores of the given candidate actions at `s`.
    pub fn scores(&self, ctx: &ExploreCtx<'_>, sm: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        let q = ctx.agent.q_mean(sm, a)?;
        let per_member = ctx.ensemble.member_next_means_batch(sm, a)?;
        let sd = ctx.ensemble.state_dim();
        let mut u = Vec::with_capacity(a.rows());
        for i in 0..a.rows() {
            let mut outs = Matrix::zeros(per_member.len(), sd);
            for (k, m) in per_member.iter().enumerate() {
                outs.row_mut(k).copy_from_slice(m.row(i));
            }
            u.push(ensemble_uncertainty(&outs)?);
        }
        Ok(ucb_scores(&q, &u, self.lambda))
    }
}

impl Explorer for UcbT {
    fn name(&self) -> &'static str {
        "ucb_t"
    }

    fn select_action(&self, ctx: &ExploreCtx<'_>, s: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let (sm, a) = candidates(ctx.agent, s, self.n_candidates, rng)?;
        let best = argmax_first(&self.scores(ctx, &sm, &a)?);
        Ok(a.row(best).to_vec())
    }
}
