//! Model-based soft actor-critic: imagination, offline pretraining and
//! online fine-tuning.

mod sac;

pub use sac::{PolicyBatch, SacAgent, SacConfig, SacMetrics};

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::explorers::{ExploreCtx, Explorer};
use crate::numkit::Matrix;
use crate::rng::{self, Rng};
use crate::storage::{sample_equal_parts, ReplayBuffer, Transition};
use crate::worldmodel::{ensemble_uncertainty, DynamicsEnsemble, PredictMode, WorldModelConfig};

/// Schedule and sizes for the model-based training loops.
///
/// Defaults are small enough for a laptop; rollout batch sizes and model
/// epochs follow common MBPO practice rather than published values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default)]
    pub sac: SacConfig,
    #[serde(default)]
    pub model: WorldModelConfig,
    /// Imagined steps per rollout.
    pub horizon: usize,
    /// Environment (or pretraining) steps between world-model retrainings.
    pub model_train_freq: usize,
    /// Steps between refreshes of the synthetic buffer.
    pub imagination_freq: usize,
    /// Rollout start states per refresh.
    pub rollout_starts: usize,
    pub synthetic_capacity: usize,
    pub online_capacity: usize,
    /// Must be divisible by 3.
    pub batch_size: usize,
    pub grad_steps_per_env_step: usize,
    /// SAC updates during offline pretraining.
    pub pretrain_steps: usize,
    /// World-model gradient steps before offline pretraining starts.
    pub model_pretrain_steps: usize,
    /// Uniform-random actions at the start of online training. SAC updates
    /// begin once the warmup is over.
    #[serde(default)]
    pub random_warmup: usize,
    pub eval_episodes: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            sac: SacConfig::default(),
            model: WorldModelConfig::default(),
            horizon: 1,
            model_train_freq: 250,
            imagination_freq: 250,
            rollout_starts: 1000,
            synthetic_capacity: 100_000,
            online_capacity: 1_000_000,
            batch_size: 96,
            grad_steps_per_env_step: 1,
            pretrain_steps: 10_000,
            model_pretrain_steps: 2_000,
            random_warmup: 0,
            eval_episodes: 10,
        }
    }
}

impl AgentConfig {
    /// Network sizes and step counts of the large-benchmark setting.
    pub fn full_size() -> Self {
        Self {
            sac: SacConfig::full_size(),
            model: WorldModelConfig::full_size(),
            rollout_starts: 100_000,
            batch_size: 255,
            pretrain_steps: 50_000,
            model_pretrain_steps: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sac.validate()?;
        self.model.validate()?;
        let positive = [
            ("horizon", self.horizon),
            ("model_train_freq", self.model_train_freq),
            ("imagination_freq", self.imagination_freq),
            ("rollout_starts", self.rollout_starts),
            ("synthetic_capacity", self.synthetic_capacity),
            ("online_capacity", self.online_capacity),
            ("batch_size", self.batch_size),
            ("grad_steps_per_env_step", self.grad_steps_per_env_step),
            ("eval_episodes", self.eval_episodes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("agent config field {name} must be positive")));
        }
        if self.batch_size % 3 != 0 {
            return Err(Error::Config(format!("batch size {} is not divisible by 3", self.batch_size)));
        }
        Ok(())
    }
}

/// One evaluation point of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_return: f64,
    pub returns: Vec<f64>,
    /// Mean of `−log π(a|s)` over states visited during evaluation.
    pub policy_entropy: f64,
    /// Mean Q on the most recent SAC batch (NaN before any update).
    pub mean_q: f64,
    /// Mean dynamics-ensemble disagreement over evaluated `(s, a)`, NaN if
    /// the ensemble is untrained.
    pub disagreement: f64,
}

/// Undiscounted returns of `episodes` deterministic-policy episodes plus the
/// diagnostics logged alongside them.
pub fn evaluate(
    agent: &SacAgent,
    ensemble: Option<&DynamicsEnsemble>,
    env: &EnvSpec,
    episodes: usize,
    step: usize,
    mean_q: f64,
    rng: &mut Rng,
) -> Result<EvalPoint> {
    let mut returns = Vec::with_capacity(episodes);
    let mut visited: Vec<Vec<f64>> = Vec::new();
    let mut taken: Vec<Vec<f64>> = Vec::new();
    for _ in 0..episodes {
        let mut state = env.reset_with(rng);
        let mut ret = 0.0;
        while !state.done {
            let (a, _) = agent.policy_sample(&state.obs, rng, true)?;
            let out = env.step(&state, &a)?;
            visited.push(state.obs.clone());
            taken.push(a);
            ret += out.reward;
            state = out.state;
        }
        returns.push(ret);
    }
    let s = Matrix::from_rows(&visited)?;
    let pb = agent.sample_actions(&s, rng)?;
    let policy_entropy = -pb.log_prob.iter().sum::<f64>() / pb.log_prob.len().max(1) as f64;
    let disagreement = match ensemble {
        Some(ens) if ens.is_trained() && ens.len() >= 2 => {
            let a = Matrix::from_rows(&taken)?;
            let heads = ens.member_heads(&s, &a)?;
            let mut total = 0.0;
            let mut row = Matrix::zeros(heads.len(), ens.state_dim());
            for i in 0..s.rows() {
                for (k, h) in heads.iter().enumerate() {
                    for j in 0..ens.state_dim() {
                        row.set(k, j, s.get(i, j) + h.mean.get(i, j));
                    }
                }
                total += ensemble_uncertainty(&row)?;
            }
            total / s.rows() as f64
        }
        _ => f64::NAN,
    };
    Ok(EvalPoint {
        step,
        mean_return: returns.iter().sum::<f64>() / episodes as f64,
        returns,
        policy_entropy,
        mean_q,
        disagreement,
    })
}

/// Rolls the policy through the ensemble from `n_starts` states drawn
/// uniformly from the union of `sources`. Imagined states are clipped to the
/// environment's state bounds and rollouts stop at predicted termination.
pub fn imagine_rollouts(
    agent: &SacAgent,
    ensemble: &DynamicsEnsemble,
    sources: &[&ReplayBuffer],
    horizon: usize,
    n_starts: usize,
    env: &EnvSpec,
    rng: &mut Rng,
) -> Result<Vec<Transition>> {
    if !ensemble.is_trained() {
        return Err(Error::State("imagination needs a trained dynamics ensemble".into()));
    }
    let total: usize = sources.iter().map(|b| b.len()).sum();
    if total == 0 {
        return Err(Error::Sampling("no real states to start imagination from".into()));
    }
    let sd = agent.state_dim;
    let mut starts = Matrix::zeros(n_starts, sd);
    for i in 0..n_starts {
        let mut idx = rng::index(rng, total);
        for b in sources {
            if idx < b.len() {
                starts.row_mut(i).copy_from_slice(&b.get(idx).s);
                break;
            }
            idx -= b.len();
        }
    }
    let mut out = Vec::with_capacity(n_starts * horizon);
    let mut states = starts;
    for _ in 0..horizon {
        if states.rows() == 0 {
            break;
        }
        let pb = agent.sample_actions(&states, rng)?;
        let (mut next, r) = ensemble.predict_batch(&states, &pb.actions, PredictMode::SampleMember, rng)?;
        let mut alive = Vec::with_capacity(states.rows());
        for i in 0..states.rows() {
            let row = next.row_mut(i);
            for (v, [lo, hi]) in row.iter_mut().zip(&env.state_bounds) {
                *v = v.clamp(*lo, *hi);
            }
            let done = env.is_terminal(row);
            out.push(Transition {
                s: states.row(i).to_vec(),
                a: pb.actions.row(i).to_vec(),
                r: r[i],
                s_next: row.to_vec(),
                done,
            });
            if !done {
                alive.push(row.to_vec());
            }
        }
        states = if alive.is_empty() { Matrix::zeros(0, sd) } else { Matrix::from_rows(&alive)? };
    }
    Ok(out)
}

fn refill(
    synthetic: &mut ReplayBuffer,
    agent: &SacAgent,
    ensemble: &DynamicsEnsemble,
    sources: &[&ReplayBuffer],
    config: &AgentConfig,
    env: &EnvSpec,
    rng: &mut Rng,
) -> Result<()> {
    synthetic.clear();
    for t in imagine_rollouts(agent, ensemble, sources, config.horizon, config.rollout_starts, env, rng)? {
        synthetic.append(t)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub model_nll: Vec<f64>,
    pub last: Option<SacMetrics>,
}

/// Trains the world model on `offline`, then alternates imagination and SAC
/// updates on offline plus synthetic data. Rewards are the logged ones.
pub fn offline_pretrain(
    agent: &mut SacAgent,
    ensemble: &mut DynamicsEnsemble,
    offline: &ReplayBuffer,
    env: &EnvSpec,
    config: &AgentConfig,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    config.validate()?;
    if offline.is_empty() {
        return Err(Error::Sampling("offline pretraining needs a nonempty dataset".into()));
    }
    let mut report = PretrainReport::default();
    if config.model_pretrain_steps > 0 {
        report.model_nll = ensemble
            .train(&[offline], config.model_pretrain_steps, rng)
            .map_err(|e| e.in_stage("world-model pretraining"))?
            .member_nll;
    }
    let online = ReplayBuffer::new(1, agent.state_dim, agent.action_dim);
    let mut synthetic = ReplayBuffer::new(config.synthetic_capacity, agent.state_dim, agent.action_dim);
    for t in 0..config.pretrain_steps {
        if t > 0 && t % config.model_train_freq == 0 {
            ensemble.train(&[offline], config.model.train_steps, rng)?;
        }
        if t % config.imagination_freq == 0 && ensemble.is_trained() {
            refill(&mut synthetic, agent, ensemble, &[offline], config, env, rng)?;
        }
        let batch = sample_equal_parts(offline, &online, &synthetic, config.batch_size, rng)?;
        report.last = Some(agent.update(&batch, rng)?);
    }
    Ok(report)
}

/// Learning curve plus the data gathered online.
#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub curve: Vec<EvalPoint>,
    pub online: ReplayBuffer,
    /// Environment steps actually taken.
    pub steps: usize,
}

/// Stop rule for [`online_train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Run the whole budget.
    Budget,
    /// Stop at the first evaluation after step 0 whose mean return reaches
    /// the threshold.
    ReturnAtLeast(f64),
}

/// Online fine-tuning: the explorer picks actions, real transitions go to the
/// online buffer, the model is retrained and imagination refreshed on their
/// schedules, and SAC updates on equal-parts batches. The deterministic
/// policy of `agent` is evaluated at step 0 and every `eval_every` steps,
/// always from the same start states.
#[allow(clippy::too_many_arguments)]
pub fn online_finetune(
    agent: &mut SacAgent,
    ensemble: &mut DynamicsEnsemble,
    explorer: &mut dyn Explorer,
    env: &EnvSpec,
    offline: &ReplayBuffer,
    budget: usize,
    eval_every: usize,
    config: &AgentConfig,
    rng: &mut Rng,
) -> Result<Vec<EvalPoint>> {
    Ok(online_train(agent, ensemble, explorer, env, offline, budget, eval_every, config, StopRule::Budget, rng)?.curve)
}

#[allow(clippy::too_many_arguments)]
pub fn online_train(
    agent: &mut SacAgent,
    ensemble: &mut DynamicsEnsemble,
    explorer: &mut dyn Explorer,
    env: &EnvSpec,
    offline: &ReplayBuffer,
    budget: usize,
    eval_every: usize,
    config: &AgentConfig,
    stop: StopRule,
    rng: &mut Rng,
) -> Result<OnlineRun> {
    config.validate()?;
    if eval_every == 0 {
        return Err(Error::Config("eval_every must be positive".into()));
    }
    // Every evaluation replays the same start states from its own stream, so
    // curve points differ only through the policy and never perturb training.
    let eval_seed = rng::fork(rng);
    let mut online = ReplayBuffer::new(config.online_capacity, agent.state_dim, agent.action_dim);
    let mut synthetic = ReplayBuffer::new(config.synthetic_capacity, agent.state_dim, agent.action_dim);
    let mut mean_q = f64::NAN;
    let first = evaluate(agent, Some(ensemble), env, config.eval_episodes, 0, mean_q, &mut rng::seeded(eval_seed))?;
    // The step-0 evaluation is a baseline and never stops the run.
    let reached = |p: &EvalPoint| matches!(stop, StopRule::ReturnAtLeast(th) if p.mean_return >= th);
    let mut curve = vec![first];
    let mut state = env.reset_with(rng);
    for step in 1..=budget {
        let a = if step <= config.random_warmup {
            env.random_action(rng)
        } else {
            let ctx = ExploreCtx { agent, ensemble, env };
            explorer.select_action(&ctx, &state.obs, rng)?
        };
        let out = env.step(&state, &a)?;
        online.append(Transition {
            s: state.obs.clone(),
            a: env.clip_action(&a),
            r: out.reward,
            s_next: out.state.obs.clone(),
            done: out.terminated,
        })?;
        state = if out.done { env.reset_with(rng) } else { out.state };

        if step % config.model_train_freq == 0 {
            let data: Vec<&ReplayBuffer> = [offline, &online].into_iter().filter(|b| !b.is_empty()).collect();
            ensemble
                .train(&data, config.model.train_steps, rng)
                .map_err(|e| e.in_stage("world-model training"))?;
            explorer.after_model_train(offline, &online, rng)?;
        }
        if ensemble.is_trained() && (step % config.imagination_freq == 0 || synthetic.is_empty()) {
            let data: Vec<&ReplayBuffer> = [offline, &online].into_iter().filter(|b| !b.is_empty()).collect();
            refill(&mut synthetic, agent, ensemble, &data, config, env, rng)?;
        }
        if step > config.random_warmup {
            for _ in 0..config.grad_steps_per_env_step {
                let mut batch = sample_equal_parts(offline, &online, &synthetic, config.batch_size, rng)?;
                explorer.shape_rewards(&mut batch)?;
                mean_q = agent.update(&batch, rng)?.mean_q;
                explorer.after_sac_update(agent, &batch, rng)?;
            }
        }
        if step % eval_every == 0 {
            let p = evaluate(agent, Some(ensemble), env, config.eval_episodes, step, mean_q, &mut rng::seeded(eval_seed))?;
            let hit = reached(&p);
            curve.push(p);
            if hit {
                return Ok(OnlineRun { curve, online, steps: step });
            }
        }
    }
    Ok(OnlineRun { curve, online, steps: budget })
}
