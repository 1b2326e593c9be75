//! Soft actor-critic with a tanh-squashed Gaussian policy and twin critics.
//!
//! Losses are written as functions of explicit noise so their gradients can
//! be checked against finite differences with the noise frozen.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::numkit::checkpoint::{read_params, write_params};
use crate::numkit::gaussian::{HALF_LN_2PI, LOG_STD_MAX, LOG_STD_MIN};
use crate::numkit::{Activation, AdamConfig, Matrix, MlpGrads, MlpParams, OptimState};
use crate::rng::{self, Rng};
use crate::storage::Batch;

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Target networks are averaged every this many updates.
    pub target_update_every: u64,
    pub init_alpha: f64,
    /// Defaults to `-action_dim` when absent.
    #[serde(default)]
    pub target_entropy: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            actor_lr: 1e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            gamma: 0.99,
            tau: 5e-3,
            target_update_every: 2,
            init_alpha: 0.1,
            target_entropy: None,
        }
    }
}

impl SacConfig {
    pub fn full_size() -> Self {
        Self {
            actor_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.target_update_every == 0 || !(self.init_alpha > 0.0) {
            return Err(Error::Config("target update period and initial alpha must be positive".into()));
        }
        for lr in [self.actor_lr, self.critic_lr, self.alpha_lr] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("learning rates must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SacMetrics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub mean_q: f64,
    /// Monte-Carlo estimate of policy entropy on the batch.
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub config: SacConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_center: Vec<f64>,
    pub action_scale: Vec<f64>,
    pub actor: MlpParams,
    pub critics: [MlpParams; 2],
    pub target_critics: [MlpParams; 2],
    pub log_alpha: f64,
    pub target_entropy: f64,
    actor_opt: OptimState,
    critic_opts: [OptimState; 2],
    alpha_opt: OptimState,
    updates: u64,
}

/// Squashed-Gaussian actions for a batch plus what the actor loss needs.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    pub actions: Matrix,
    pub log_prob: Vec<f64>,
    /// Pre-squash sample `u = μ + σ ξ`.
    pub u: Matrix,
    /// Clamped log standard deviation.
    pub log_std: Matrix,
}

/// Numerically stable `ln(1 − tanh²(u))`.
#[inline]
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl SacAgent {
    pub fn new(spec: &EnvSpec, config: SacConfig, rng: &mut Rng) -> Result<Self> {
        Self::with_bounds(spec.state_dim, &spec.action_bounds, config, rng)
    }

    pub fn with_bounds(state_dim: usize, bounds: &[[f64; 2]], config: SacConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let ad = bounds.len();
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&config.actor_hidden);
        actor_sizes.push(2 * ad);
        let actor = MlpParams::new(&actor_sizes, Activation::Elu, Activation::Identity, false, rng)?;
        let mut critic_sizes = vec![state_dim + ad];
        critic_sizes.extend(&config.critic_hidden);
        critic_sizes.push(1);
        let c1 = MlpParams::new(&critic_sizes, Activation::Elu, Activation::Identity, true, rng)?;
        let c2 = MlpParams::new(&critic_sizes, Activation::Elu, Activation::Identity, true, rng)?;
        let actor_opt = OptimState::for_mlp(&actor, AdamConfig::new(config.actor_lr));
        let critic_opts = [
            OptimState::for_mlp(&c1, AdamConfig::new(config.critic_lr)),
            OptimState::for_mlp(&c2, AdamConfig::new(config.critic_lr)),
        ];
        let alpha_opt = OptimState::for_lengths(&[1], AdamConfig::new(config.alpha_lr));
        Ok(Self {
            state_dim,
            action_dim: ad,
            action_center: bounds.iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect(),
            action_scale: bounds.iter().map(|[lo, hi]| 0.5 * (hi - lo)).collect(),
            target_critics: [c1.clone(), c2.clone()],
            critics: [c1, c2],
            actor,
            log_alpha: config.init_alpha.ln(),
            target_entropy: config.target_entropy.unwrap_or(-(ad as f64)),
            config,
            actor_opt,
            critic_opts,
            alpha_opt,
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Action bounds implied by the squashing map.
    pub fn action_bounds(&self) -> Vec<[f64; 2]> {
        self.action_center
            .iter()
            .zip(&self.action_scale)
            .map(|(c, h)| [c - h, c + h])
            .collect()
    }

    fn check_actor_out(&self, out: &Matrix) -> Result<()> {
        if !out.is_finite() {
            return Err(Error::Inference("actor produced a non-finite output".into()));
        }
        Ok(())
    }

    /// Squashed actions for states `s` under noise `xi` (one row per state).
    pub fn policy_from_output(&self, out: &Matrix, xi: &Matrix) -> Result<PolicyBatch> {
        self.check_actor_out(out)?;
        let (n, ad) = (out.rows(), self.action_dim);
        if xi.rows() != n || xi.cols() != ad {
            return Err(Error::Shape("policy noise does not match the batch".into()));
        }
        let log_h: f64 = self.action_scale.iter().map(|h| h.ln()).sum();
        let mut actions = Matrix::zeros(n, ad);
        let mut u = Matrix::zeros(n, ad);
        let mut log_std = Matrix::zeros(n, ad);
        let mut log_prob = vec![0.0; n];
        for i in 0..n {
            let o = out.row(i);
            let mut lp = -log_h;
            for j in 0..ad {
                let ls = o[ad + j].clamp(LOG_STD_MIN, LOG_STD_MAX);
                let e = xi.get(i, j);
                let uj = o[j] + ls.exp() * e;
                let t = uj.tanh();
                actions.set(i, j, self.action_center[j] + self.action_scale[j] * t);
                u.set(i, j, uj);
                log_std.set(i, j, ls);
                lp += -0.5 * e * e - ls - HALF_LN_2PI - log_one_minus_tanh_sq(uj);
            }
            log_prob[i] = lp;
        }
        Ok(PolicyBatch { actions, log_prob, u, log_std })
    }

    pub fn sample_actions(&self, s: &Matrix, rng: &mut Rng) -> Result<PolicyBatch> {
        let out = self.actor.forward_batch(s)?;
        let xi = Matrix::from_vec(s.rows(), self.action_dim, rng::normals(rng, s.rows() * self.action_dim))?;
        self.policy_from_output(&out, &xi)
    }

    /// `tanh(μ)` scaled to the action bounds.
    pub fn deterministic_actions(&self, s: &Matrix) -> Result<Matrix> {
        let out = self.actor.forward_batch(s)?;
        self.check_actor_out(&out)?;
        let mut a = Matrix::zeros(s.rows(), self.action_dim);
        for i in 0..s.rows() {
            for j in 0..self.action_dim {
                a.set(i, j, self.action_center[j] + self.action_scale[j] * out.get(i, j).tanh());
            }
        }
        Ok(a)
    }

    /// One action and its log-probability; `deterministic` returns `tanh(μ)`
    /// scaled to bounds, with the log-density of the zero-noise sample.
    pub fn policy_sample(&self, s: &[f64], rng: &mut Rng, deterministic: bool) -> Result<(Vec<f64>, f64)> {
        let sm = Matrix::from_vec(1, s.len(), s.to_vec())?;
        let out = self.actor.forward_batch(&sm)?;
        let xi = if deterministic {
            Matrix::zeros(1, self.action_dim)
        } else {
            Matrix::from_vec(1, self.action_dim, rng::normals(rng, self.action_dim))?
        };
        let pb = self.policy_from_output(&out, &xi)?;
        Ok((pb.actions.into_data(), pb.log_prob[0]))
    }

    /// Critic `k` on a batch; one value per row.
    pub fn q_values(&self, k: usize, s: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        Ok(self.critics[k].forward_batch(&s.hcat(a)?)?.into_data())
    }

    /// Mean of the twin critics.
    pub fn q_mean(&self, s: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        let x = s.hcat(a)?;
        let q1 = self.critics[0].forward_batch(&x)?;
        let q2 = self.critics[1].forward_batch(&x)?;
        Ok(q1.data().iter().zip(q2.data()).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    /// Bellman targets `r + γ(1 − done)(min_k Q̄_k(s', a') − α log π(a'|s'))`
    /// with `a'` drawn using noise `xi_next`.
    pub fn critic_targets(&self, batch: &Batch, xi_next: &Matrix) -> Result<Vec<f64>> {
        let out = self.actor.forward_batch(&batch.s_next)?;
        let pb = self.policy_from_output(&out, xi_next)?;
        let x = batch.s_next.hcat(&pb.actions)?;
        let t1 = self.target_critics[0].forward_batch(&x)?;
        let t2 = self.target_critics[1].forward_batch(&x)?;
        let alpha = self.alpha();
        Ok((0..batch.len())
            .map(|i| {
                let next_v = t1.data()[i].min(t2.data()[i]) - alpha * pb.log_prob[i];
                let not_done = if batch.done[i] { 0.0 } else { 1.0 };
                let bootstrap = if self.config.gamma == 0.0 || not_done == 0.0 {
                    0.0
                } else {
                    self.config.gamma * next_v
                };
                batch.r[i] + bootstrap
            })
            .collect())
    }

    /// Actor loss `mean(α log π(a|s) − min_k Q_k(s, a))` under noise `xi`,
    /// its gradient and the batch log-probabilities.
    pub fn actor_loss(&self, s: &Matrix, xi: &Matrix) -> Result<(f64, MlpGrads, Vec<f64>)> {
        let cache = self.actor.forward_cached(s)?;
        let pb = self.policy_from_output(cache.output(), xi)?;
        let (n, ad) = (s.rows(), self.action_dim);
        let x = s.hcat(&pb.actions)?;
        let c1 = self.critics[0].forward_cached(&x)?;
        let c2 = self.critics[1].forward_cached(&x)?;
        let alpha = self.alpha();
        let mut loss = 0.0;
        let mut pick1 = Matrix::zeros(n, 1);
        let mut pick2 = Matrix::zeros(n, 1);
        for i in 0..n {
            let (q1, q2) = (c1.output().get(i, 0), c2.output().get(i, 0));
            loss += alpha * pb.log_prob[i] - q1.min(q2);
            if q1 <= q2 {
                pick1.set(i, 0, 1.0);
            } else {
                pick2.set(i, 0, 1.0);
            }
        }
        loss /= n as f64;
        let (_, dx1) = self.critics[0].backward(&c1, &pick1)?;
        let (_, dx2) = self.critics[1].backward(&c2, &pick2)?;
        let sd = self.state_dim;
        let mut d_out = Matrix::zeros(n, 2 * ad);
        for i in 0..n {
            for j in 0..ad {
                let dq_da = dx1.get(i, sd + j) + dx2.get(i, sd + j);
                let t = pb.u.get(i, j).tanh();
                let du = (alpha * 2.0 * t - dq_da * self.action_scale[j] * (1.0 - t * t)) / n as f64;
                d_out.set(i, j, du);
                let raw = cache.output().get(i, ad + j);
                if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                    let sigma = pb.log_std.get(i, j).exp();
                    d_out.set(i, ad + j, du * sigma * xi.get(i, j) - alpha / n as f64);
                }
            }
        }
        let (grads, _) = self.actor.backward(&cache, &d_out)?;
        Ok((loss, grads, pb.log_prob))
    }

    /// Per-critic squared-error losses against targets `y` and their grads.
    pub fn critic_losses(&self, s: &Matrix, a: &Matrix, y: &[f64]) -> Result<([f64; 2], [MlpGrads; 2], f64)> {
        let x = s.hcat(a)?;
        let n = y.len();
        let mut losses = [0.0; 2];
        let mut grads = Vec::with_capacity(2);
        let mut q_sum = 0.0;
        for k in 0..2 {
            let cache = self.critics[k].forward_cached(&x)?;
            let mut d = Matrix::zeros(n, 1);
            for i in 0..n {
                let diff = cache.output().get(i, 0) - y[i];
                losses[k] += diff * diff / n as f64;
                d.set(i, 0, 2.0 * diff / n as f64);
                q_sum += cache.output().get(i, 0);
            }
            grads.push(self.critics[k].backward(&cache, &d)?.0);
        }
        let g2 = grads.pop().unwrap();
        let g1 = grads.pop().unwrap();
        Ok((losses, [g1, g2], q_sum / (2 * n) as f64))
    }

    /// `−log α · mean(log π + H̄)` and its derivative in `log α`.
    pub fn alpha_loss(&self, log_prob: &[f64]) -> (f64, f64) {
        let m = log_prob.iter().map(|lp| lp + self.target_entropy).sum::<f64>() / log_prob.len() as f64;
        (-self.log_alpha * m, -m)
    }

    /// One soft actor-critic update on `batch`.
    pub fn update(&mut self, batch: &Batch, rng: &mut Rng) -> Result<SacMetrics> {
        if batch.is_empty() {
            return Err(Error::Sampling("SAC update on an empty batch".into()));
        }
        let (n, ad) = (batch.len(), self.action_dim);
        let xi_next = Matrix::from_vec(n, ad, rng::normals(rng, n * ad))?;
        let y = self.critic_targets(batch, &xi_next)?;
        let (closs, cgrads, mean_q) = self.critic_losses(&batch.s, &batch.a, &y)?;
        if !closs.iter().all(|l| l.is_finite()) {
            return Err(Error::training("sac critic", 0, format!("critic loss {closs:?}")));
        }
        for (k, g) in cgrads.iter().enumerate() {
            self.critic_opts[k]
                .step_mlp(&mut self.critics[k], g)
                .map_err(|e| Error::training("sac critic", k, e.to_string()))?;
        }

        let xi = Matrix::from_vec(n, ad, rng::normals(rng, n * ad))?;
        let (aloss, agrads, log_prob) = self.actor_loss(&batch.s, &xi)?;
        if !aloss.is_finite() {
            return Err(Error::training("sac actor", 0, format!("actor loss {aloss}")));
        }
        self.actor_opt
            .step_mlp(&mut self.actor, &agrads)
            .map_err(|e| Error::training("sac actor", 0, e.to_string()))?;

        let (_, dlog_alpha) = self.alpha_loss(&log_prob);
        let mut la = [self.log_alpha];
        self.alpha_opt
            .step_tensors(vec![&mut la[..]], vec![&[dlog_alpha][..]])
            .map_err(|e| Error::training("sac alpha", 0, e.to_string()))?;
        self.log_alpha = la[0];

        self.updates += 1;
        if self.updates % self.config.target_update_every == 0 {
            for k in 0..2 {
                let src = self.critics[k].clone();
                self.target_critics[k].polyak_from(&src, self.config.tau)?;
            }
        }
        Ok(SacMetrics {
            critic_loss: closs[0] + closs[1],
            actor_loss: aloss,
            alpha: self.alpha(),
            mean_q,
            entropy: -log_prob.iter().sum::<f64>() / n as f64,
        })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "sac_agent",
            "config": self.config,
            "state_dim": self.state_dim,
            "action_center": self.action_center,
            "action_scale": self.action_scale,
            "log_alpha": self.log_alpha,
            "target_entropy": self.target_entropy,
            "updates": self.updates,
        });
        write_params(
            w,
            &[&self.actor, &self.critics[0], &self.critics[1], &self.target_critics[0], &self.target_critics[1]],
            meta,
        )
    }

    /// Restores networks and temperature; optimizer moments start fresh.
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let (mut nets, meta) = read_params(r)?;
        if nets.len() != 5 {
            return Err(Error::Format(format!("agent record holds {} networks, expected 5", nets.len())));
        }
        let config: SacConfig = serde_json::from_value(meta["config"].clone())?;
        let centers: Vec<f64> = serde_json::from_value(meta["action_center"].clone())?;
        let scales: Vec<f64> = serde_json::from_value(meta["action_scale"].clone())?;
        let state_dim: usize = serde_json::from_value(meta["state_dim"].clone())?;
        let bounds: Vec<[f64; 2]> = centers.iter().zip(&scales).map(|(c, h)| [c - h, c + h]).collect();
        let mut agent = Self::with_bounds(state_dim, &bounds, config, &mut rng::seeded(0))?;
        agent.action_center = centers;
        agent.action_scale = scales;
        agent.target_critics[1] = nets.pop().unwrap();
        agent.target_critics[0] = nets.pop().unwrap();
        agent.critics[1] = nets.pop().unwrap();
        agent.critics[0] = nets.pop().unwrap();
        agent.actor = nets.pop().unwrap();
        agent.log_alpha = serde_json::from_value(meta["log_alpha"].clone())?;
        agent.target_entropy = serde_json::from_value(meta["target_entropy"].clone())?;
        agent.updates = serde_json::from_value(meta["updates"].clone())?;
        Ok(agent)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::Transition;

    fn agent(seed: u64) -> SacAgent {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let cfg = SacConfig { actor_hidden: vec![8, 8], critic_hidden: vec![8, 8], ..SacConfig::default() };
        SacAgent::new(&spec, cfg, &mut rng::seeded(seed)).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let mut r = rng::seeded(seed);
        let items: Vec<Transition> = (0..n)
            .map(|i| Transition {
                s: rng::normals(&mut r, 4),
                a: (0..2).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect(),
                r: rng::normal(&mut r),
                s_next: rng::normals(&mut r, 4),
                done: i % 3 == 0,
            })
            .collect();
        let refs: Vec<&Transition> = items.iter().collect();
        Batch::from_refs(&refs, 4, 2).unwrap()
    }

    fn zero_net_output(agent: &mut SacAgent, mean: f64, log_std: f64) {
        let last = agent.actor.layers.len() - 1;
        agent.actor.layers[last].weight.fill(0.0);
        for j in 0..agent.action_dim {
            agent.actor.layers[last].bias[j] = mean;
            agent.actor.layers[last].bias[agent.action_dim + j] = log_std;
        }
    }

    #[test]
    fn degenerate_gaussian_gives_center_action() {
        let mut ag = agent(0);
        zero_net_output(&mut ag, 0.0, -50.0);
        let (a, _) = ag.policy_sample(&[1.0, 2.0, 0.0, 0.0], &mut rng::seeded(1), false).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-3));
        let (a, _) = ag.policy_sample(&[1.0, 2.0, 0.0, 0.0], &mut rng::seeded(1), true).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn sampled_actions_stay_in_bounds() {
        let mut ag = agent(1);
        zero_net_output(&mut ag, 3.0, 2.0);
        let s = Matrix::from_vec(10_000, 4, vec![0.5; 40_000]).unwrap();
        let pb = ag.sample_actions(&s, &mut rng::seeded(2)).unwrap();
        assert!(pb.actions.data().iter().all(|a| (-1.0..=1.0).contains(a)));
        assert!(pb.log_prob.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn log_prob_matches_quadrature_of_squashed_density() {
        // One-dimensional actor: integrate exp(log π) over the action range.
        let cfg = SacConfig { actor_hidden: vec![4], critic_hidden: vec![4], ..SacConfig::default() };
        let mut ag = SacAgent::with_bounds(1, &[[-2.0, 2.0]], cfg, &mut rng::seeded(3)).unwrap();
        zero_net_output(&mut ag, 0.4, -0.3);
        let (mu, sigma, h) = (0.4f64, (-0.3f64).exp(), 2.0f64);
        // Density via change of variables, evaluated independently.
        let density = |a: f64| {
            let t = a / h;
            let u = t.atanh();
            let g = (-(u - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            g / (h * (1.0 - t * t))
        };
        let n = 200_000;
        let mut total = 0.0;
        for i in 0..n {
            let a = -h + (i as f64 + 0.5) * (2.0 * h / n as f64);
            total += density(a) * 2.0 * h / n as f64;
        }
        assert!((total - 1.0).abs() < 1e-3, "density integrates to {total}");
        for xi in [-1.5, 0.0, 0.7] {
            let out = ag.actor.forward_batch(&Matrix::from_vec(1, 1, vec![0.0]).unwrap()).unwrap();
            let pb = ag.policy_from_output(&out, &Matrix::from_vec(1, 1, vec![xi]).unwrap()).unwrap();
            let a = pb.actions.get(0, 0);
            assert!((pb.log_prob[0] - density(a).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn myopic_targets_equal_reward() {
        let mut ag = agent(2);
        ag.config.gamma = 0.0;
        let mut b = batch(6, 1);
        b.r.iter_mut().for_each(|r| *r = 1.0);
        let y = ag.critic_targets(&b, &Matrix::zeros(6, 2)).unwrap();
        assert!(y.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn targets_respect_twin_min() {
        let ag = agent(3);
        let mut b = batch(16, 2);
        b.done.iter_mut().for_each(|d| *d = false);
        let xi = Matrix::from_vec(16, 2, rng::normals(&mut rng::seeded(5), 32)).unwrap();
        let y = ag.critic_targets(&b, &xi).unwrap();
        let pb = ag.policy_from_output(&ag.actor.forward_batch(&b.s_next).unwrap(), &xi).unwrap();
        let x = b.s_next.hcat(&pb.actions).unwrap();
        for k in 0..2 {
            let q = ag.target_critics[k].forward_batch(&x).unwrap();
            for i in 0..16 {
                let each = b.r[i] + ag.config.gamma * (q.get(i, 0) - ag.alpha() * pb.log_prob[i]);
                assert!(y[i] <= each + 1e-12);
            }
        }
    }

    #[test]
    fn full_polyak_copies_critics() {
        let mut ag = agent(4);
        ag.config.tau = 1.0;
        ag.config.target_update_every = 1;
        ag.update(&batch(9, 3), &mut rng::seeded(0)).unwrap();
        assert_eq!(ag.target_critics[0], ag.critics[0]);
        assert_eq!(ag.target_critics[1], ag.critics[1]);
    }

    #[test]
    fn polyak_every_second_update_is_exact() {
        let mut ag = agent(5);
        let b = batch(9, 4);
        let mut r = rng::seeded(0);
        let before = ag.target_critics.clone();
        ag.update(&b, &mut r).unwrap();
        assert_eq!(ag.target_critics, before);
        ag.update(&b, &mut r).unwrap();
        let tau = ag.config.tau;
        for k in 0..2 {
            for ((t, o), c) in ag.target_critics[k]
                .tensors()
                .iter()
                .zip(before[k].tensors())
                .zip(ag.critics[k].tensors())
            {
                for ((tv, ov), cv) in t.iter().zip(o).zip(c) {
                    assert_eq!(*tv, (1.0 - tau) * ov + tau * cv);
                }
            }
        }
    }

    #[test]
    fn alpha_rises_when_entropy_below_target() {
        let mut ag = agent(6);
        zero_net_output(&mut ag, 0.0, -4.0);
        let before = ag.log_alpha;
        ag.update(&batch(9, 5), &mut rng::seeded(1)).unwrap();
        assert!(ag.log_alpha > before);
    }

    fn rel_close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn critic_loss_gradients_match_finite_differences() {
        let ag = agent(7);
        let b = batch(5, 6);
        let y: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let (_, grads, _) = ag.critic_losses(&b.s, &b.a, &y).unwrap();
        let h = 1e-5;
        for k in 0..2 {
            let params: Vec<Vec<f64>> = ag.critics[k].tensors().iter().map(|t| t.to_vec()).collect();
            for (ti, t) in params.iter().enumerate() {
                for e in 0..t.len() {
                    let mut plus = ag.clone();
                    plus.critics[k].tensors_mut()[ti][e] += h;
                    let mut minus = ag.clone();
                    minus.critics[k].tensors_mut()[ti][e] -= h;
                    let fd = (plus.critic_losses(&b.s, &b.a, &y).unwrap().0[k]
                        - minus.critic_losses(&b.s, &b.a, &y).unwrap().0[k])
                        / (2.0 * h);
                    let g = grads[k].tensors()[ti][e];
                    assert!(rel_close(fd, g) || (fd - g).abs() < 1e-8, "critic {k} tensor {ti}[{e}]: {fd} vs {g}");
                }
            }
        }
    }

    #[test]
    fn actor_loss_gradients_match_finite_differences() {
        let mut ag = agent(8);
        ag.log_alpha = 0.3f64.ln();
        let b = batch(4, 7);
        let xi = Matrix::from_vec(4, 2, rng::normals(&mut rng::seeded(9), 8)).unwrap();
        let (_, grads, _) = ag.actor_loss(&b.s, &xi).unwrap();
        let h = 1e-5;
        let lens: Vec<usize> = ag.actor.tensors().iter().map(|t| t.len()).collect();
        for (ti, &len) in lens.iter().enumerate() {
            for e in 0..len {
                let mut plus = ag.clone();
                plus.actor.tensors_mut()[ti][e] += h;
                let mut minus = ag.clone();
                minus.actor.tensors_mut()[ti][e] -= h;
                let fd = (plus.actor_loss(&b.s, &xi).unwrap().0 - minus.actor_loss(&b.s, &xi).unwrap().0) / (2.0 * h);
                let g = grads.tensors()[ti][e];
                assert!(rel_close(fd, g) || (fd - g).abs() < 1e-8, "actor tensor {ti}[{e}]: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let ag = agent(10);
        let mut buf = Vec::new();
        ag.write(&mut buf).unwrap();
        let back = SacAgent::read(&mut std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.actor, ag.actor);
        assert_eq!(back.critics, ag.critics);
        assert_eq!(back.log_alpha, ag.log_alpha);
        assert_eq!(back.action_bounds(), ag.action_bounds());
    }
}
