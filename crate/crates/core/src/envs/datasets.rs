//! Offline dataset generators.

use super::{EnvKind, EnvSpec, POINTMASS_GOAL};
use crate::error::{Error, Result};
use crate::rng;
use crate::agent::{online_train, AgentConfig, SacAgent, StopRule};
use crate::explorers::Naive;
use crate::storage::{Dataset, ReplayBuffer, Transition};
use crate::worldmodel::DynamicsEnsemble;

/// `n` transitions from a uniform-random policy; episodes restart at done.
pub fn collect_random_dataset(spec: &EnvSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("random dataset needs at least one transition".into()));
    }
    let mut r = rng::seeded(seed);
    let mut transitions = Vec::with_capacity(n);
    let mut state = spec.reset_with(&mut r);
    while transitions.len() < n {
        let a = spec.random_action(&mut r);
        let out = spec.step(&state, &a)?;
        transitions.push(Transition {
            s: state.obs.clone(),
            a,
            r: out.reward,
            s_next: out.state.obs.clone(),
            done: out.terminated,
        });
        state = if out.done { spec.reset_with(&mut r) } else { out.state };
    }
    Ok(Dataset {
        env: spec.name.clone(),
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        recipe: "random".into(),
        seed,
        transitions,
    })
}

/// Scripted near-optimal controller for `pointmass` and `cliffmass`:
/// saturated PD control toward the goal. Cliffmass episodes first climb to
/// the safe side of the strip.
pub fn expert_action(spec: &EnvSpec, s: &[f64]) -> Result<Vec<f64>> {
    let target = match spec.kind {
        EnvKind::Pointmass => POINTMASS_GOAL,
        EnvKind::Cliffmass if s[0] < 0.5 && s[1] > 3.0 => [POINTMASS_GOAL[0], s[1].min(4.0)],
        EnvKind::Cliffmass if s[0] < 0.5 => [1.0, POINTMASS_GOAL[1]],
        EnvKind::Cliffmass => POINTMASS_GOAL,
        EnvKind::Pendulum => return Err(Error::Config("no scripted expert for pendulum".into())),
    };
    let a = [0, 1].map(|i| 4.0 * (target[i] - s[i]) - 4.0 * s[i + 2]);
    Ok(spec.clip_action(&a))
}

/// `n` transitions from the scripted expert with Gaussian action noise of
/// standard deviation `noise`.
pub fn collect_expert_dataset(spec: &EnvSpec, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("expert dataset needs n > 0 and noise >= 0, got {n} and {noise}")));
    }
    let mut r = rng::seeded(seed);
    let mut transitions = Vec::with_capacity(n);
    let mut state = spec.reset_with(&mut r);
    while transitions.len() < n {
        let mut a = expert_action(spec, &state.obs)?;
        for v in a.iter_mut() {
            *v += noise * rng::normal(&mut r);
        }
        let a = spec.clip_action(&a);
        let out = spec.step(&state, &a)?;
        transitions.push(Transition {
            s: state.obs.clone(),
            a,
            r: out.reward,
            s_next: out.state.obs.clone(),
            done: out.terminated,
        });
        state = if out.done { spec.reset_with(&mut r) } else { out.state };
    }
    Ok(Dataset {
        env: spec.name.clone(),
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        recipe: format!("expert(noise={noise})"),
        seed,
        transitions,
    })
}

/// Settings for [`collect_medium_replay`].
#[derive(Debug, Clone)]
pub struct MediumReplayConfig {
    /// Mean evaluation return at which collection stops.
    pub threshold: f64,
    /// Environment steps before giving up.
    pub step_cap: usize,
    pub eval_every: usize,
    pub agent: AgentConfig,
    pub seed: u64,
}

impl MediumReplayConfig {
    pub fn new(threshold: f64, seed: u64) -> Self {
        Self { threshold, step_cap: 20_000, eval_every: 1_000, agent: AgentConfig::default(), seed }
    }
}

/// Trains a fresh MBPO+SAC agent purely online and returns its whole replay
/// buffer at the first evaluation whose mean return reaches the threshold.
pub fn collect_medium_replay(spec: &EnvSpec, config: &MediumReplayConfig) -> Result<Dataset> {
    spec.validate()?;
    if !config.threshold.is_finite() {
        return Err(Error::Config("medium-replay threshold must be finite".into()));
    }
    if config.step_cap == 0 {
        return Err(Error::Config("medium-replay step cap must be positive".into()));
    }
    let agent_cfg = AgentConfig { online_capacity: config.step_cap.max(1), ..config.agent.clone() };
    let mut r = rng::seeded(config.seed);
    let mut agent = SacAgent::new(spec, agent_cfg.sac.clone(), &mut r)?;
    let mut ensemble = DynamicsEnsemble::for_env(spec, agent_cfg.model.clone(), &mut r)?;
    let empty = ReplayBuffer::new(1, spec.state_dim, spec.action_dim);
    let run = online_train(
        &mut agent,
        &mut ensemble,
        &mut Naive,
        spec,
        &empty,
        config.step_cap,
        config.eval_every,
        &agent_cfg,
        StopRule::ReturnAtLeast(config.threshold),
        &mut r,
    )?;
    let best = run.curve.iter().map(|p| p.mean_return).fold(f64::NEG_INFINITY, f64::max);
    if !run.curve.last().is_some_and(|p| p.step > 0 && p.mean_return >= config.threshold) {
        return Err(Error::Generation(format!(
            "return {} not reached within {} steps (best {best:.1})",
            config.threshold, config.step_cap
        )));
    }
    Ok(Dataset {
        env: spec.name.clone(),
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        recipe: format!("medium_replay(threshold={})", config.threshold),
        seed: config.seed,
        transitions: run.online.iter().cloned().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_transition_is_in_bounds() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let ds = collect_random_dataset(&spec, 1, 3).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.transitions[0].a.iter().all(|a| a.abs() <= 1.0));
    }

    #[test]
    fn transitions_replay_under_closed_form_dynamics() {
        for name in ["pointmass", "cliffmass"] {
            let spec = EnvSpec::by_name(name).unwrap();
            let ds = collect_random_dataset(&spec, 3_000, 11).unwrap();
            for t in &ds.transitions {
                let (next, r, term) = spec.transition(&t.s, &t.a);
                assert_eq!(next, t.s_next);
                assert_eq!(r, t.r);
                assert_eq!(term, t.done);
                assert!(spec.in_state_bounds(&t.s_next));
            }
        }
    }

    #[test]
    fn actions_are_uniform_by_chi_square() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let ds = collect_random_dataset(&spec, 50_000, 5).unwrap();
        let bins = 20;
        for dim in 0..2 {
            let mut counts = vec![0usize; bins];
            for t in &ds.transitions {
                let b = (((t.a[dim] + 1.0) / 2.0) * bins as f64).floor() as usize;
                counts[b.min(bins - 1)] += 1;
            }
            let expected = ds.len() as f64 / bins as f64;
            let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            // 99th percentile of chi-square with 19 degrees of freedom.
            assert!(chi2 < 36.19, "chi2 {chi2} for dim {dim}");
        }
    }

    fn tiny_agent() -> AgentConfig {
        use crate::agent::SacConfig;
        use crate::worldmodel::WorldModelConfig;
        AgentConfig {
            sac: SacConfig { actor_hidden: vec![16], critic_hidden: vec![16], ..SacConfig::default() },
            model: WorldModelConfig { members: 2, hidden: vec![16], batch_size: 32, train_steps: 10, ..Default::default() },
            model_train_freq: 25,
            imagination_freq: 25,
            rollout_starts: 20,
            batch_size: 12,
            eval_episodes: 1,
            ..AgentConfig::default()
        }
    }

    #[test]
    fn trivial_threshold_stops_at_first_evaluation() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let cfg = MediumReplayConfig { step_cap: 200, eval_every: 10, agent: tiny_agent(), ..MediumReplayConfig::new(-1e9, 4) };
        let ds = collect_medium_replay(&spec, &cfg).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.seed, 4);
        for t in &ds.transitions {
            let (next, r, term) = spec.transition(&t.s, &t.a);
            assert_eq!((next, r, term), (t.s_next.clone(), t.r, t.done));
        }
    }

    #[test]
    fn unreachable_threshold_is_generation_error() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let cfg = MediumReplayConfig { step_cap: 50, eval_every: 25, agent: tiny_agent(), ..MediumReplayConfig::new(0.0, 1) };
        assert!(matches!(collect_medium_replay(&spec, &cfg), Err(Error::Generation(_))));
        let bad = MediumReplayConfig { step_cap: 0, ..cfg };
        assert!(collect_medium_replay(&spec, &bad).unwrap_err().is_config());
    }

    #[test]
    fn expert_beats_random_and_avoids_the_cliff() {
        for name in ["pointmass", "cliffmass"] {
            let spec = EnvSpec::by_name(name).unwrap();
            let mut r = rng::seeded(3);
            let mut expert = 0.0;
            let mut random = 0.0;
            for _ in 0..20 {
                expert += super::super::run_episode(&spec, &mut r, |s| expert_action(&spec, s)).unwrap() / 20.0;
                let mut rr = rng::seeded(9);
                random += super::super::run_episode(&spec, &mut r, |_| Ok(spec.random_action(&mut rr))).unwrap() / 20.0;
            }
            assert!(expert > random + 300.0, "{name}: expert {expert} random {random}");
            let ds = collect_expert_dataset(&spec, 4_000, 0.1, 2).unwrap();
            assert!(ds.transitions.iter().all(|t| !t.done));
        }
        assert!(collect_expert_dataset(&EnvSpec::by_name("pendulum").unwrap(), 10, 0.0, 0).is_err());
    }
}
