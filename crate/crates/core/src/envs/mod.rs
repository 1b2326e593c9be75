//! Toy continuous-control MDPs with closed-form dynamics.
//!
//! * `pointmass`: state `(x, y, vx, vy)`, action `(fx, fy) ∈ [-1, 1]²`,
//!   `v' = clip(v + 0.1 a, ±1)`, `p' = clip(p + 0.1 v', ±5)`, reward
//!   `-‖p - (4, 4)‖` on the pre-step position, horizon 200.
//! * `cliffmass`: pointmass whose strip `y > 4.5 ∧ x < 0` is terminal;
//!   entering it ends the episode with reward −10.
//! * `pendulum`: classic torque-limited swing-up, observation
//!   `(cos θ, sin θ, θ̇)`, torque in `[-2, 2]`, horizon 200.
//!
//! Rewards are functions of the state an action is taken in, except for the
//! cliff penalty, which is paid on entry.

mod datasets;

pub use datasets::{
    collect_expert_dataset, collect_medium_replay, collect_random_dataset, expert_action, MediumReplayConfig,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const POINTMASS_GOAL: [f64; 2] = [4.0, 4.0];
const POS_LIMIT: f64 = 5.0;
const VEL_LIMIT: f64 = 1.0;
const CLIFF_PENALTY: f64 = -10.0;

const PENDULUM_MAX_SPEED: f64 = 8.0;
const PENDULUM_DT: f64 = 0.05;
const PENDULUM_G: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Pointmass,
    Pendulum,
    Cliffmass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Per-dimension `[lo, hi]`.
    pub action_bounds: Vec<[f64; 2]>,
    /// Per-dimension `[lo, hi]` of every emitted observation.
    pub state_bounds: Vec<[f64; 2]>,
    pub max_episode_len: usize,
    pub has_early_termination: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub step: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// Episode over, by termination or by reaching the horizon.
    pub done: bool,
    /// Episode over because a terminal state was entered.
    pub terminated: bool,
}

impl EnvSpec {
    pub fn by_name(name: &str) -> Result<Self> {
        let kind = match name {
            "pointmass" => EnvKind::Pointmass,
            "pendulum" => EnvKind::Pendulum,
            "cliffmass" => EnvKind::Cliffmass,
            other => return Err(Error::Config(format!("unknown environment '{other}'"))),
        };
        Ok(Self::new(kind))
    }

    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Pointmass | EnvKind::Cliffmass => Self {
                name: if kind == EnvKind::Pointmass { "pointmass" } else { "cliffmass" }.into(),
                kind,
                state_dim: 4,
                action_dim: 2,
                action_bounds: vec![[-1.0, 1.0]; 2],
                state_bounds: vec![
                    [-POS_LIMIT, POS_LIMIT],
                    [-POS_LIMIT, POS_LIMIT],
                    [-VEL_LIMIT, VEL_LIMIT],
                    [-VEL_LIMIT, VEL_LIMIT],
                ],
                max_episode_len: 200,
                has_early_termination: kind == EnvKind::Cliffmass,
            },
            EnvKind::Pendulum => Self {
                name: "pendulum".into(),
                kind,
                state_dim: 3,
                action_dim: 1,
                action_bounds: vec![[-2.0, 2.0]],
                state_bounds: vec![[-1.0, 1.0], [-1.0, 1.0], [-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED]],
                max_episode_len: 200,
                has_early_termination: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_bounds.len() != self.action_dim || self.state_bounds.len() != self.state_dim {
            return Err(Error::Config(format!("{}: bounds do not match dims", self.name)));
        }
        if self
            .action_bounds
            .iter()
            .any(|[lo, hi]| !lo.is_finite() || !hi.is_finite() || lo >= hi)
        {
            return Err(Error::Config(format!("{}: action bounds must be finite with lo < hi", self.name)));
        }
        if self.max_episode_len == 0 {
            return Err(Error::Config(format!("{}: max episode length must be ≥ 1", self.name)));
        }
        Ok(())
    }

    pub fn action_center(&self) -> Vec<f64> {
        self.action_bounds.iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect()
    }

    pub fn action_half_range(&self) -> Vec<f64> {
        self.action_bounds.iter().map(|[lo, hi]| 0.5 * (hi - lo)).collect()
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.action_bounds)
            .map(|(v, [lo, hi])| v.clamp(*lo, *hi))
            .collect()
    }

    pub fn random_action(&self, rng: &mut Rng) -> Vec<f64> {
        self.action_bounds
            .iter()
            .map(|[lo, hi]| rng::uniform(rng, *lo, *hi))
            .collect()
    }

    /// Termination predicate on an observation.
    pub fn is_terminal(&self, obs: &[f64]) -> bool {
        match self.kind {
            EnvKind::Cliffmass => obs[1] > 4.5 && obs[0] < 0.0,
            _ => false,
        }
    }

    pub fn in_state_bounds(&self, obs: &[f64]) -> bool {
        obs.iter()
            .zip(&self.state_bounds)
            .all(|(v, [lo, hi])| *v >= *lo && *v <= *hi)
    }

    pub fn reset(&self, seed: u64) -> Result<EnvState> {
        self.validate()?;
        let mut r = rng::seeded(seed);
        Ok(self.reset_with(&mut r))
    }

    pub fn reset_with(&self, rng: &mut Rng) -> EnvState {
        let obs = match self.kind {
            EnvKind::Pointmass => {
                let x = rng::uniform(rng, -POS_LIMIT, POS_LIMIT);
                let y = rng::uniform(rng, -POS_LIMIT, POS_LIMIT);
                vec![x, y, 0.0, 0.0]
            }
            EnvKind::Cliffmass => loop {
                let x = rng::uniform(rng, -POS_LIMIT, POS_LIMIT);
                let y = rng::uniform(rng, -POS_LIMIT, POS_LIMIT);
                let obs = vec![x, y, 0.0, 0.0];
                if !self.is_terminal(&obs) {
                    break obs;
                }
            },
            EnvKind::Pendulum => {
                let th = rng::uniform(rng, -PI, PI);
                let thdot = rng::uniform(rng, -1.0, 1.0);
                vec![th.cos(), th.sin(), thdot]
            }
        };
        EnvState { obs, step: 0, done: false }
    }

    /// Closed-form transition. Actions outside the bounds are clipped.
    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::Protocol(format!("{}: step called after episode end", self.name)));
        }
        if action.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "{}: action has {} dims, expected {}",
                self.name,
                action.len(),
                self.action_dim
            )));
        }
        let a = self.clip_action(action);
        if a.as_slice() != action {
            log::warn!("{}: action {:?} clipped to bounds", self.name, action);
        }
        let (obs, reward, terminated) = self.transition(&state.obs, &a);
        let step = state.step + 1;
        let done = terminated || step >= self.max_episode_len;
        Ok(StepOutcome {
            state: EnvState { obs, step, done },
            reward,
            done,
            terminated,
        })
    }

    /// Pure dynamics: `(s', r, terminated)` for an in-bounds action.
    pub fn transition(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64, bool) {
        match self.kind {
            EnvKind::Pointmass | EnvKind::Cliffmass => {
                let vx = (s[2] + 0.1 * a[0]).clamp(-VEL_LIMIT, VEL_LIMIT);
                let vy = (s[3] + 0.1 * a[1]).clamp(-VEL_LIMIT, VEL_LIMIT);
                let x = (s[0] + 0.1 * vx).clamp(-POS_LIMIT, POS_LIMIT);
                let y = (s[1] + 0.1 * vy).clamp(-POS_LIMIT, POS_LIMIT);
                let next = vec![x, y, vx, vy];
                let dist = ((s[0] - POINTMASS_GOAL[0]).powi(2) + (s[1] - POINTMASS_GOAL[1]).powi(2)).sqrt();
                if self.is_terminal(&next) {
                    (next, CLIFF_PENALTY, true)
                } else {
                    (next, -dist, false)
                }
            }
            EnvKind::Pendulum => {
                let th = s[1].atan2(s[0]);
                let thdot = s[2];
                let u = a[0];
                let cost = angle_normalize(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u;
                let new_thdot = (thdot + (3.0 * PENDULUM_G / 2.0 * th.sin() + 3.0 * u) * PENDULUM_DT)
                    .clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                let new_th = th + new_thdot * PENDULUM_DT;
                (vec![new_th.cos(), new_th.sin(), new_thdot], -cost, false)
            }
        }
    }
}

fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Rolls out `policy` for one episode and returns the undiscounted return.
pub fn run_episode<F>(spec: &EnvSpec, rng: &mut Rng, mut policy: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut state = spec.reset_with(rng);
    let mut ret = 0.0;
    while !state.done {
        let a = policy(&state.obs)?;
        let out = spec.step(&state, &a)?;
        ret += out.reward;
        state = out.state;
    }
    Ok(ret)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_env_is_config_error() {
        assert!(matches!(EnvSpec::by_name("hopper"), Err(Error::Config(_))));
    }

    #[test]
    fn pointmass_reset_documented_init() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let s = spec.reset(42).unwrap();
        assert_eq!(s.step, 0);
        assert!(!s.done);
        assert!(s.obs[0].abs() <= 5.0 && s.obs[1].abs() <= 5.0);
        assert_eq!(&s.obs[2..], &[0.0, 0.0]);
        assert_eq!(spec.reset(42).unwrap(), s);
    }

    #[test]
    fn reset_mean_matches_uniform_init() {
        // p ~ U[-5, 5]²: mean 0, per-coordinate std 10/sqrt(12).
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let n = 10_000;
        let mut r = rng::seeded(1);
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let s = spec.reset_with(&mut r);
            sx += s.obs[0];
            sy += s.obs[1];
        }
        let se = 10.0 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((sx / n as f64).abs() < 3.0 * se);
        assert!((sy / n as f64).abs() < 3.0 * se);
    }

    #[test]
    fn pointmass_rest_is_fixed_point() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let s = EnvState { obs: vec![1.0, -2.0, 0.0, 0.0], step: 0, done: false };
        let out = spec.step(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(out.state.obs, s.obs);
        let d = ((1.0f64 - 4.0).powi(2) + (-2.0f64 - 4.0).powi(2)).sqrt();
        assert_eq!(out.reward, -d);
        assert!(!out.done);
    }

    #[test]
    fn pointmass_unit_push() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let s = EnvState { obs: vec![0.5, 0.5, 0.0, 0.0], step: 3, done: false };
        let out = spec.step(&s, &[1.0, 0.0]).unwrap();
        let o = &out.state.obs;
        assert!((o[2] - 0.1).abs() < 1e-15 && o[3] == 0.0);
        assert!((o[0] - 0.51).abs() < 1e-15 && o[1] == 0.5);
        assert_eq!(out.state.step, 4);
    }

    #[test]
    fn cliff_strip_terminates_with_penalty() {
        let spec = EnvSpec::by_name("cliffmass").unwrap();
        let s = EnvState { obs: vec![-1.0, 4.45, 0.0, 1.0], step: 0, done: false };
        let out = spec.step(&s, &[0.0, 1.0]).unwrap();
        assert!(out.done && out.terminated);
        assert_eq!(out.reward, -10.0);
        assert!(matches!(spec.step(&out.state, &[0.0, 0.0]), Err(Error::Protocol(_))));
    }

    #[test]
    fn horizon_ends_episode() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let mut s = spec.reset(0).unwrap();
        let mut n = 0;
        while !s.done {
            let out = spec.step(&s, &[0.3, -0.2]).unwrap();
            assert!(!out.terminated);
            s = out.state;
            n += 1;
        }
        assert_eq!(n, 200);
    }

    #[test]
    fn out_of_bounds_actions_are_clipped() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let s = EnvState { obs: vec![0.0, 0.0, 0.0, 0.0], step: 0, done: false };
        let a = spec.step(&s, &[5.0, -9.0]).unwrap();
        let b = spec.step(&s, &[1.0, -1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pendulum_observations_stay_in_bounds() {
        let spec = EnvSpec::by_name("pendulum").unwrap();
        let mut r = rng::seeded(4);
        let mut s = spec.reset_with(&mut r);
        while !s.done {
            let a = spec.random_action(&mut r);
            let out = spec.step(&s, &a).unwrap();
            assert!(spec.in_state_bounds(&out.state.obs));
            assert!(out.reward <= 0.0);
            s = out.state;
        }
    }

    #[test]
    fn pendulum_upright_at_rest_is_costless() {
        let spec = EnvSpec::by_name("pendulum").unwrap();
        let (next, r, _) = spec.transition(&[1.0, 0.0, 0.0], &[0.0]);
        assert_eq!(r, 0.0);
        assert!((next[0] - 1.0).abs() < 1e-12 && next[2].abs() < 1e-12);
    }
}
