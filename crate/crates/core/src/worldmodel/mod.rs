//! Ensemble of Gaussian dynamics-and-reward models.
//!
//! Each member maps a normalized `(s, a)` to a diagonal Gaussian over the
//! normalized target `(Δs, r)`. The first `state_dim + 1` outputs are means,
//! the rest are log standard deviations.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::checkpoint::{read_params, write_params};
use crate::numkit::gaussian::{clamp_log_std, HALF_LN_2PI, LOG_STD_MAX, LOG_STD_MIN};
use crate::numkit::{Activation, AdamConfig, Matrix, MlpParams, Normalizer, OptimState};
use crate::rng::{self, Rng};
use crate::storage::{ReplayBuffer, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldModelConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Gradient steps per member for each call to [`DynamicsEnsemble::train`]
    /// made by the agent loops.
    pub train_steps: usize,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            members: 7,
            hidden: vec![64, 64],
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 128,
            train_steps: 100,
        }
    }
}

impl WorldModelConfig {
    /// Four hidden layers of 200 units, as used for the large benchmarks.
    pub fn full_size() -> Self {
        Self {
            hidden: vec![200; 4],
            batch_size: 256,
            train_steps: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members < 1 || self.batch_size == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("world model needs members ≥ 1, batch ≥ 1 and nonzero widths".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("world model lr must be positive, weight decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// Pick a member uniformly, then sample its Gaussian.
    SampleMember,
    /// Average of member means, no noise.
    Mean,
}

/// Per-member predictive distribution in raw units.
#[derive(Debug, Clone)]
pub struct MemberHeads {
    /// Rows of `(Δs, r)` means.
    pub mean: Matrix,
    /// Rows of `(Δs, r)` standard deviations.
    pub std: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    /// Mean NLL per member on its final minibatch (normalized target units).
    pub member_nll: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DynamicsEnsemble {
    pub config: WorldModelConfig,
    state_dim: usize,
    action_dim: usize,
    members: Vec<MlpParams>,
    optims: Vec<OptimState>,
    input_norm: Normalizer,
    target_norm: Normalizer,
    trained: bool,
    state_bounds: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    state_dim: usize,
    action_dim: usize,
    input_norm: Normalizer,
    target_norm: Normalizer,
    trained: bool,
    config: WorldModelConfig,
    #[serde(default)]
    state_bounds: Option<Vec<[f64; 2]>>,
}

impl DynamicsEnsemble {
    pub fn new(state_dim: usize, action_dim: usize, config: WorldModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend(&config.hidden);
        sizes.push(2 * (state_dim + 1));
        let members = (0..config.members)
            .map(|_| MlpParams::new(&sizes, Activation::Elu, Activation::Identity, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamConfig::new(config.lr).with_weight_decay(config.weight_decay);
        let optims = members.iter().map(|m| OptimState::for_mlp(m, adam)).collect();
        Ok(Self {
            config,
            state_dim,
            action_dim,
            members,
            optims,
            input_norm: Normalizer::identity(state_dim + action_dim),
            target_norm: Normalizer::identity(state_dim + 1),
            trained: false,
            state_bounds: None,
        })
    }

    /// Wraps hand-built members; the result counts as trained.
    pub fn from_members(
        state_dim: usize,
        action_dim: usize,
        members: Vec<MlpParams>,
        input_norm: Normalizer,
        target_norm: Normalizer,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        for m in &members {
            if m.in_dim() != state_dim + action_dim || m.out_dim() != 2 * (state_dim + 1) {
                return Err(Error::Shape("member dims do not match ensemble".into()));
            }
            if m.specs() != members[0].specs() {
                return Err(Error::Shape("ensemble members must share an architecture".into()));
            }
        }
        let config = WorldModelConfig {
            members: members.len(),
            hidden: members[0].layers[..members[0].layers.len() - 1]
                .iter()
                .map(|l| l.out_dim())
                .collect(),
            ..WorldModelConfig::default()
        };
        let adam = AdamConfig::new(config.lr).with_weight_decay(config.weight_decay);
        let optims = members.iter().map(|m| OptimState::for_mlp(m, adam)).collect();
        Ok(Self {
            config,
            state_dim,
            action_dim,
            members,
            optims,
            input_norm,
            target_norm,
            trained: true,
            state_bounds: None,
        })
    }

    /// Clips predicted next states to `bounds` (per-dimension `[lo, hi]`).
    pub fn with_state_bounds(mut self, bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.len() != self.state_dim {
            return Err(Error::Shape("state bounds do not match the state dimension".into()));
        }
        self.state_bounds = Some(bounds);
        Ok(self)
    }

    pub fn state_bounds(&self) -> Option<&[[f64; 2]]> {
        self.state_bounds.as_deref()
    }

    #[inline]
    fn clip_state(&self, j: usize, v: f64) -> f64 {
        match &self.state_bounds {
            Some(b) => v.clamp(b[j][0], b[j][1]),
            None => v,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[MlpParams] {
        &self.members
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn target_of(t: &Transition) -> Vec<f64> {
        let mut y: Vec<f64> = t.s_next.iter().zip(&t.s).map(|(n, s)| n - s).collect();
        y.push(t.r);
        y
    }

    fn input_of(&self, s: &[f64], a: &[f64], out: &mut [f64]) {
        let sd = self.state_dim;
        for j in 0..sd {
            out[j] = (s[j] - self.input_norm.mean[j]) / self.input_norm.std[j];
        }
        for j in 0..self.action_dim {
            out[sd + j] = (a[j] - self.input_norm.mean[sd + j]) / self.input_norm.std[sd + j];
        }
    }

    fn inputs(&self, s: &Matrix, a: &Matrix) -> Result<Matrix> {
        if s.cols() != self.state_dim || a.cols() != self.action_dim || s.rows() != a.rows() {
            return Err(Error::Shape(format!(
                "ensemble expects ({}, {}) inputs, got {}x{} and {}x{}",
                self.state_dim,
                self.action_dim,
                s.rows(),
                s.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let mut x = Matrix::zeros(s.rows(), self.state_dim + self.action_dim);
        for i in 0..s.rows() {
            self.input_of(s.row(i), a.row(i), x.row_mut(i));
        }
        Ok(x)
    }

    /// Fits every member for `n_steps` on bootstrapped minibatches drawn
    /// uniformly from the union of `data`. Normalization statistics are
    /// refit from `data` first.
    pub fn train(&mut self, data: &[&ReplayBuffer], n_steps: usize, rng: &mut Rng) -> Result<TrainMetrics> {
        let all: Vec<&Transition> = data.iter().flat_map(|b| b.iter()).collect();
        if all.is_empty() {
            return Err(Error::Sampling("world model training data is empty".into()));
        }
        let sd = self.state_dim;
        let xs: Vec<Vec<f64>> = all.iter().map(|t| [t.s.as_slice(), t.a.as_slice()].concat()).collect();
        let ys: Vec<Vec<f64>> = all.iter().map(|t| Self::target_of(t)).collect();
        self.input_norm = Normalizer::fit(xs.iter().map(|v| v.as_slice()), sd + self.action_dim);
        self.target_norm = Normalizer::fit(ys.iter().map(|v| v.as_slice()), sd + 1);
        let xn: Vec<Vec<f64>> = xs.iter().map(|x| self.input_norm.apply(x)).collect();
        let yn: Vec<Vec<f64>> = ys.iter().map(|y| self.target_norm.apply(y)).collect();

        let b = self.config.batch_size;
        let mut member_nll = vec![f64::NAN; self.members.len()];
        for _ in 0..n_steps {
            for k in 0..self.members.len() {
                let idx: Vec<usize> = (0..b).map(|_| rng::index(rng, all.len())).collect();
                let x = Matrix::from_rows(&idx.iter().map(|&i| xn[i].as_slice()).collect::<Vec<_>>())?;
                let y = Matrix::from_rows(&idx.iter().map(|&i| yn[i].as_slice()).collect::<Vec<_>>())?;
                let net = &mut self.members[k];
                let cache = net.forward_cached(&x)?;
                let (loss, d_out) = nll_and_grad(cache.output(), &y);
                if !loss.is_finite() {
                    return Err(Error::training("dynamics ensemble", k, format!("loss is {loss}")));
                }
                let (grads, _) = net.backward(&cache, &d_out)?;
                self.optims[k]
                    .step_mlp(net, &grads)
                    .map_err(|e| Error::training("dynamics ensemble", k, e.to_string()))?;
                member_nll[k] = loss;
            }
        }
        if n_steps > 0 {
            self.trained = true;
        }
        Ok(TrainMetrics { member_nll })
    }

    /// Mean NLL per member over `items` under current normalization.
    pub fn nll(&self, items: &[Transition]) -> Result<Vec<f64>> {
        let x = Matrix::from_rows(
            &items
                .iter()
                .map(|t| self.input_norm.apply(&[t.s.as_slice(), t.a.as_slice()].concat()))
                .collect::<Vec<_>>(),
        )?;
        let y = Matrix::from_rows(
            &items
                .iter()
                .map(|t| self.target_norm.apply(&Self::target_of(t)))
                .collect::<Vec<_>>(),
        )?;
        self.members
            .iter()
            .map(|m| Ok(nll_and_grad(&m.forward_batch(&x)?, &y).0))
            .collect()
    }

    fn require_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::State("dynamics ensemble has not been trained".into()));
        }
        Ok(())
    }

    /// Predictive heads of every member for a batch of `(s, a)` rows.
    pub fn member_heads(&self, s: &Matrix, a: &Matrix) -> Result<Vec<MemberHeads>> {
        self.require_trained()?;
        let x = self.inputs(s, a)?;
        let d = self.state_dim + 1;
        self.members
            .iter()
            .map(|m| {
                let out = m.forward_batch(&x)?;
                let mut mean = Matrix::zeros(x.rows(), d);
                let mut std = Matrix::zeros(x.rows(), d);
                for i in 0..x.rows() {
                    let row = out.row(i);
                    for j in 0..d {
                        let sc = self.target_norm.std[j];
                        mean.set(i, j, row[j] * sc + self.target_norm.mean[j]);
                        std.set(i, j, clamp_log_std(row[d + j]).exp() * sc);
                    }
                }
                Ok(MemberHeads { mean, std })
            })
            .collect()
    }

    /// Next states and rewards for a batch of `(s, a)` rows.
    pub fn predict_batch(
        &self,
        s: &Matrix,
        a: &Matrix,
        mode: PredictMode,
        rng: &mut Rng,
    ) -> Result<(Matrix, Vec<f64>)> {
        let heads = self.member_heads(s, a)?;
        let n = s.rows();
        let sd = self.state_dim;
        let mut next = Matrix::zeros(n, sd);
        let mut r = vec![0.0; n];
        let k = heads.len() as f64;
        for i in 0..n {
            let mut y = vec![0.0; sd + 1];
            match mode {
                PredictMode::Mean => {
                    for h in &heads {
                        for (yj, m) in y.iter_mut().zip(h.mean.row(i)) {
                            *yj += m;
                        }
                    }
                    y.iter_mut().for_each(|v| *v /= k);
                }
                PredictMode::SampleMember => {
                    let h = &heads[rng::index(rng, heads.len())];
                    for j in 0..=sd {
                        y[j] = h.mean.get(i, j) + h.std.get(i, j) * rng::normal(rng);
                    }
                }
            }
            for j in 0..sd {
                next.set(i, j, self.clip_state(j, s.get(i, j) + y[j]));
            }
            r[i] = y[sd];
        }
        Ok((next, r))
    }

    pub fn predict(&self, s: &[f64], a: &[f64], mode: PredictMode, rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
        let sm = Matrix::from_vec(1, s.len(), s.to_vec())?;
        let am = Matrix::from_vec(1, a.len(), a.to_vec())?;
        let (next, r) = self.predict_batch(&sm, &am, mode, rng)?;
        Ok((next.into_data(), r[0]))
    }

    /// Every member's mean next state at `(s, a)`, one member per row.
    pub fn member_next_means(&self, s: &[f64], a: &[f64]) -> Result<Matrix> {
        let sm = Matrix::from_vec(1, s.len(), s.to_vec())?;
        let am = Matrix::from_vec(1, a.len(), a.to_vec())?;
        let per_member = self.member_next_means_batch(&sm, &am)?;
        let mut out = Matrix::zeros(per_member.len(), self.state_dim);
        for (k, m) in per_member.iter().enumerate() {
            out.row_mut(k).copy_from_slice(m.row(0));
        }
        Ok(out)
    }

    /// Mean next states of each member for a batch, one matrix per member.
    pub fn member_next_means_batch(&self, s: &Matrix, a: &Matrix) -> Result<Vec<Matrix>> {
        let heads = self.member_heads(s, a)?;
        Ok(heads
            .iter()
            .map(|h| {
                let mut out = Matrix::zeros(s.rows(), self.state_dim);
                for i in 0..s.rows() {
                    for j in 0..self.state_dim {
                        out.set(i, j, self.clip_state(j, s.get(i, j) + h.mean.get(i, j)));
                    }
                }
                out
            })
            .collect())
    }

    /// A fresh ensemble clipping predictions to the state bounds of `env`.
    pub fn for_env(env: &crate::envs::EnvSpec, config: WorldModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::new(env.state_dim, env.action_dim, config, rng)?.with_state_bounds(env.state_bounds.clone())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = Meta {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            input_norm: self.input_norm.clone(),
            target_norm: self.target_norm.clone(),
            trained: self.trained,
            config: self.config.clone(),
            state_bounds: self.state_bounds.clone(),
        };
        let nets: Vec<&MlpParams> = self.members.iter().collect();
        write_params(w, &nets, serde_json::to_value(meta)?)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let (members, meta) = read_params(r)?;
        let meta: Meta = serde_json::from_value(meta)?;
        let mut ens = Self::from_members(meta.state_dim, meta.action_dim, members, meta.input_norm, meta.target_norm)?;
        let adam = AdamConfig::new(meta.config.lr).with_weight_decay(meta.config.weight_decay);
        ens.optims = ens.members.iter().map(|m| OptimState::for_mlp(m, adam)).collect();
        ens.config = meta.config;
        ens.trained = meta.trained;
        ens.state_bounds = meta.state_bounds;
        Ok(ens)
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

/// Mean Gaussian NLL of targets `y` under network output `out` (means then
/// raw log stds), plus its gradient with respect to `out`.
fn nll_and_grad(out: &Matrix, y: &Matrix) -> (f64, Matrix) {
    let n = y.rows();
    let d = y.cols();
    let mut grad = Matrix::zeros(n, 2 * d);
    let mut loss = 0.0;
    for i in 0..n {
        let o = out.row(i);
        let yr = y.row(i);
        let g = grad.row_mut(i);
        for j in 0..d {
            let raw = o[d + j];
            let ls = clamp_log_std(raw);
            let inv = (-ls).exp();
            let z = (yr[j] - o[j]) * inv;
            loss += 0.5 * z * z + ls + HALF_LN_2PI;
            g[j] = -z * inv / n as f64;
            g[d + j] = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                (1.0 - z * z) / n as f64
            } else {
                0.0
            };
        }
    }
    (loss / n as f64, grad)
}

/// Disagreement of an ensemble: population standard deviation across
/// members (rows), per output column, averaged over columns.
///
/// The variance is computed from pairwise differences, so it is exactly
/// zero when all members agree.
pub fn ensemble_uncertainty(outputs: &Matrix) -> Result<f64> {
    let k = outputs.rows();
    if k < 2 {
        return Err(Error::Uncertainty(format!("need at least two members, got {k}")));
    }
    let d = outputs.cols();
    if d == 0 {
        return Err(Error::Uncertainty("member outputs are empty".into()));
    }
    let mut total = 0.0;
    for j in 0..d {
        let mut acc = 0.0;
        for a in 0..k {
            for b in (a + 1)..k {
                let diff = outputs.get(a, j) - outputs.get(b, j);
                acc += diff * diff;
            }
        }
        total += (acc / (k * k) as f64).sqrt();
    }
    Ok(total / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{collect_random_dataset, EnvSpec};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    #[test]
    fn uncertainty_hand_values() {
        let m = Matrix::from_rows(&[[0.0], [2.0]]).unwrap();
        assert!((ensemble_uncertainty(&m).unwrap() - 1.0).abs() < 1e-15);
        let same = Matrix::from_rows(&[[0.1, 0.3]; 7]).unwrap();
        assert_eq!(ensemble_uncertainty(&same).unwrap(), 0.0);
        let one = Matrix::from_rows(&[[1.0]]).unwrap();
        assert!(matches!(ensemble_uncertainty(&one), Err(Error::Uncertainty(_))));
    }

    proptest! {
        #[test]
        fn uncertainty_matches_two_pass_std_and_invariances(
            rows in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), 2..8),
            shift in -5.0..5.0f64,
            rot in 0usize..8,
        ) {
            let m = Matrix::from_rows(&rows).unwrap();
            let u = ensemble_uncertainty(&m).unwrap();
            prop_assert!(u >= 0.0);
            let k = rows.len() as f64;
            let mut oracle = 0.0;
            for j in 0..3 {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / k;
                oracle += (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / k).sqrt();
            }
            prop_assert!((u - oracle / 3.0).abs() < 1e-9);
            let mut permuted = rows.clone();
            let len = permuted.len();
            permuted.rotate_left(rot % len);
            let up = ensemble_uncertainty(&Matrix::from_rows(&permuted).unwrap()).unwrap();
            prop_assert!((u - up).abs() < 1e-12);
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let us = ensemble_uncertainty(&Matrix::from_rows(&shifted).unwrap()).unwrap();
            prop_assert!((u - us).abs() < 1e-9);
            let distinct = rows.iter().any(|r| r != &rows[0]);
            prop_assert_eq!(u > 0.0, distinct);
        }
    }

    fn identical_ensemble(log_std_bias: f64) -> DynamicsEnsemble {
        let mut r = rng::seeded(4);
        let mut m = MlpParams::new(&[3, 5, 4], Activation::Elu, Activation::Identity, false, &mut r).unwrap();
        let last = m.layers.len() - 1;
        for i in 2..4 {
            m.layers[last].weight.row_mut(i).fill(0.0);
            m.layers[last].bias[i] = log_std_bias;
        }
        DynamicsEnsemble::from_members(1, 2, vec![m; 3], Normalizer::identity(3), Normalizer::identity(2)).unwrap()
    }

    #[test]
    fn degenerate_ensemble_modes_agree() {
        let ens = identical_ensemble(-50.0);
        let mut r = rng::seeded(0);
        let (s1, r1) = ens.predict(&[0.3], &[0.1, -0.2], PredictMode::Mean, &mut r).unwrap();
        let (s2, r2) = ens.predict(&[0.3], &[0.1, -0.2], PredictMode::SampleMember, &mut r).unwrap();
        // The log-std clamp leaves σ = e^-10; agreement is to that scale.
        assert!((s1[0] - s2[0]).abs() < 1e-3 && (r1 - r2).abs() < 1e-3);
    }

    #[test]
    fn mean_mode_averages_member_means() {
        let mut r = rng::seeded(8);
        let members: Vec<MlpParams> = (0..4)
            .map(|_| MlpParams::new(&[3, 6, 4], Activation::Elu, Activation::Identity, false, &mut r).unwrap())
            .collect();
        let ens =
            DynamicsEnsemble::from_members(1, 2, members, Normalizer::identity(3), Normalizer::identity(2)).unwrap();
        let (s, a) = ([0.5], [0.2, 0.7]);
        let mut mean = [0.0; 2];
        for m in ens.members() {
            let out = m.forward(&[s[0], a[0], a[1]]).unwrap();
            mean[0] += out[0] / 4.0;
            mean[1] += out[1] / 4.0;
        }
        let (next, rew) = ens.predict(&s, &a, PredictMode::Mean, &mut r).unwrap();
        assert!((next[0] - (s[0] + mean[0])).abs() < 1e-12);
        assert!((rew - mean[1]).abs() < 1e-12);

        // Monte-Carlo: sampled next states average to the mixture mean.
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| ens.predict(&s, &a, PredictMode::SampleMember, &mut r).unwrap().0[0])
            .collect();
        let mu = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mu - next[0]).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn untrained_predict_is_state_error() {
        let ens = DynamicsEnsemble::new(2, 1, WorldModelConfig::default(), &mut rng::seeded(0)).unwrap();
        let err = ens.predict(&[0.0, 0.0], &[0.0], PredictMode::Mean, &mut rng::seeded(0));
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut r = rng::seeded(6);
        let out = Matrix::from_vec(3, 4, (0..12).map(|_| rng::normal(&mut r)).collect()).unwrap();
        let y = Matrix::from_vec(3, 2, (0..6).map(|_| rng::normal(&mut r)).collect()).unwrap();
        let (_, g) = nll_and_grad(&out, &y);
        let h = 1e-6;
        for i in 0..12 {
            let mut p = out.clone();
            p.data_mut()[i] += h;
            let mut m = out.clone();
            m.data_mut()[i] -= h;
            let fd = (nll_and_grad(&p, &y).0 - nll_and_grad(&m, &y).0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn single_transition_is_memorized() {
        let t = Transition { s: vec![0.5, -0.2], a: vec![0.3], r: -1.5, s_next: vec![0.6, -0.1], done: false };
        let buf = ReplayBuffer::from_transitions(vec![t.clone(); 8], 2, 1).unwrap();
        let cfg = WorldModelConfig { members: 2, batch_size: 8, ..WorldModelConfig::default() };
        let mut ens = DynamicsEnsemble::new(2, 1, cfg, &mut rng::seeded(1)).unwrap();
        ens.train(&[&buf], 15_000, &mut rng::seeded(2)).unwrap();
        let want = [0.1, 0.1, -1.5];
        let heads = ens
            .member_heads(&Matrix::from_rows(&[&t.s]).unwrap(), &Matrix::from_rows(&[&t.a]).unwrap())
            .unwrap();
        for h in heads {
            for j in 0..3 {
                let (mu, sd) = (h.mean.get(0, j), h.std.get(0, j));
                // The mean sits on the target, well inside a predicted
                // spread that has shrunk from its initial scale of ~1.
                assert!((mu - want[j]).abs() < 1e-2 && (mu - want[j]).abs() < sd, "{mu} ± {sd}");
                assert!(sd < 0.1);
            }
        }
    }

    #[test]
    fn learns_pointmass_dynamics() {
        let spec = EnvSpec::by_name("pointmass").unwrap();
        let ds = collect_random_dataset(&spec, 5_000, 3).unwrap();
        let mut items = ds.transitions.clone();
        items.shuffle(&mut rng::seeded(9));
        let split = items.len() * 9 / 10;
        let train = ReplayBuffer::from_transitions(items[..split].to_vec(), 4, 2).unwrap();
        let held = &items[split..];
        let mut ens = DynamicsEnsemble::new(4, 2, WorldModelConfig { members: 3, ..Default::default() }, &mut rng::seeded(0))
            .unwrap()
            .with_state_bounds(spec.state_bounds.clone())
            .unwrap();
        ens.train(&[&train], 3_000, &mut rng::seeded(1)).unwrap();
        let s = Matrix::from_rows(&held.iter().map(|t| t.s.as_slice()).collect::<Vec<_>>()).unwrap();
        let a = Matrix::from_rows(&held.iter().map(|t| t.a.as_slice()).collect::<Vec<_>>()).unwrap();
        let (next, _) = ens.predict_batch(&s, &a, PredictMode::Mean, &mut rng::seeded(0)).unwrap();
        let mut se = 0.0;
        for (i, t) in held.iter().enumerate() {
            for j in 0..4 {
                se += (next.get(i, j) - t.s_next[j]).powi(2);
            }
        }
        let rmse = (se / (held.len() * 4) as f64).sqrt();
        assert!(rmse < 1e-2, "held-out rmse {rmse}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let ens = identical_ensemble(-1.0);
        let mut buf = Vec::new();
        ens.write(&mut buf).unwrap();
        let back = DynamicsEnsemble::read(&mut std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.members(), ens.members());
        assert!(back.is_trained());
        let mut r = rng::seeded(0);
        assert_eq!(
            back.predict(&[0.2], &[0.0, 1.0], PredictMode::Mean, &mut r).unwrap(),
            ens.predict(&[0.2], &[0.0, 1.0], PredictMode::Mean, &mut r).unwrap()
        );
    }
}
