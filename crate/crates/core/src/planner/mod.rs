//! Rate-maximizing action selection over a tree of imagined futures.
//!
//! From the current state, `w` noised policy actions are drawn as root
//! candidates and rolled through the model's mean prediction. Every node at
//! depths `1..=d` samples `w` noised actions of its own and stores the sum of
//! their rates; nodes below depth `d` are expanded through the model. Each
//! candidate is scored by the sum of node rates in its subtree and the best
//! one (lowest index on ties) is returned.
//!
//! Every sampled action draws its policy and exploration noise from a
//! substream keyed by `(depth, node, sample)`, where `node` is the node's
//! breadth-first index within its depth and children of node `n` sit at
//! `n * w + j`. The batched planner and the explicit enumeration in
//! [`brute_force_plan`] therefore see identical noise.

use serde::{Deserialize, Serialize};

use crate::agent::SacAgent;
use crate::ceb::RateModel;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rng::{self, Rng};
use crate::worldmodel::{DynamicsEnsemble, PredictMode};

/// Node budget of the enumeration oracle.
pub const BRUTE_FORCE_NODE_BUDGET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub width: usize,
    pub depth: usize,
    /// Variance of the Gaussian noise added to each sampled action.
    pub epsilon: f64,
    #[serde(default)]
    pub terminal_masking: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { width: 4, depth: 2, epsilon: 0.15, terminal_masking: false }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Config(format!(
                "planner width and depth must be at least 1, got w={} d={}",
                self.width, self.depth
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("planner noise variance must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// `1 + w + ... + w^d`, saturating.
    pub fn node_count(&self) -> usize {
        let mut total: usize = 1;
        let mut level: usize = 1;
        for _ in 0..self.depth {
            level = level.saturating_mul(self.width);
            total = total.saturating_add(level);
        }
        total
    }
}

/// Actions as a function of states and explicit standard-normal noise.
pub trait PlanPolicy {
    fn action_bounds(&self) -> Vec<[f64; 2]>;
    fn actions_with_noise(&self, s: &Matrix, xi: &Matrix) -> Result<Matrix>;

    /// Same as `actions_with_noise` on `states` with every row repeated
    /// `width` times in place.
    fn repeated_actions_with_noise(&self, states: &Matrix, width: usize, xi: &Matrix) -> Result<Matrix> {
        self.actions_with_noise(&repeat_rows(states, width), xi)
    }
}

/// Each row of `m` repeated `times` times in place.
pub fn repeat_rows(m: &Matrix, times: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * times * m.cols());
    for row in m.iter_rows() {
        for _ in 0..times {
            data.extend_from_slice(row);
        }
    }
    Matrix::from_vec(m.rows() * times, m.cols(), data).expect("row data matches shape")
}

fn row_range(m: &Matrix, start: usize, end: usize) -> Result<Matrix> {
    let c = m.cols();
    Matrix::from_vec(end - start, c, m.data()[start * c..end * c].to_vec())
}

/// Applies `f` to aligned row chunks of `s` and `a` and concatenates the
/// per-row results.
pub fn chunked<F>(s: &Matrix, a: &Matrix, chunk: usize, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&Matrix, &Matrix) -> Result<Vec<f64>>,
{
    if s.rows() != a.rows() {
        return Err(Error::Shape(format!("{} states but {} actions", s.rows(), a.rows())));
    }
    if s.rows() <= chunk {
        return f(s, a);
    }
    let mut out = Vec::with_capacity(s.rows());
    for start in (0..s.rows()).step_by(chunk) {
        let end = (start + chunk).min(s.rows());
        out.extend(f(&row_range(s, start, end)?, &row_range(a, start, end)?)?);
    }
    Ok(out)
}

/// Deterministic next-state prediction.
pub trait PlanModel {
    fn next_states(&self, s: &Matrix, a: &Matrix) -> Result<Matrix>;
}

/// Score of each `(s_i, a_i)` row pair.
pub trait RateFn {
    fn rates(&self, s: &Matrix, a: &Matrix) -> Result<Vec<f64>>;
}

impl PlanPolicy for SacAgent {
    fn action_bounds(&self) -> Vec<[f64; 2]> {
        SacAgent::action_bounds(self)
    }

    fn actions_with_noise(&self, s: &Matrix, xi: &Matrix) -> Result<Matrix> {
        let out = self.actor.forward_batch(s)?;
        Ok(self.policy_from_output(&out, xi)?.actions)
    }

    fn repeated_actions_with_noise(&self, states: &Matrix, width: usize, xi: &Matrix) -> Result<Matrix> {
        let out = self.actor.forward_batch(states)?;
        Ok(self.policy_from_output(&repeat_rows(&out, width), xi)?.actions)
    }
}

impl PlanModel for DynamicsEnsemble {
    fn next_states(&self, s: &Matrix, a: &Matrix) -> Result<Matrix> {
        // Mean prediction never touches the generator.
        let mut unused = rng::seeded(0);
        Ok(self.predict_batch(s, a, PredictMode::Mean, &mut unused)?.0)
    }
}

impl RateFn for RateModel {
    fn rates(&self, s: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        self.rate_batch(s, a)
    }
}

impl<F> RateFn for F
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    fn rates(&self, s: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        Ok(s.iter_rows().zip(a.iter_rows()).map(|(si, ai)| self(si, ai)).collect())
    }
}

/// Rate plus the agent's mean critic value at every scored pair. Only used
/// to time the extra critic pass against plain rate planning.
pub struct QAugmentedRate<'a, R: RateFn + ?Sized> {
    pub inner: &'a R,
    pub agent: &'a SacAgent,
}

impl<R: RateFn + ?Sized> RateFn for QAugmentedRate<'_, R> {
    fn rates(&self, s: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        let mut r = self.inner.rates(s, a)?;
        let q = chunked(s, a, 8192, |s, a| self.agent.q_mean(s, a))?;
        for (v, q) in r.iter_mut().zip(q) {
            *v += q;
        }
        Ok(r)
    }
}

/// Rates with terminal states of `env` scored 0.
pub struct MaskedRate<'a, R: RateFn + ?Sized> {
    pub inner: &'a R,
    pub env: &'a EnvSpec,
}

impl<R: RateFn + ?Sized> RateFn for MaskedRate<'_, R> {
    fn rates(&self, s: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        let mut r = self.inner.rates(s, a)?;
        for (v, si) in r.iter_mut().zip(s.iter_rows()) {
            if self.env.is_terminal(si) {
                *v = 0.0;
            }
        }
        Ok(r)
    }
}

/// Rate of `(s, a)`, or 0 when `s` is terminal in `env`.
pub fn masked_rate(rate: &RateModel, s: &[f64], a: &[f64], env: &EnvSpec) -> Result<f64> {
    if env.is_terminal(s) {
        return Ok(0.0);
    }
    rate.rate(s, a)
}

/// Policy action plus clipped exploration noise for one tree sample.
fn noised_action<P: PlanPolicy + ?Sized>(
    policy: &P,
    bounds: &[[f64; 2]],
    s: &[f64],
    epsilon: f64,
    base: u64,
    key: [u64; 3],
) -> Result<Vec<f64>> {
    let (xi, noise) = sample_noise(bounds.len(), epsilon, base, key);
    let sm = Matrix::from_vec(1, s.len(), s.to_vec())?;
    let xm = Matrix::from_vec(1, xi.len(), xi)?;
    let a = policy.actions_with_noise(&sm, &xm)?;
    Ok(clip_noised(a.row(0), &noise, bounds))
}

fn sample_noise(ad: usize, epsilon: f64, base: u64, key: [u64; 3]) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::substream(base, &key);
    let xi = rng::normals(&mut r, ad);
    let sd = epsilon.sqrt();
    let noise = rng::normals(&mut r, ad).into_iter().map(|v| sd * v).collect();
    (xi, noise)
}

fn clip_noised(a: &[f64], noise: &[f64], bounds: &[[f64; 2]]) -> Vec<f64> {
    a.iter()
        .zip(noise)
        .zip(bounds)
        .map(|((v, n), [lo, hi])| (v + n).clamp(*lo, *hi))
        .collect()
}

/// Sampled actions for every `(node, sample)` pair of one level, rows laid
/// out as `node * w + j`.
fn level_actions<P: PlanPolicy + ?Sized>(
    policy: &P,
    bounds: &[[f64; 2]],
    states: &Matrix,
    width: usize,
    epsilon: f64,
    base: u64,
    depth: usize,
) -> Result<(Matrix, Matrix)> {
    let (n, sd, ad) = (states.rows(), states.cols(), bounds.len());
    let rows = n * width;
    let mut rep = Matrix::zeros(rows, sd);
    let mut xi = Matrix::zeros(rows, ad);
    let mut noise = Matrix::zeros(rows, ad);
    for node in 0..n {
        for j in 0..width {
            let row = node * width + j;
            rep.row_mut(row).copy_from_slice(states.row(node));
            let (x, u) = sample_noise(ad, epsilon, base, [depth as u64, node as u64, j as u64]);
            xi.row_mut(row).copy_from_slice(&x);
            noise.row_mut(row).copy_from_slice(&u);
        }
    }
    let raw = policy.repeated_actions_with_noise(states, width, &xi)?;
    let mut actions = Matrix::zeros(rows, ad);
    for r in 0..rows {
        actions.row_mut(r).copy_from_slice(&clip_noised(raw.row(r), noise.row(r), bounds));
    }
    Ok((rep, actions))
}

/// One depth of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeLevel {
    /// Node states in breadth-first order.
    pub states: Matrix,
    /// Sum of the rates of the `w` actions sampled at each node.
    pub rates: Vec<f64>,
    /// Nodes at or below a terminal state (always false without masking).
    pub masked: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateTree {
    pub width: usize,
    pub root: Vec<f64>,
    /// Root candidate actions, one per row.
    pub candidates: Matrix,
    /// Levels for depths `1..=d`.
    pub levels: Vec<TreeLevel>,
    pub root_sums: Vec<f64>,
    pub chosen: usize,
}

impl RateTree {
    pub fn node_count(&self) -> usize {
        1 + self.levels.iter().map(|l| l.states.rows()).sum::<usize>()
    }

    pub fn action(&self) -> Vec<f64> {
        self.candidates.row(self.chosen).to_vec()
    }

    /// Debug dump: every node with a hash of its state, its rate and the
    /// index of its parent in the same list.
    pub fn to_json(&self) -> serde_json::Value {
        let hash = |s: &[f64]| {
            s.iter()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3))
        };
        let mut nodes = vec![serde_json::json!({"depth": 0, "state_hash": hash(&self.root), "rate": 0.0, "parent": null})];
        let mut level_start = 0usize;
        for (t, level) in self.levels.iter().enumerate() {
            let this_start = nodes.len();
            for n in 0..level.states.rows() {
                let parent = if t == 0 { 0 } else { level_start + n / self.width };
                nodes.push(serde_json::json!({
                    "depth": t + 1,
                    "state_hash": hash(level.states.row(n)),
                    "rate": level.rates[n],
                    "parent": parent,
                }));
            }
            level_start = this_start;
        }
        serde_json::json!({"chosen": self.chosen, "root_sums": self.root_sums, "nodes": nodes})
    }
}

/// Lowest index among the maxima.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Builds the full tree and picks the root candidate with the largest
/// subtree rate sum. The substream base is drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn plan_tree<P, M, R>(
    policy: &P,
    model: &M,
    rate: &R,
    s: &[f64],
    config: &PlannerConfig,
    env: Option<&EnvSpec>,
    rng: &mut Rng,
) -> Result<RateTree>
where
    P: PlanPolicy + ?Sized,
    M: PlanModel + ?Sized,
    R: RateFn + ?Sized,
{
    config.validate()?;
    let base = rng::fork(rng);
    let (w, d) = (config.width, config.depth);
    let bounds = policy.action_bounds();
    let root = Matrix::from_vec(1, s.len(), s.to_vec())?;
    let (root_rep, candidates) = level_actions(policy, &bounds, &root, w, config.epsilon, base, 0)?;
    let mut states = model.next_states(&root_rep, &candidates)?;
    let mut parent_masked = vec![false; w];
    let mut levels = Vec::with_capacity(d);
    for depth in 1..=d {
        let n = states.rows();
        let (rep, actions) = level_actions(policy, &bounds, &states, w, config.epsilon, base, depth)?;
        let per_sample = rate.rates(&rep, &actions)?;
        let mut rates = vec![0.0; n];
        let mut masked = vec![false; n];
        for node in 0..n {
            let terminal_here = config.terminal_masking && env.is_some_and(|e| e.is_terminal(states.row(node)));
            masked[node] = parent_masked[node] || terminal_here;
            let samples = &per_sample[node * w..(node + 1) * w];
            if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
                return Err(Error::Planning { depth, node, reason: format!("rate of sample {bad} is not finite") });
            }
            rates[node] = if masked[node] { 0.0 } else { samples.iter().sum() };
        }
        let next = if depth < d { Some(model.next_states(&rep, &actions)?) } else { None };
        parent_masked = masked.iter().flat_map(|&m| std::iter::repeat_n(m, w)).collect();
        levels.push(TreeLevel { states, rates, masked });
        if let Some(nx) = next {
            states = nx;
        } else {
            break;
        }
    }
    let mut root_sums = vec![0.0; w];
    for level in &levels {
        let span = level.rates.len() / w;
        for (c, sum) in root_sums.iter_mut().enumerate() {
            *sum += level.rates[c * span..(c + 1) * span].iter().sum::<f64>();
        }
    }
    let chosen = argmax_first(&root_sums);
    Ok(RateTree { width: w, root: s.to_vec(), candidates, levels, root_sums, chosen })
}

/// The chosen action of [`plan_tree`].
#[allow(clippy::too_many_arguments)]
pub fn plan<P, M, R>(
    policy: &P,
    model: &M,
    rate: &R,
    s: &[f64],
    config: &PlannerConfig,
    env: Option<&EnvSpec>,
    rng: &mut Rng,
) -> Result<Vec<f64>>
where
    P: PlanPolicy + ?Sized,
    M: PlanModel + ?Sized,
    R: RateFn + ?Sized,
{
    Ok(plan_tree(policy, model, rate, s, config, env, rng)?.action())
}

/// One explicit path step: the node it leaves from and what was sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStep {
    pub depth: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub rate: f64,
}

/// Test oracle for [`plan`]: walks every node one sample at a time with the
/// same substreams, records each `(state, action, rate)` and sums rates per
/// root candidate directly. Also returns the sums and the explicit steps.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn brute_force_plan_detailed<P, M, R>(
    policy: &P,
    model: &M,
    rate: &R,
    s: &[f64],
    config: &PlannerConfig,
    env: Option<&EnvSpec>,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<PathStep>>)>
where
    P: PlanPolicy + ?Sized,
    M: PlanModel + ?Sized,
    R: RateFn + ?Sized,
{
    config.validate()?;
    let nodes = config.node_count();
    if nodes > BRUTE_FORCE_NODE_BUDGET {
        return Err(Error::Oracle(format!("{nodes} nodes exceed the budget of {BRUTE_FORCE_NODE_BUDGET}")));
    }
    let base = rng::fork(rng);
    let bounds = policy.action_bounds();
    let w = config.width;
    let mut candidates = Vec::with_capacity(w);
    let mut sums = vec![0.0; w];
    let mut steps = vec![Vec::new(); w];
    for c in 0..w {
        let a = noised_action(policy, &bounds, s, config.epsilon, base, [0, 0, c as u64])?;
        let child = single_next(model, s, &a)?;
        let mut stack = vec![(1usize, c, child, false)];
        while let Some((depth, node, state, parent_masked)) = stack.pop() {
            let masked = parent_masked
                || (config.terminal_masking && env.is_some_and(|e| e.is_terminal(&state)));
            for j in 0..w {
                let a = noised_action(policy, &bounds, &state, config.epsilon, base, [depth as u64, node as u64, j as u64])?;
                let sm = Matrix::from_vec(1, state.len(), state.clone())?;
                let am = Matrix::from_vec(1, a.len(), a.clone())?;
                let r = rate.rates(&sm, &am)?[0];
                if !r.is_finite() {
                    return Err(Error::Planning { depth, node, reason: format!("rate of sample {j} is not finite") });
                }
                let r = if masked { 0.0 } else { r };
                steps[c].push(PathStep { depth, state: state.clone(), action: a.clone(), rate: r });
                sums[c] += r;
                if depth < config.depth {
                    let next = single_next(model, &state, &a)?;
                    stack.push((depth + 1, node * w + j, next, masked));
                }
            }
        }
        candidates.push(a);
    }
    let chosen = argmax_first(&sums);
    Ok((candidates.swap_remove(chosen), sums, steps))
}

#[allow(clippy::too_many_arguments)]
pub fn brute_force_plan<P, M, R>(
    policy: &P,
    model: &M,
    rate: &R,
    s: &[f64],
    config: &PlannerConfig,
    env: Option<&EnvSpec>,
    rng: &mut Rng,
) -> Result<Vec<f64>>
where
    P: PlanPolicy + ?Sized,
    M: PlanModel + ?Sized,
    R: RateFn + ?Sized,
{
    Ok(brute_force_plan_detailed(policy, model, rate, s, config, env, rng)?.0)
}

fn single_next<M: PlanModel + ?Sized>(model: &M, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    let sm = Matrix::from_vec(1, s.len(), s.to_vec())?;
    let am = Matrix::from_vec(1, a.len(), a.to_vec())?;
    Ok(model.next_states(&sm, &am)?.into_data())
}
