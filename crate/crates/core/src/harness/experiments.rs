//! Uncertainty-rank study, planning-noise sweep and planner timing.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{finetune_seed, pretrain_seed, prepare, stats, write_report, ExperimentConfig, MetricLog, OtoReport};
use crate::agent::{AgentConfig, SacAgent};
use crate::ceb::RateModel;
use crate::envs::{collect_expert_dataset, collect_random_dataset, EnvSpec};
use crate::error::{Error, Result};
use crate::explorers::ExplorerConfig;
use crate::numkit::Matrix;
use crate::planner::{self, PlannerConfig, QAugmentedRate};
use crate::rng;
use crate::storage::Batch;
use crate::worldmodel::{ensemble_uncertainty, DynamicsEnsemble};

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

pub const RANK_COMPONENTS: [&str; 4] = ["reward", "value", "transition", "policy"];

/// |ρ| at or beyond which a pair is flagged.
pub const RANK_HIGHLIGHT: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub env: String,
    /// Random-policy transitions the ensembles are trained on.
    pub train_size: usize,
    /// Expert-policy transitions that get ranked.
    pub probe_size: usize,
    pub expert_noise: f64,
    /// Members of every ensemble.
    pub members: usize,
    /// SAC updates per value/policy member.
    pub sac_steps: usize,
    pub agent: AgentConfig,
    pub seed: u64,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            env: "pointmass".into(),
            train_size: 20_000,
            probe_size: 2_500,
            expert_noise: 0.1,
            members: 7,
            sac_steps: 2_000,
            agent: AgentConfig::default(),
            seed: 0,
        }
    }
}

/// Pairwise Spearman ρ between component uncertainties over the probe set,
/// in [`RANK_COMPONENTS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub rho: [[f64; 4]; 4],
    /// Per-component uncertainty of each probe tuple.
    pub uncertainties: [Vec<f64>; 4],
}

impl RankResult {
    pub fn highlight(rho: f64) -> &'static str {
        if rho >= RANK_HIGHLIGHT {
            "agree"
        } else if rho <= -RANK_HIGHLIGHT {
            "disagree"
        } else {
            ""
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut rows = Vec::new();
        for (i, a) in RANK_COMPONENTS.iter().enumerate() {
            for (j, b) in RANK_COMPONENTS.iter().enumerate() {
                let r = self.rho[i][j];
                rows.push(vec![a.to_string(), b.to_string(), r.to_string(), Self::highlight(r).to_string()]);
            }
        }
        write_csv(path, &["row", "col", "rho", "highlight"], &rows)
    }
}

fn per_row_uncertainty(members: &[Matrix]) -> Result<Vec<f64>> {
    let n = members[0].rows();
    let d = members[0].cols();
    let mut out = Vec::with_capacity(n);
    let mut m = Matrix::zeros(members.len(), d);
    for i in 0..n {
        for (k, mk) in members.iter().enumerate() {
            m.row_mut(k).copy_from_slice(mk.row(i));
        }
        out.push(ensemble_uncertainty(&m)?);
    }
    Ok(out)
}

fn column(v: Vec<f64>) -> Result<Matrix> {
    let n = v.len();
    Matrix::from_vec(n, 1, v)
}

/// Trains reward, value, transition and policy ensembles on random-policy
/// data, scores expert-policy tuples by each ensemble's disagreement and
/// correlates the rankings. Reward and transition members are the heads of
/// one dynamics ensemble; value and policy members are the critics and
/// actors of independently seeded SAC agents.
pub fn uncertainty_rank_experiment(config: &RankConfig) -> Result<RankResult> {
    let env = EnvSpec::by_name(&config.env)?;
    config.agent.validate()?;
    if config.members < 2 || config.probe_size < 2 || config.train_size == 0 {
        return Err(Error::Config("rank study needs >= 2 members, >= 2 probes and training data".into()));
    }
    let train = collect_random_dataset(&env, config.train_size, rng::derive_seed(config.seed, &[1]))?.to_buffer()?;
    let probe = collect_expert_dataset(&env, config.probe_size, config.expert_noise, rng::derive_seed(config.seed, &[2]))?;
    let s = Matrix::from_rows(&probe.transitions.iter().map(|t| t.s.clone()).collect::<Vec<_>>())?;
    let a = Matrix::from_rows(&probe.transitions.iter().map(|t| t.a.clone()).collect::<Vec<_>>())?;

    let mut r = rng::substream(config.seed, &[3]);
    let model_cfg = crate::worldmodel::WorldModelConfig { members: config.members, ..config.agent.model.clone() };
    let mut ens = DynamicsEnsemble::for_env(&env, model_cfg, &mut r)?;
    ens.train(&[&train], config.agent.model_pretrain_steps.max(1), &mut r)
        .map_err(|e| e.in_stage("dynamics ensemble"))?;
    let heads = ens.member_heads(&s, &a)?;
    let rd = env.state_dim;
    let rewards: Vec<Matrix> = heads.iter().map(|h| column(h.mean.iter_rows().map(|row| row[rd]).collect())).collect::<Result<_>>()?;
    let transitions = ens.member_next_means_batch(&s, &a)?;

    let mut values = Vec::with_capacity(config.members);
    let mut policies = Vec::with_capacity(config.members);
    for k in 0..config.members {
        let mut ar = rng::substream(config.seed, &[4, k as u64]);
        let mut agent = SacAgent::new(&env, config.agent.sac.clone(), &mut ar)?;
        for _ in 0..config.sac_steps {
            let batch: Batch = train.sample(config.agent.batch_size, &mut ar)?;
            agent.update(&batch, &mut ar).map_err(|e| e.in_stage("value/policy member"))?;
        }
        values.push(column(agent.q_mean(&s, &a)?)?);
        policies.push(agent.deterministic_actions(&s)?);
    }

    let uncertainties = [
        per_row_uncertainty(&rewards)?,
        per_row_uncertainty(&values)?,
        per_row_uncertainty(&transitions)?,
        per_row_uncertainty(&policies)?,
    ];
    let mut rho = [[1.0; 4]; 4];
    for i in 0..4 {
        for j in (i + 1)..4 {
            let v = stats::spearman_rho(&uncertainties[i], &uncertainties[j])?;
            rho[i][j] = v;
            rho[j][i] = v;
        }
    }
    Ok(RankResult { rho, uncertainties })
}

/// Results of [`noise_sweep`], one report per planning-noise value.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub epsilons: Vec<f64>,
    pub reports: Vec<OtoReport>,
}

pub fn epsilon_dir(out: &Path, eps: f64) -> std::path::PathBuf {
    out.join(format!("eps_{eps}"))
}

/// Runs the PTGOOD experiment once per noise value. Offline pretraining is
/// shared across noise values, which does not change any curve because
/// every stage draws from its own substream.
pub fn noise_sweep(base: &ExperimentConfig, grid: &[f64], out: &Path) -> Result<SweepResult> {
    let ExplorerConfig::Ptgood { planner, ceb } = &base.explorer else {
        return Err(Error::Config(format!("noise sweep needs the ptgood explorer, got {}", base.variant())));
    };
    if grid.is_empty() {
        return Err(Error::Config("noise grid is empty".into()));
    }
    for &eps in grid {
        PlannerConfig { epsilon: eps, ..planner.clone() }.validate()?;
    }
    let (env, offline) = prepare(base)?;
    let pretrained = base
        .seeds
        .iter()
        .map(|&seed| pretrain_seed(&env, &offline, &base.agent, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(grid.len());
    let mut rows = Vec::new();
    for &eps in grid {
        let cfg = ExperimentConfig {
            explorer: ExplorerConfig::Ptgood { planner: PlannerConfig { epsilon: eps, ..planner.clone() }, ceb: ceb.clone() },
            ..base.clone()
        };
        let mut logs: Vec<(u64, MetricLog)> = Vec::with_capacity(base.seeds.len());
        for (&seed, start) in base.seeds.iter().zip(&pretrained) {
            log::info!("noise sweep eps={eps} seed {seed}");
            logs.push((seed, finetune_seed(&cfg, &env, &offline, start.clone(), seed)?));
        }
        let report = write_report(&cfg, logs, &epsilon_dir(out, eps))?;
        for (seed, l) in &report.logs {
            let last = l.last().expect("curves start at step 0");
            rows.push(vec![eps.to_string(), seed.to_string(), last.step.to_string(), last.mean_return.to_string()]);
        }
        reports.push(report);
    }
    write_csv(&out.join("noise_sweep.csv"), &["epsilon", "seed", "final_step", "final_return"], &rows)?;
    Ok(SweepResult { epsilons: grid.to_vec(), reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalltimeConfig {
    /// `(width, depth)` pairs.
    pub grid: Vec<[usize; 2]>,
    /// Environment steps per repetition.
    pub steps: usize,
    pub repetitions: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for WalltimeConfig {
    fn default() -> Self {
        Self { grid: vec![[50, 3], [10, 5]], steps: 1, repetitions: 5, epsilon: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalltimeRow {
    pub width: usize,
    pub depth: usize,
    /// `noise_only` or `q_value`.
    pub variant: &'static str,
    pub seconds: Vec<f64>,
}

impl WalltimeRow {
    pub fn mean_seconds(&self) -> f64 {
        stats::mean(&self.seconds)
    }
}

/// Times rate-only planning against planning that also evaluates the
/// critic at every scored pair. Each repetition acts in the real
/// environment for `steps` steps from a seeded reset.
pub fn walltime_compare(
    config: &WalltimeConfig,
    env: &EnvSpec,
    agent: &SacAgent,
    ensemble: &DynamicsEnsemble,
    rate: &RateModel,
) -> Result<Vec<WalltimeRow>> {
    if config.grid.is_empty() || config.steps == 0 || config.repetitions == 0 {
        return Err(Error::Config("walltime needs a grid, steps and repetitions".into()));
    }
    if !ensemble.is_trained() {
        return Err(Error::State("walltime needs a trained dynamics ensemble".into()));
    }
    let q_rate = QAugmentedRate { inner: rate, agent };
    let mut rows = Vec::new();
    for &[width, depth] in &config.grid {
        let pc = PlannerConfig { width, depth, epsilon: config.epsilon, terminal_masking: false };
        pc.validate()?;
        for variant in ["noise_only", "q_value"] {
            let mut seconds = Vec::with_capacity(config.repetitions);
            for rep in 0..config.repetitions {
                let mut r = rng::substream(config.seed, &[width as u64, depth as u64, rep as u64]);
                let mut state = env.reset_with(&mut r);
                let t0 = Instant::now();
                for _ in 0..config.steps {
                    let a = if variant == "noise_only" {
                        planner::plan(agent, ensemble, rate, &state.obs, &pc, Some(env), &mut r)?
                    } else {
                        planner::plan(agent, ensemble, &q_rate, &state.obs, &pc, Some(env), &mut r)?
                    };
                    let out = env.step(&state, &a)?;
                    state = if out.done { env.reset_with(&mut r) } else { out.state };
                }
                seconds.push(t0.elapsed().as_secs_f64());
            }
            log::info!("walltime w={width} d={depth} {variant}: {:?}", seconds);
            rows.push(WalltimeRow { width, depth, variant, seconds });
        }
    }
    Ok(rows)
}

pub fn save_walltime_csv(rows: &[WalltimeRow], path: &Path) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.width.to_string(),
                r.depth.to_string(),
                r.variant.to_string(),
                r.seconds.len().to_string(),
                r.mean_seconds().to_string(),
                stats::sample_std(&r.seconds).to_string(),
            ]
        })
        .collect();
    write_csv(path, &["width", "depth", "variant", "repetitions", "mean_seconds", "std_seconds"], &body)
}

/// Largest fall of the eval return below its step-0 value within the first
/// `horizon` steps, relative to the step-0 magnitude.
pub fn relative_drop(log: &MetricLog, horizon: usize) -> Result<f64> {
    let rows = log.rows();
    let first = rows.first().ok_or_else(|| Error::Format("empty curve".into()))?;
    if first.step != 0 || first.mean_return == 0.0 {
        return Err(Error::Format("curve needs a nonzero step-0 return".into()));
    }
    let worst = rows
        .iter()
        .filter(|p| p.step > 0 && p.step <= horizon)
        .map(|p| p.mean_return)
        .fold(first.mean_return, f64::min);
    Ok((first.mean_return - worst) / first.mean_return.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{EvalPoint, SacConfig};
    use crate::ceb::CebConfig;
    use crate::harness::tests::{tiny_agent, tiny_experiment};
    use crate::harness::seed_csv_path;
    use crate::worldmodel::WorldModelConfig;

    #[test]
    fn rank_matrix_is_well_formed() {
        let cfg = RankConfig {
            train_size: 400,
            probe_size: 60,
            members: 3,
            sac_steps: 20,
            agent: tiny_agent(),
            ..RankConfig::default()
        };
        let res = uncertainty_rank_experiment(&cfg).unwrap();
        for i in 0..4 {
            assert_eq!(res.rho[i][i], 1.0);
            for j in 0..4 {
                assert!((-1.0..=1.0).contains(&res.rho[i][j]));
                assert!((res.rho[i][j] - res.rho[j][i]).abs() < 1e-12);
            }
        }
        assert!(res.uncertainties.iter().all(|u| u.len() == 60 && u.iter().all(|v| *v >= 0.0)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rank.csv");
        res.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.lines().nth(1).unwrap().ends_with(",1,agree"));
    }

    #[test]
    fn highlight_thresholds() {
        assert_eq!(RankResult::highlight(0.4), "agree");
        assert_eq!(RankResult::highlight(0.39), "");
        assert_eq!(RankResult::highlight(-0.4), "disagree");
    }

    fn tiny_ptgood() -> ExperimentConfig {
        let ceb = CebConfig { hidden: vec![8], latent_dim: 2, batch_size: 16, mixture_components: 2, em_iters: 20, ..CebConfig::new(0.01, 10) };
        let planner = PlannerConfig { width: 2, depth: 1, epsilon: 0.1, terminal_masking: false };
        ExperimentConfig { seeds: vec![0, 1], online_budget: 40, ..tiny_experiment(ExplorerConfig::Ptgood { planner, ceb }) }
    }

    #[test]
    fn sweep_writes_one_curve_per_epsilon_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let res = noise_sweep(&tiny_ptgood(), &[0.0, 0.3], dir.path()).unwrap();
        assert_eq!(res.reports.len(), 2);
        for eps in [0.0, 0.3] {
            for seed in [0, 1] {
                assert!(seed_csv_path(&epsilon_dir(dir.path(), eps), "ptgood", seed).is_file());
            }
        }
        let text = std::fs::read_to_string(dir.path().join("noise_sweep.csv")).unwrap();
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn sweep_rejects_other_explorers_and_empty_grids() {
        let dir = tempfile::tempdir().unwrap();
        assert!(noise_sweep(&tiny_experiment(ExplorerConfig::Naive), &[0.1], dir.path()).unwrap_err().is_config());
        assert!(noise_sweep(&tiny_ptgood(), &[], dir.path()).unwrap_err().is_config());
        assert!(noise_sweep(&tiny_ptgood(), &[-1.0], dir.path()).unwrap_err().is_config());
    }

    #[test]
    fn walltime_rows_cover_grid_and_variants() {
        let env = EnvSpec::by_name("pointmass").unwrap();
        let data = collect_random_dataset(&env, 300, 0).unwrap().to_buffer().unwrap();
        let mut r = rng::seeded(0);
        let agent = SacAgent::new(&env, SacConfig { actor_hidden: vec![8], critic_hidden: vec![8], ..Default::default() }, &mut r).unwrap();
        let mut ens = DynamicsEnsemble::for_env(&env, WorldModelConfig { members: 2, hidden: vec![8], ..Default::default() }, &mut r).unwrap();
        ens.train(&[&data], 5, &mut r).unwrap();
        let x = crate::ceb::state_action_rows(data.iter()).unwrap();
        let ceb = CebConfig { hidden: vec![8], latent_dim: 2, batch_size: 16, mixture_components: 2, ..CebConfig::new(0.01, 5) };
        let rate = RateModel::fit(&x, &ceb, &mut r).unwrap().0;
        let cfg = WalltimeConfig { grid: vec![[2, 1], [3, 2]], steps: 3, repetitions: 2, ..Default::default() };
        let rows = walltime_compare(&cfg, &env, &agent, &ens, &rate).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.seconds.len() == 2 && r.mean_seconds() >= 0.0));
        let dir = tempfile::tempdir().unwrap();
        save_walltime_csv(&rows, &dir.path().join("t.csv")).unwrap();
        let untrained = DynamicsEnsemble::for_env(&env, WorldModelConfig::default(), &mut r).unwrap();
        assert!(matches!(walltime_compare(&cfg, &env, &agent, &untrained, &rate), Err(Error::State(_))));
    }

    #[test]
    fn relative_drop_of_hand_curve() {
        let p = |step, ret| EvalPoint { step, mean_return: ret, returns: vec![ret], policy_entropy: 0.0, mean_q: 0.0, disagreement: 0.0 };
        let log = MetricLog::from_points(vec![p(0, -100.0), p(500, -130.0), p(1000, -90.0), p(1500, -500.0)]).unwrap();
        assert!((relative_drop(&log, 1000).unwrap() - 0.3).abs() < 1e-12);
        let up = MetricLog::from_points(vec![p(0, -100.0), p(500, -50.0)]).unwrap();
        assert_eq!(relative_drop(&up, 1000).unwrap(), 0.0);
    }
}
