//! Experiment drivers, statistics and the CSV files they emit.
//!
//! Every driver derives its random streams from the per-seed base, so a
//! config plus a seed fully determines the output files.

pub mod experiments;
mod metrics;
pub mod stats;

pub use metrics::MetricLog;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{offline_pretrain, online_finetune, AgentConfig, SacAgent};
use crate::envs::{
    collect_expert_dataset, collect_medium_replay, collect_random_dataset, EnvSpec, MediumReplayConfig,
};
use crate::error::{Error, Result};
use crate::explorers::{build_explorer, Explorer, ExplorerConfig};
use crate::rng;
use crate::storage::{load_dataset, Dataset, ReplayBuffer};
use crate::worldmodel::DynamicsEnsemble;

// Substream keys under a seed.
const INIT: u64 = 1;
const PRETRAIN: u64 = 2;
const EXPLORER: u64 = 3;
const FINETUNE: u64 = 4;
const EXPLORER_PRETRAIN: u64 = 5;

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_budget() -> usize {
    10_000
}
fn default_eval_every() -> usize {
    1_000
}
fn default_expert_noise() -> f64 {
    0.1
}
fn default_step_cap() -> usize {
    20_000
}

/// Where the offline data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Random {
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    Expert {
        size: usize,
        #[serde(default = "default_expert_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    MediumReplay {
        threshold: f64,
        #[serde(default = "default_step_cap")]
        step_cap: usize,
        #[serde(default)]
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Random { size, .. } | DatasetConfig::Expert { size, .. } if *size == 0 => {
                Err(Error::Config("dataset size must be positive".into()))
            }
            DatasetConfig::File { path } if !path.is_file() => {
                Err(Error::Config(format!("dataset file {} does not exist", path.display())))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self, env: &EnvSpec, agent: &AgentConfig) -> Result<Dataset> {
        self.validate()?;
        let ds = match self {
            DatasetConfig::Random { size, seed } => collect_random_dataset(env, *size, *seed)?,
            DatasetConfig::Expert { size, noise, seed } => collect_expert_dataset(env, *size, *noise, *seed)?,
            DatasetConfig::MediumReplay { threshold, step_cap, seed } => {
                let cfg = MediumReplayConfig {
                    step_cap: *step_cap,
                    agent: agent.clone(),
                    ..MediumReplayConfig::new(*threshold, *seed)
                };
                collect_medium_replay(env, &cfg)?
            }
            DatasetConfig::File { path } => load_dataset(path)?,
        };
        if ds.env != env.name || ds.state_dim != env.state_dim || ds.action_dim != env.action_dim {
            return Err(Error::Config(format!(
                "dataset is for {} ({}+{} dims), experiment env is {}",
                ds.env, ds.state_dim, ds.action_dim, env.name
            )));
        }
        Ok(ds)
    }
}

/// One offline-to-online experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    pub dataset: DatasetConfig,
    pub explorer: ExplorerConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Online environment steps per seed.
    #[serde(default = "default_budget")]
    pub online_budget: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub agent: AgentConfig,
}

impl ExperimentConfig {
    pub fn new(env: &str, dataset: DatasetConfig, explorer: ExplorerConfig) -> Self {
        Self {
            env: env.into(),
            dataset,
            explorer,
            seeds: default_seeds(),
            online_budget: default_budget(),
            eval_every: default_eval_every(),
            agent: AgentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        EnvSpec::by_name(&self.env)?;
        self.dataset.validate()?;
        self.explorer.validate()?;
        self.agent.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.online_budget == 0 || self.eval_every == 0 {
            return Err(Error::Config("online_budget and eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn variant(&self) -> &'static str {
        self.explorer.name()
    }
}

/// Base agent and world model at the start of online training.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub agent: SacAgent,
    pub ensemble: DynamicsEnsemble,
}

/// Freshly initialized components for `seed`.
pub fn fresh_components(env: &EnvSpec, config: &AgentConfig, seed: u64) -> Result<Pretrained> {
    let mut r = rng::substream(seed, &[INIT]);
    let agent = SacAgent::new(env, config.sac.clone(), &mut r)?;
    let ensemble = DynamicsEnsemble::for_env(env, config.model.clone(), &mut r)?;
    Ok(Pretrained { agent, ensemble })
}

/// Fresh components trained offline on `offline`.
pub fn pretrain_seed(env: &EnvSpec, offline: &ReplayBuffer, config: &AgentConfig, seed: u64) -> Result<Pretrained> {
    let mut p = fresh_components(env, config, seed)?;
    let mut r = rng::substream(seed, &[PRETRAIN]);
    offline_pretrain(&mut p.agent, &mut p.ensemble, offline, env, config, &mut r)
        .map_err(|e| e.in_stage("offline pretraining"))?;
    Ok(p)
}

fn make_explorer(config: &ExperimentConfig, env: &EnvSpec, agent: &SacAgent, seed: u64) -> Result<Box<dyn Explorer>> {
    build_explorer(&config.explorer, env, agent, &mut rng::substream(seed, &[EXPLORER]))
}

fn finetune_with(
    config: &ExperimentConfig,
    env: &EnvSpec,
    offline: &ReplayBuffer,
    mut explorer: Box<dyn Explorer>,
    start: Pretrained,
    seed: u64,
) -> Result<MetricLog> {
    let Pretrained { mut agent, mut ensemble } = start;
    explorer
        .pretrain(&agent, offline, env, &mut rng::substream(seed, &[EXPLORER_PRETRAIN]))
        .map_err(|e| e.in_stage("explorer pretraining"))?;
    // Untouched by the explorer, so every variant of a seed is evaluated from
    // the same start states.
    let mut r = rng::substream(seed, &[FINETUNE]);
    let curve = online_finetune(
        &mut agent,
        &mut ensemble,
        explorer.as_mut(),
        env,
        offline,
        config.online_budget,
        config.eval_every,
        &config.agent,
        &mut r,
    )
    .map_err(|e| e.in_stage("online fine-tuning"))?;
    MetricLog::from_points(curve)
}

/// Online phase from already pretrained components. Gives the same curve
/// as [`run_seed`] when `start` came from [`pretrain_seed`] with this seed.
pub fn finetune_seed(
    config: &ExperimentConfig,
    env: &EnvSpec,
    offline: &ReplayBuffer,
    start: Pretrained,
    seed: u64,
) -> Result<MetricLog> {
    let explorer = make_explorer(config, env, &start.agent, seed)?;
    finetune_with(config, env, offline, explorer, start, seed)
}

/// Offline pretraining (unless the explorer opts out) then fine-tuning.
pub fn run_seed(config: &ExperimentConfig, env: &EnvSpec, offline: &ReplayBuffer, seed: u64) -> Result<MetricLog> {
    let fresh = fresh_components(env, &config.agent, seed)?;
    let explorer = make_explorer(config, env, &fresh.agent, seed)?;
    let start = if explorer.skips_offline_pretraining() {
        fresh
    } else {
        pretrain_seed(env, offline, &config.agent, seed)?
    };
    finetune_with(config, env, offline, explorer, start, seed)
}

/// Final-step statistics across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub variant: String,
    pub env: String,
    pub final_step: usize,
    pub finals: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn from_logs(variant: &str, env: &str, logs: &[(u64, MetricLog)]) -> Result<Self> {
        let lasts: Vec<_> = logs
            .iter()
            .map(|(seed, l)| l.last().ok_or_else(|| Error::Format(format!("seed {seed}: empty curve"))))
            .collect::<Result<_>>()?;
        let final_step = lasts.first().map_or(0, |p| p.step);
        if lasts.iter().any(|p| p.step != final_step) {
            return Err(Error::Format("seeds end at different steps".into()));
        }
        let finals: Vec<f64> = lasts.iter().map(|p| p.mean_return).collect();
        Ok(Self {
            variant: variant.into(),
            env: env.into(),
            final_step,
            mean: stats::mean(&finals),
            std: stats::sample_std(&finals),
            finals,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["variant", "env", "n_seeds", "final_step", "mean", "std"]).map_err(err)?;
        w.write_record([
            self.variant.clone(),
            self.env.clone(),
            self.finals.len().to_string(),
            self.final_step.to_string(),
            self.mean.to_string(),
            self.std.to_string(),
        ])
        .map_err(err)?;
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

/// Highest-mean variant against the runner-up.
#[derive(Debug, Clone, PartialEq)]
pub struct BestComparison {
    pub best: String,
    pub runner_up: String,
    pub welch: stats::WelchResult,
    /// Welch two-sided `p < alpha`.
    pub significant: bool,
}

/// Picks the variant with the highest mean final return and tests it
/// against the second highest. Ties keep the earlier summary.
pub fn compare_best(summaries: &[Summary], alpha: f64) -> Result<BestComparison> {
    if summaries.len() < 2 {
        return Err(Error::Stat(format!("need at least two variants, got {}", summaries.len())));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("significance level must be in (0, 1), got {alpha}")));
    }
    let mut order: Vec<usize> = (0..summaries.len()).collect();
    order.sort_by(|&a, &b| summaries[b].mean.total_cmp(&summaries[a].mean).then(a.cmp(&b)));
    let (best, second) = (&summaries[order[0]], &summaries[order[1]]);
    let welch = stats::welch_t(&best.finals, &second.finals)?;
    Ok(BestComparison {
        best: best.variant.clone(),
        runner_up: second.variant.clone(),
        significant: welch.p < alpha,
        welch,
    })
}

#[derive(Debug, Clone)]
pub struct OtoReport {
    pub logs: Vec<(u64, MetricLog)>,
    pub summary: Summary,
}

pub fn seed_csv_path(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join(format!("{variant}_seed{seed}.csv"))
}

pub fn summary_csv_path(out: &Path, variant: &str) -> PathBuf {
    out.join(format!("{variant}_summary.csv"))
}

/// Environment and offline buffer described by `config`.
pub fn prepare(config: &ExperimentConfig) -> Result<(EnvSpec, ReplayBuffer)> {
    config.validate()?;
    let env = EnvSpec::by_name(&config.env)?;
    let ds = config.dataset.build(&env, &config.agent).map_err(|e| e.in_stage("dataset"))?;
    Ok((env, ds.to_buffer()?))
}

/// Writes one curve per seed plus the summary row into `out`.
pub fn write_report(config: &ExperimentConfig, logs: Vec<(u64, MetricLog)>, out: &Path) -> Result<OtoReport> {
    std::fs::create_dir_all(out)?;
    let variant = config.variant();
    for (seed, log) in &logs {
        log.save(&seed_csv_path(out, variant, *seed))?;
    }
    let summary = Summary::from_logs(variant, &config.env, &logs)?;
    std::fs::write(summary_csv_path(out, variant), summary.to_csv()?)?;
    Ok(OtoReport { logs, summary })
}

/// Offline pretraining plus online fine-tuning for every seed.
pub fn run_oto(config: &ExperimentConfig, out: &Path) -> Result<OtoReport> {
    let (env, offline) = prepare(config)?;
    let mut logs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        log::info!("{} seed {seed}", config.variant());
        logs.push((seed, run_seed(config, &env, &offline, seed)?));
    }
    write_report(config, logs, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::SacConfig;
    use crate::worldmodel::WorldModelConfig;

    pub(crate) fn tiny_agent() -> AgentConfig {
        AgentConfig {
            sac: SacConfig { actor_hidden: vec![16], critic_hidden: vec![16], ..SacConfig::default() },
            model: WorldModelConfig { members: 2, hidden: vec![16], batch_size: 32, train_steps: 5, ..Default::default() },
            model_train_freq: 25,
            imagination_freq: 25,
            rollout_starts: 20,
            batch_size: 12,
            pretrain_steps: 20,
            model_pretrain_steps: 10,
            eval_episodes: 1,
            ..AgentConfig::default()
        }
    }

    pub(crate) fn tiny_experiment(explorer: ExplorerConfig) -> ExperimentConfig {
        ExperimentConfig {
            seeds: vec![0, 1],
            online_budget: 60,
            eval_every: 20,
            agent: tiny_agent(),
            ..ExperimentConfig::new("pointmass", DatasetConfig::Random { size: 300, seed: 0 }, explorer)
        }
    }

    fn summary(variant: &str, finals: &[f64]) -> Summary {
        Summary {
            variant: variant.into(),
            env: "pointmass".into(),
            final_step: 100,
            finals: finals.to_vec(),
            mean: stats::mean(finals),
            std: stats::sample_std(finals),
        }
    }

    #[test]
    fn best_is_tested_against_runner_up() {
        let s = [
            summary("naive", &[-400.0, -410.0, -395.0]),
            summary("ptgood", &[-300.0, -305.0, -298.0]),
            summary("rnd", &[-320.0, -330.0, -310.0]),
        ];
        let c = compare_best(&s, 0.05).unwrap();
        assert_eq!((c.best.as_str(), c.runner_up.as_str()), ("ptgood", "rnd"));
        assert_eq!(c.welch, stats::welch_t(&s[1].finals, &s[2].finals).unwrap());
        assert_eq!(c.significant, c.welch.p < 0.05);
        assert!(matches!(compare_best(&s[..1], 0.05), Err(Error::Stat(_))));
        assert!(matches!(compare_best(&s, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_rejects_unknown_keys_and_bad_values() {
        let ok = r#"{"env": "pointmass", "dataset": {"recipe": "random", "size": 100}, "explorer": {"kind": "naive"}}"#;
        let c = ExperimentConfig::from_json(ok).unwrap();
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.online_budget, 10_000);
        let typo = r#"{"env": "pointmass", "dataset": {"recipe": "random", "size": 100}, "explorer": {"kind": "naive"}, "seed": [1]}"#;
        assert!(ExperimentConfig::from_json(typo).unwrap_err().is_config());
        let nested = r#"{"env": "pointmass", "dataset": {"recipe": "random", "size": 100}, "explorer": {"kind": "naive"}, "agent": {"horizn": 2}}"#;
        assert!(ExperimentConfig::from_json(nested).unwrap_err().is_config());
        let partial = r#"{"env": "pointmass", "dataset": {"recipe": "random", "size": 100}, "explorer": {"kind": "naive"}, "agent": {"horizon": 2}}"#;
        assert_eq!(ExperimentConfig::from_json(partial).unwrap().agent.horizon, 2);
        let no_seeds = r#"{"env": "pointmass", "dataset": {"recipe": "random", "size": 100}, "explorer": {"kind": "naive"}, "seeds": []}"#;
        assert!(ExperimentConfig::from_json(no_seeds).unwrap_err().is_config());
        let missing = r#"{"env": "pointmass", "dataset": {"recipe": "file", "path": "/nonexistent/x.ptgd"}, "explorer": {"kind": "naive"}}"#;
        assert!(ExperimentConfig::from_json(missing).unwrap_err().is_config());
        let env = r#"{"env": "hopper", "dataset": {"recipe": "random", "size": 100}, "explorer": {"kind": "naive"}}"#;
        assert!(ExperimentConfig::from_json(env).unwrap_err().is_config());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = tiny_experiment(ExplorerConfig::Rnd { lambda: 2.0, rnd: Default::default() });
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn dataset_env_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pend.ptgd");
        let ds = collect_random_dataset(&EnvSpec::by_name("pendulum").unwrap(), 10, 0).unwrap();
        crate::storage::save_dataset(&path, &ds).unwrap();
        let cfg = ExperimentConfig::new("pointmass", DatasetConfig::File { path }, ExplorerConfig::Naive);
        assert!(prepare(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn run_oto_writes_consistent_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment(ExplorerConfig::Naive);
        let report = run_oto(&cfg, dir.path()).unwrap();
        let mut finals = Vec::new();
        for seed in [0, 1] {
            let log = MetricLog::load(&seed_csv_path(dir.path(), "naive", seed)).unwrap();
            let steps: Vec<usize> = log.rows().iter().map(|p| p.step).collect();
            assert_eq!(steps, vec![0, 20, 40, 60]);
            finals.push(log.last().unwrap().mean_return);
        }
        let text = std::fs::read_to_string(summary_csv_path(dir.path(), "naive")).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let row = rdr.records().next().unwrap().unwrap();
        let mean: f64 = row[4].parse().unwrap();
        let std: f64 = row[5].parse().unwrap();
        assert!((mean - stats::mean(&finals)).abs() < 1e-9);
        assert!((std - stats::sample_std(&finals)).abs() < 1e-9);
        assert_eq!(report.summary.finals, finals);
    }

    #[test]
    fn shared_pretraining_matches_run_seed() {
        let cfg = tiny_experiment(ExplorerConfig::Naive);
        let (env, offline) = prepare(&cfg).unwrap();
        let direct = run_seed(&cfg, &env, &offline, 3).unwrap();
        let pre = pretrain_seed(&env, &offline, &cfg.agent, 3).unwrap();
        let shared = finetune_seed(&cfg, &env, &offline, pre, 3).unwrap();
        assert_eq!(shared.to_csv().unwrap(), direct.to_csv().unwrap());
    }

    #[test]
    fn no_pretrain_starts_from_fresh_agent() {
        let cfg = ExperimentConfig { online_budget: 20, ..tiny_experiment(ExplorerConfig::NoPretrain) };
        let (env, offline) = prepare(&cfg).unwrap();
        let log = run_seed(&cfg, &env, &offline, 0).unwrap();
        let fresh = fresh_components(&env, &cfg.agent, 0).unwrap();
        let mut eval_cfg_rng = rng::substream(0, &[FINETUNE]);
        let eval_seed = rng::fork(&mut eval_cfg_rng);
        let p0 = crate::agent::evaluate(&fresh.agent, None, &env, 1, 0, f64::NAN, &mut rng::seeded(eval_seed)).unwrap();
        assert_eq!(log.rows()[0].mean_return, p0.mean_return);
    }
}
