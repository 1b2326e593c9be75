use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use ptgood::agent::{evaluate, SacAgent};
use ptgood::ceb::{state_action_rows, RateModel};
use ptgood::error::{Error, Result};
use ptgood::explorers::ExplorerConfig;
use ptgood::harness::experiments::{
    noise_sweep, save_walltime_csv, uncertainty_rank_experiment, walltime_compare, RankConfig, WalltimeConfig,
};
use ptgood::harness::{self, finetune_seed, prepare, pretrain_seed, run_oto, ExperimentConfig, Pretrained};
use ptgood::rng;
use ptgood::storage::save_dataset;
use ptgood::worldmodel::DynamicsEnsemble;

#[derive(Parser)]
#[command(name = "ptgood", version, about = "Offline-to-online RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Restrict to one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured offline dataset and save it as `dataset.ptgd`.
    GenData(Common),
    /// Offline pretraining; writes `agent.ptg` and `model.ptg`.
    Pretrain(Common),
    /// Online fine-tuning from the checkpoints in the output directory.
    Finetune(Common),
    /// Evaluate the saved agent.
    Eval(Common),
    /// Pretrain and fine-tune every seed; one CSV per seed plus a summary.
    ExpOto(Common),
    /// Uncertainty-rank correlation study.
    ExpRank(Common),
    /// Planning-noise sweep.
    ExpNoise(Common),
    /// Planner wall-clock comparison.
    ExpWalltime(Common),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseFile {
    experiment: ExperimentConfig,
    grid: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WalltimeFile {
    experiment: ExperimentConfig,
    #[serde(default)]
    walltime: WalltimeConfig,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn experiment(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn one_seed(c: &Common, cfg: &ExperimentConfig) -> u64 {
    c.seed.unwrap_or(cfg.seeds[0])
}

fn load_checkpoint(out: &Path) -> Result<Pretrained> {
    Ok(Pretrained {
        agent: SacAgent::load(&out.join("agent.ptg"))?,
        ensemble: DynamicsEnsemble::load(&out.join("model.ptg"))?,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = experiment(&c)?;
            let env = ptgood::envs::EnvSpec::by_name(&cfg.env)?;
            let ds = cfg.dataset.build(&env, &cfg.agent)?;
            std::fs::create_dir_all(&c.out)?;
            let path = c.out.join("dataset.ptgd");
            save_dataset(&path, &ds)?;
            println!("{} transitions -> {}", ds.len(), path.display());
        }
        Command::Pretrain(c) => {
            let cfg = experiment(&c)?;
            let (env, offline) = prepare(&cfg)?;
            let p = pretrain_seed(&env, &offline, &cfg.agent, one_seed(&c, &cfg))?;
            std::fs::create_dir_all(&c.out)?;
            p.agent.save(&c.out.join("agent.ptg"))?;
            p.ensemble.save(&c.out.join("model.ptg"))?;
            println!("checkpoints -> {}", c.out.display());
        }
        Command::Finetune(c) => {
            let cfg = experiment(&c)?;
            let seed = one_seed(&c, &cfg);
            let (env, offline) = prepare(&cfg)?;
            let log = finetune_seed(&cfg, &env, &offline, load_checkpoint(&c.out)?, seed)?;
            let path = harness::seed_csv_path(&c.out, cfg.variant(), seed);
            log.save(&path)?;
            println!("curve -> {}", path.display());
        }
        Command::Eval(c) => {
            let cfg = experiment(&c)?;
            let env = ptgood::envs::EnvSpec::by_name(&cfg.env)?;
            let p = load_checkpoint(&c.out)?;
            let mut r = rng::seeded(one_seed(&c, &cfg));
            let point = evaluate(&p.agent, Some(&p.ensemble), &env, cfg.agent.eval_episodes, 0, f64::NAN, &mut r)?;
            println!("{}", serde_json::to_string(&point)?);
        }
        Command::ExpOto(c) => {
            let cfg = experiment(&c)?;
            let report = run_oto(&cfg, &c.out)?;
            let s = &report.summary;
            println!("{} on {}: {:.2} ± {:.2} at step {}", s.variant, s.env, s.mean, s.std, s.final_step);
        }
        Command::ExpRank(c) => {
            let mut cfg: RankConfig = read_json(&c.config)?;
            if let Some(seed) = c.seed {
                cfg.seed = seed;
            }
            let res = uncertainty_rank_experiment(&cfg)?;
            let path = c.out.join("rank.csv");
            res.save_csv(&path)?;
            for row in res.rho {
                println!("{}", row.map(|v| format!("{v:+.3}")).join(" "));
            }
        }
        Command::ExpNoise(c) => {
            let mut file: NoiseFile = read_json(&c.config)?;
            if let Some(seed) = c.seed {
                file.experiment.seeds = vec![seed];
            }
            file.experiment.validate()?;
            let res = noise_sweep(&file.experiment, &file.grid, &c.out)?;
            for (eps, rep) in res.epsilons.iter().zip(&res.reports) {
                println!("eps {eps}: {:.2} ± {:.2}", rep.summary.mean, rep.summary.std);
            }
        }
        Command::ExpWalltime(c) => {
            let file: WalltimeFile = read_json(&c.config)?;
            let mut cfg = file.experiment;
            if let Some(seed) = c.seed {
                cfg.seeds = vec![seed];
            }
            cfg.validate()?;
            let ExplorerConfig::Ptgood { ceb, .. } = &cfg.explorer else {
                return Err(Error::Config("walltime needs the ptgood explorer for its density model".into()));
            };
            let seed = cfg.seeds[0];
            let (env, offline) = prepare(&cfg)?;
            let p = pretrain_seed(&env, &offline, &cfg.agent, seed)?;
            let x = state_action_rows(offline.iter())?;
            let (rate, _) = RateModel::fit(&x, ceb, &mut rng::substream(seed, &[9]))?;
            let rows = walltime_compare(&file.walltime, &env, &p.agent, &p.ensemble, &rate)?;
            std::fs::create_dir_all(&c.out)?;
            save_walltime_csv(&rows, &c.out.join("walltime.csv"))?;
            for r in &rows {
                println!("w={} d={} {}: {:.4}s", r.width, r.depth, r.variant, r.mean_seconds());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => {
            eprintln!("ptgood: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("ptgood: {e}");
            ExitCode::from(3)
        }
    }
}
