use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use bremen::bounds;
use bremen::config::ExperimentConfig;
use bremen::dataset::{synthesize_noisy_dataset, Dataset, NoiseScheme};
use bremen::dynamics::DynamicsEnsemble;
use bremen::env::{CountingEnv, EnvKind, EnvSpec};
use bremen::metrics;
use bremen::orchestrator;
use bremen::policy::GaussianMlpPolicy;

/// Deployment-efficient model-based RL experiments.
#[derive(Parser)]
#[command(name = "bremen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect real-environment transitions into a dataset file.
    Collect {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
        /// Sample actions from this policy checkpoint instead of uniformly.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a noisy behavior dataset from a policy checkpoint.
    Synth {
        #[arg(long)]
        env: String,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "gaussian1")]
        noise: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full deployment loop.
    Loop {
        /// Required unless --config sets it.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value = "desk")]
        profile: String,
        /// Optional key = value override file (must set env).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train offline from a fixed dataset, no environment interaction.
    Offline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a policy checkpoint with deterministic mean actions.
    Eval {
        #[arg(long)]
        env: String,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute the return-gap bound from a finished run's artifacts.
    CheckTheory {
        /// Run directory with bc.ckpt, ensemble.ckpt, dataset.brds.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 25)]
        trpo_iters: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
    },
    /// Plot one metrics scalar to SVG with deployment boundaries.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "eval_return")]
        key: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Default artifact root: --out beats BREMEN_DATA_DIR beats ./runs.
fn resolve_out(out: Option<PathBuf>, leaf: &str) -> PathBuf {
    match out {
        Some(p) => p,
        None => {
            let root = std::env::var("BREMEN_DATA_DIR").unwrap_or_else(|_| "runs".to_string());
            Path::new(&root).join(leaf)
        }
    }
}

fn load_config(
    profile: &str,
    config: Option<&Path>,
    env: Option<&str>,
    seed: Option<u64>,
) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => {
            let env = env.ok_or_else(|| anyhow::anyhow!("--env is required without --config"))?;
            ExperimentConfig::profile(profile, EnvKind::from_id(env)?)?
        }
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Collect { env, seed, count, horizon, policy, out } => {
            let spec = EnvSpec::new(EnvKind::from_id(&env)?, horizon);
            let mut cenv = CountingEnv::new(spec);
            let policy = policy.map(|p| GaussianMlpPolicy::load(&p)).transpose()?;
            let d = orchestrator::collect_batch(&mut cenv, policy.as_ref(), count, 1, seed)?;
            let out = resolve_out(out, "dataset.brds");
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            d.save(&out)?;
            println!(
                "collected {} transitions from {} ({} real steps) -> {}",
                d.len(),
                env,
                cenv.step_count(),
                out.display()
            );
        }
        Command::Synth { env, policy, noise, seed, count, horizon, out } => {
            let spec = EnvSpec::new(EnvKind::from_id(&env)?, horizon);
            let behavior = GaussianMlpPolicy::load(&policy)?;
            let scheme = NoiseScheme::from_id(&noise)?;
            let d = synthesize_noisy_dataset(&spec, &behavior, scheme, count, seed)?;
            let out = resolve_out(out, "dataset.brds");
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            d.save(&out)?;
            println!(
                "synthesized {} transitions ({}) -> {}",
                d.len(),
                scheme.id(),
                out.display()
            );
        }
        Command::Loop { env, profile, config, seed, out } => {
            let cfg = load_config(&profile, config.as_deref(), env.as_deref(), seed)?;
            let out = resolve_out(out, &format!("{}-{}", cfg.env.id(), cfg.seed));
            let result = orchestrator::run_deployment_loop(&cfg, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&result.summary)?);
            println!("artifacts in {}", out.display());
        }
        Command::Offline { dataset, profile, config, seed, out } => {
            let d = Dataset::load(&dataset)?;
            let cfg = match config {
                Some(_) => load_config(&profile, config.as_deref(), None, seed)?,
                None => {
                    let mut cfg = ExperimentConfig::profile(&profile, EnvKind::from_id(d.env_id())?)?;
                    if let Some(seed) = seed {
                        cfg.seed = seed;
                    }
                    cfg
                }
            };
            let out = resolve_out(out, &format!("{}-offline-{}", cfg.env.id(), cfg.seed));
            let result = orchestrator::run_offline(&cfg, &d, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&result.summary)?);
            println!("artifacts in {}", out.display());
        }
        Command::Eval { env, policy, episodes, horizon, gamma, seed } => {
            let spec = EnvSpec::new(EnvKind::from_id(&env)?, horizon);
            let policy = GaussianMlpPolicy::load(&policy)?;
            let (ret, disc) = orchestrator::evaluate_policy(&spec, &policy, episodes, gamma, seed)?;
            println!(
                "{}",
                serde_json::json!({
                    "env": env,
                    "episodes": episodes,
                    "mean_return": ret,
                    "mean_return_discounted": disc,
                })
            );
        }
        Command::CheckTheory { run, trpo_iters, delta, gamma } => {
            let bc = bremen::nn::MlpParams::load(&run.join("bc.ckpt"))?;
            let ens = DynamicsEnsemble::load(&run.join("ensemble.ckpt"))?;
            let d = Dataset::load(&run.join("dataset.brds"))?;
            let eps = bounds::estimate_loss_epsilons(&bc, &ens, &d)?;
            let r_max = d.transitions().iter().map(|t| t.r.abs()).fold(0.0f64, f64::max);

            // spot-check the Pinsker step on a spread of Gaussian pairs
            let mut violations = 0;
            for i in 0..100 {
                let m2 = -2.0 + 0.04 * i as f64;
                let s2 = 0.2 + 0.01 * i as f64;
                let (_, _, holds) = bounds::pinsker_tv_check(0.0, 1.0, m2, s2);
                if !holds {
                    violations += 1;
                }
            }
            let report = bounds::bound_report(&eps, trpo_iters, delta, gamma, r_max, 0.0, violations)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Plot { metrics: metrics_path, key, out } => {
            let rows = metrics::read_jsonl(&metrics_path)?;
            metrics::plot_svg(&rows, &key, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
