//! Experiment configuration: named profiles plus a flat `key = value`
//! override file. Unknown keys are rejected by name so typos cannot
//! silently fall back to defaults.

use std::path::Path;

use crate::dataset::NoiseScheme;
use crate::dynamics::DynamicsConfig;
use crate::env::EnvKind;
use crate::error::{BremenError, Result};
use crate::policy::BcConfig;
use crate::trpo::TrpoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Mode {
    /// Deployment loop with behavior-cloned re-initialization.
    Bremen,
    /// Same loop but the policy restarts from a random init every
    /// deployment (no implicit anchor to the behavior data).
    MetrpoOffline,
    /// Behavior-cloned init plus an explicit per-state KL penalty toward
    /// the cloned behavior policy.
    ExplicitKl,
}

impl Mode {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "bremen" => Ok(Mode::Bremen),
            "metrpo_offline" => Ok(Mode::MetrpoOffline),
            "explicit_kl" => Ok(Mode::ExplicitKl),
            other => Err(BremenError::Config(format!(
                "unknown mode '{other}' (expected bremen, metrpo_offline, explicit_kl)"
            ))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Mode::Bremen => "bremen",
            Mode::MetrpoOffline => "metrpo_offline",
            Mode::ExplicitKl => "explicit_kl",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub horizon: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Number of data deployments (I).
    pub deployments: usize,
    /// Transitions collected per deployment (B).
    pub batch_size: usize,
    pub noise: NoiseScheme,
    pub dynamics: DynamicsConfig,
    pub bc: BcConfig,
    /// Clone from everything collected so far instead of the latest batch.
    pub bc_on_all: bool,
    pub sigma_init: f64,
    pub policy_hidden: Vec<usize>,
    pub trpo: TrpoConfig,
    pub gamma: f64,
    pub lambda: f64,
    /// Trust-region iterations per deployment (T).
    pub trpo_iters: usize,
    /// Imagined rollout length per branch.
    pub rollout_length: usize,
    /// Minimum imagined steps per trust-region iteration.
    pub policy_batch: usize,
    /// Weight of the explicit KL penalty (ExplicitKl mode only).
    pub alpha: f64,
    pub eval_episodes: usize,
}

impl ExperimentConfig {
    /// Small profile sized for a single workstation core.
    pub fn desk(env: EnvKind) -> Self {
        let horizon = match env {
            EnvKind::PointMassLqr => 100,
            EnvKind::Pendulum => 100,
            EnvKind::GateWalker => 200,
        };
        ExperimentConfig {
            env,
            horizon,
            seed: 0,
            mode: Mode::Bremen,
            deployments: 3,
            batch_size: 1000,
            noise: NoiseScheme::Gaussian1,
            dynamics: DynamicsConfig {
                k: 3,
                hidden: vec![64, 64],
                learning_rate: 0.001,
                max_epochs: 60,
                patience: 5,
                minibatch: 256,
                seed: 0,
            },
            bc: BcConfig {
                hidden: vec![32, 32],
                learning_rate: 0.001,
                max_epochs: 120,
                patience: 10,
                minibatch: 256,
                seed: 0,
            },
            bc_on_all: false,
            sigma_init: 0.2,
            policy_hidden: vec![32, 32],
            trpo: TrpoConfig {
                delta: 0.05,
                cg_iters: 10,
                cg_damping: 0.1,
                backtrack_coeff: 0.8,
                max_backtracks: 10,
                fvp_subsample: 500,
            },
            gamma: 0.995,
            lambda: 0.97,
            trpo_iters: 150,
            rollout_length: 100,
            policy_batch: 3000,
            alpha: 0.3,
            eval_episodes: 40,
        }
    }

    /// Full-scale profile with published hyperparameters; far too slow for
    /// tests, provided for completeness.
    pub fn paper(env: EnvKind) -> Self {
        let mut cfg = ExperimentConfig::desk(env);
        cfg.horizon = 1000;
        cfg.deployments = 5;
        cfg.batch_size = 200_000;
        cfg.dynamics = DynamicsConfig {
            k: 5,
            hidden: vec![1024, 1024],
            learning_rate: 0.001,
            max_epochs: 100,
            patience: 5,
            minibatch: 1024,
            seed: 0,
        };
        cfg.bc = BcConfig {
            hidden: vec![200, 200],
            learning_rate: 0.0005,
            max_epochs: 200,
            patience: 20,
            minibatch: 256,
            seed: 0,
        };
        cfg.policy_hidden = vec![200, 200];
        cfg.sigma_init = 0.1;
        cfg.trpo.delta = 0.05;
        cfg.trpo.fvp_subsample = 5000;
        cfg.gamma = 0.99;
        cfg.lambda = 0.95;
        cfg.trpo_iters = 400;
        cfg.rollout_length = 250;
        cfg.policy_batch = 50_000;
        cfg
    }

    pub fn profile(name: &str, env: EnvKind) -> Result<Self> {
        match name {
            "desk" => Ok(ExperimentConfig::desk(env)),
            "paper" => Ok(ExperimentConfig::paper(env)),
            other => Err(BremenError::Config(format!(
                "unknown profile '{other}' (expected desk or paper)"
            ))),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    /// Parses `key = value` lines. `env` must come first so the right
    /// profile defaults apply; `profile` (optional, default desk) selects
    /// the base; every other line overrides one field.
    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                BremenError::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let env_id = pairs
            .iter()
            .find(|(k, _)| k == "env")
            .map(|(_, v)| v.clone())
            .ok_or_else(|| BremenError::Config("config file must set 'env'".into()))?;
        let env = EnvKind::from_id(&env_id)?;
        let profile = pairs
            .iter()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "desk".to_string());
        let mut cfg = ExperimentConfig::profile(&profile, env)?;
        for (k, v) in &pairs {
            if k == "env" || k == "profile" {
                continue;
            }
            cfg.apply_kv(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |key: &str, value: &str| {
            BremenError::Config(format!("invalid value '{value}' for key '{key}'"))
        };
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "seed" => self.seed = parse!(u64),
            "horizon" => self.horizon = parse!(usize),
            "mode" => self.mode = Mode::from_id(value)?,
            "deployments" => self.deployments = parse!(usize),
            "batch_size" => self.batch_size = parse!(usize),
            "noise" => self.noise = NoiseScheme::from_id(value)?,
            "dynamics.k" => self.dynamics.k = parse!(usize),
            "dynamics.hidden" => self.dynamics.hidden = parse_dims(key, value)?,
            "dynamics.learning_rate" => self.dynamics.learning_rate = parse!(f64),
            "dynamics.max_epochs" => self.dynamics.max_epochs = parse!(usize),
            "dynamics.patience" => self.dynamics.patience = parse!(usize),
            "dynamics.minibatch" => self.dynamics.minibatch = parse!(usize),
            "bc.hidden" => self.bc.hidden = parse_dims(key, value)?,
            "bc.learning_rate" => self.bc.learning_rate = parse!(f64),
            "bc.max_epochs" => self.bc.max_epochs = parse!(usize),
            "bc.patience" => self.bc.patience = parse!(usize),
            "bc.minibatch" => self.bc.minibatch = parse!(usize),
            "bc_on_all" => self.bc_on_all = parse!(bool),
            "sigma_init" => self.sigma_init = parse!(f64),
            "policy.hidden" => self.policy_hidden = parse_dims(key, value)?,
            "trpo.delta" => self.trpo.delta = parse!(f64),
            "trpo.cg_iters" => self.trpo.cg_iters = parse!(usize),
            "trpo.cg_damping" => self.trpo.cg_damping = parse!(f64),
            "trpo.backtrack_coeff" => self.trpo.backtrack_coeff = parse!(f64),
            "trpo.max_backtracks" => self.trpo.max_backtracks = parse!(usize),
            "trpo.fvp_subsample" => self.trpo.fvp_subsample = parse!(usize),
            "gamma" => self.gamma = parse!(f64),
            "lambda" => self.lambda = parse!(f64),
            "trpo_iters" => self.trpo_iters = parse!(usize),
            "rollout_length" => self.rollout_length = parse!(usize),
            "policy_batch" => self.policy_batch = parse!(usize),
            "alpha" => self.alpha = parse!(f64),
            "eval_episodes" => self.eval_episodes = parse!(usize),
            other => {
                return Err(BremenError::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, why: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(BremenError::Config(format!("{key}: {why}")))
            }
        };
        check(self.horizon > 0, "horizon", "must be >= 1")?;
        check(self.deployments > 0, "deployments", "must be >= 1")?;
        check(self.batch_size >= 10, "batch_size", "must be >= 10")?;
        check(self.dynamics.k > 0, "dynamics.k", "must be >= 1")?;
        check(self.sigma_init > 0.0, "sigma_init", "must be > 0")?;
        check(
            self.trpo.delta > 0.0 && self.trpo.delta < 1.0,
            "trpo.delta",
            "must be in (0, 1)",
        )?;
        check(
            self.gamma > 0.0 && self.gamma < 1.0,
            "gamma",
            "must be in (0, 1)",
        )?;
        check(
            (0.0..=1.0).contains(&self.lambda),
            "lambda",
            "must be in [0, 1]",
        )?;
        check(self.trpo_iters > 0, "trpo_iters", "must be >= 1")?;
        check(self.rollout_length > 0, "rollout_length", "must be >= 1")?;
        check(self.policy_batch > 0, "policy_batch", "must be >= 1")?;
        check(self.alpha >= 0.0, "alpha", "must be >= 0")?;
        check(self.eval_episodes > 0, "eval_episodes", "must be >= 1")?;
        Ok(())
    }

    /// Summary echoed into run artifacts.
    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "env": self.env.id(),
            "horizon": self.horizon,
            "seed": self.seed,
            "mode": self.mode.id(),
            "deployments": self.deployments,
            "batch_size": self.batch_size,
            "noise": self.noise.id(),
            "dynamics": {
                "k": self.dynamics.k,
                "hidden": self.dynamics.hidden,
                "learning_rate": self.dynamics.learning_rate,
                "max_epochs": self.dynamics.max_epochs,
                "patience": self.dynamics.patience,
                "minibatch": self.dynamics.minibatch,
            },
            "bc": {
                "hidden": self.bc.hidden,
                "learning_rate": self.bc.learning_rate,
                "max_epochs": self.bc.max_epochs,
                "patience": self.bc.patience,
                "minibatch": self.bc.minibatch,
            },
            "bc_on_all": self.bc_on_all,
            "sigma_init": self.sigma_init,
            "policy_hidden": self.policy_hidden,
            "trpo": {
                "delta": self.trpo.delta,
                "cg_iters": self.trpo.cg_iters,
                "cg_damping": self.trpo.cg_damping,
                "backtrack_coeff": self.trpo.backtrack_coeff,
                "max_backtracks": self.trpo.max_backtracks,
                "fvp_subsample": self.trpo.fvp_subsample,
            },
            "gamma": self.gamma,
            "lambda": self.lambda,
            "trpo_iters": self.trpo_iters,
            "rollout_length": self.rollout_length,
            "policy_batch": self.policy_batch,
            "alpha": self.alpha,
            "eval_episodes": self.eval_episodes,
        })
    }
}

fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| BremenError::Config(format!("invalid value '{value}' for key '{key}'")))
        })
        .collect()
}
