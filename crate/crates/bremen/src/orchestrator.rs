//! End-to-end training drivers: the deployment loop (collect, fit models,
//! clone behavior, trust-region updates on imagination) and the offline
//! single-batch variant, plus deterministic policy evaluation and the run
//! artifacts written for each experiment.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bounds::{self, BoundReport};
use crate::config::{ExperimentConfig, Mode};
use crate::dataset::{Dataset, Transition};
use crate::dynamics::{self, DynamicsEnsemble};
use crate::env::{CountingEnv, EnvSpec};
use crate::error::{BremenError, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::nn::MlpParams;
use crate::policy::{behavior_clone, init_target_policy, GaussianMlpPolicy};
use crate::trpo::{self, StepData};

#[derive(Debug, Clone, serde::Serialize)]
pub struct DeploymentReport {
    pub deployment: usize,
    /// Real-environment transitions collected in this deployment.
    pub collected: usize,
    /// Cumulative real steps after this deployment (audited against i * B).
    pub env_steps_cumulative: u64,
    /// Hash of the policy that collected this deployment's data
    /// (None for the initial random-action deployment).
    pub deployed_policy_hash: Option<u64>,
    /// Hash of the policy after this deployment's updates.
    pub trained_policy_hash: u64,
    pub bc_val_mse: f64,
    pub dynamics_val_mse: Vec<f64>,
    pub accepted_iters: usize,
    pub final_mean_kl: f64,
    /// Mean KL from the deployed (data-collecting) policy to the newly
    /// trained one, on freshly reset states.
    pub kl_to_deployed: Option<f64>,
    pub eval_return: f64,
    pub eval_return_discounted: f64,
    pub imagined_return: f64,
    pub rollout_incidents: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config: serde_json::Value,
    pub deployments: Vec<DeploymentReport>,
    pub total_env_steps: u64,
    pub final_eval_return: f64,
    pub bound: BoundReport,
}

#[derive(Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub policy: GaussianMlpPolicy,
    pub bc_net: MlpParams,
    pub ensemble: DynamicsEnsemble,
    pub dataset: Dataset,
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag)
}

/// Collects `count` real transitions, sampling from `policy` when given and
/// uniformly from the action box otherwise.
pub fn collect_batch(
    env: &mut CountingEnv,
    policy: Option<&GaussianMlpPolicy>,
    count: usize,
    deployment_index: u32,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ad = env.spec.action_dim();
    let mut out = Dataset::new(env.spec.kind.id(), env.spec.state_dim(), ad);
    out.seed = seed;
    let mut st = env.reset(&mut rng);
    while out.len() < count {
        let a: Vec<f64> = match policy {
            Some(p) => p.act(&st.state, &mut rng)?.0,
            None => (0..ad).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let (next, r, done) = env.step(&st, &a)?;
        out.push(Transition {
            s: st.state.clone(),
            a,
            r,
            s_next: next.state.clone(),
            done,
            deployment_index,
        })?;
        st = if done { env.reset(&mut rng) } else { next };
    }
    Ok(out)
}

/// Mean undiscounted and discounted returns of the deterministic mean
/// policy over seeded evaluation episodes.
pub fn evaluate_policy(
    spec: &EnvSpec,
    policy: &GaussianMlpPolicy,
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut total_disc = 0.0;
    for _ in 0..episodes {
        let mut st = spec.reset(&mut rng);
        let mut disc = 1.0;
        loop {
            let a = policy.mean_action(&st.state)?;
            let (next, r, done) = spec.step(&st, &a)?;
            total += r;
            total_disc += disc * r;
            disc *= gamma;
            if done {
                break;
            }
            st = next;
        }
    }
    Ok((total / episodes as f64, total_disc / episodes as f64))
}

struct IterationOutcome {
    accepted_iters: usize,
    final_mean_kl: f64,
    imagined_return: f64,
    incidents: usize,
}

/// Mean-action return of the policy inside the learned model, from reset
/// states. Offline proxy used to pick the best iterate of a deployment.
fn model_selection_score(
    ens: &DynamicsEnsemble,
    policy: &GaussianMlpPolicy,
    spec: &EnvSpec,
    length: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Vec<f64>> = (0..32).map(|_| spec.reset(&mut rng).state).collect();
    dynamics::model_eval(ens, policy, spec, &starts, length, seed)
}

/// T trust-region iterations against the learned ensemble. `anchor`
/// switches on the explicit per-state KL penalty toward the cloned
/// behavior policy.
#[allow(clippy::too_many_arguments)]
fn optimize_policy(
    cfg: &ExperimentConfig,
    spec: &EnvSpec,
    ens: &DynamicsEnsemble,
    d_all: &Dataset,
    policy: &mut GaussianMlpPolicy,
    anchor: Option<&GaussianMlpPolicy>,
    metrics: Option<(&mut MetricsWriter, &str, usize)>,
    seed: u64,
) -> Result<IterationOutcome> {
    let mut outcome = IterationOutcome {
        accepted_iters: 0,
        final_mean_kl: 0.0,
        imagined_return: 0.0,
        incidents: 0,
    };
    let (mut writer, run_id, deployment) = match metrics {
        Some((w, id, dep)) => (Some(w), id.to_string(), dep),
        None => (None, String::new(), 0),
    };
    let select_seed = sub_seed(seed, 999);
    let mut best_score = model_selection_score(ens, policy, spec, cfg.rollout_length, select_seed)?;
    let mut best_policy = policy.clone();
    for iter in 0..cfg.trpo_iters {
        let batch = dynamics::imaginary_rollout(
            ens,
            policy,
            spec,
            d_all,
            cfg.rollout_length,
            cfg.policy_batch,
            sub_seed(seed, 101 + iter as u64),
        )?;
        outcome.incidents += batch.incidents;
        outcome.imagined_return = batch.mean_return();
        let vf = trpo::fit_value_fn(&batch, cfg.gamma, 1e-5)?;
        let mut adv = trpo::compute_gae(&batch, &vf, cfg.gamma, cfg.lambda)?;
        let mut data = StepData::from_rollouts(&batch, &adv)?;
        if let Some(anchor) = anchor {
            // value-penalty variant: advantages lose alpha * KL(pi || anchor)
            let kl = policy.per_state_kl(anchor, &data.states)?;
            for (a, k) in adv.raw.iter_mut().zip(&kl) {
                *a -= cfg.alpha * k;
            }
            let n = adv.raw.len() as f64;
            let mean = adv.raw.iter().sum::<f64>() / n;
            let var = adv.raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-8);
            data.advantages = adv.raw.iter().map(|v| (v - mean) / std).collect();
        }
        let (new_policy, report) = trpo::trpo_step(policy, &data, &cfg.trpo)?;
        if report.accepted {
            outcome.accepted_iters += 1;
            outcome.final_mean_kl = report.mean_kl;
        }
        *policy = new_policy;
        let score = model_selection_score(ens, policy, spec, cfg.rollout_length, select_seed)?;
        if score > best_score {
            best_score = score;
            best_policy = policy.clone();
        }
        if let Some(w) = writer.as_deref_mut() {
            let row = MetricsRow::new(&run_id, deployment, iter)
                .scalar("surrogate_improvement", report.improvement)
                .scalar("mean_kl", report.mean_kl)
                .scalar("max_tv", report.max_tv)
                .scalar("accepted", if report.accepted { 1.0 } else { 0.0 })
                .scalar("backtracks", report.backtracks as f64)
                .scalar("imagined_return", outcome.imagined_return)
                .scalar("model_eval", score);
            w.write(&row)?;
        }
    }
    // hand back the iterate the model liked best, not the last one
    *policy = best_policy;
    Ok(outcome)
}

fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-{}-seed{}", cfg.env.id(), cfg.mode.id(), cfg.seed)
}

/// The deployment loop: I rounds of collect / model fit / clone / plan.
pub fn run_deployment_loop(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = EnvSpec::new(cfg.env, cfg.horizon);
    let mut env = CountingEnv::new(spec.clone());
    let run_id = run_id(cfg);
    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    let mut d_all = Dataset::new(spec.kind.id(), spec.state_dim(), spec.action_dim());
    d_all.seed = cfg.seed;
    d_all.noise_scheme = "on_policy".to_string();
    let mut current: Option<GaussianMlpPolicy> = None;
    let mut reports = Vec::with_capacity(cfg.deployments);
    let mut last_bc: Option<MlpParams> = None;
    let mut last_ens: Option<DynamicsEnsemble> = None;
    let mut last_imagined = 0.0;

    for i in 1..=cfg.deployments {
        let wrap = |e: BremenError| BremenError::Deployment { index: i, source: Box::new(e) };
        let deployed_policy_hash = current.as_ref().map(|p| p.params_hash());
        let deployed = current.clone();
        let batch = collect_batch(
            &mut env,
            current.as_ref(),
            cfg.batch_size,
            i as u32,
            sub_seed(cfg.seed, 7 * i as u64),
        )
        .map_err(wrap)?;
        let collected = batch.len();
        d_all.append_batch(&batch).map_err(wrap)?;
        d_all.policy_hash = deployed_policy_hash.unwrap_or(0);
        if env.step_count() != (i * cfg.batch_size) as u64 {
            return Err(BremenError::Deployment {
                index: i,
                source: Box::new(BremenError::Dataset(format!(
                    "collection audit: {} real steps after {} deployments of {}",
                    env.step_count(),
                    i,
                    cfg.batch_size
                ))),
            });
        }

        let mut dyn_cfg = cfg.dynamics.clone();
        dyn_cfg.seed = sub_seed(cfg.seed, 13 * i as u64);
        let (ens, member_reports) = dynamics::train_ensemble(&d_all, &dyn_cfg).map_err(wrap)?;

        let d_bc = if cfg.bc_on_all {
            d_all.clone()
        } else {
            let mut d = Dataset::new(spec.kind.id(), spec.state_dim(), spec.action_dim());
            d.append_batch(&batch).map_err(wrap)?;
            d
        };
        let mut bc_cfg = cfg.bc.clone();
        bc_cfg.seed = sub_seed(cfg.seed, 17 * i as u64);
        let (bc_net, bc_report) = behavior_clone(&d_bc, &bc_cfg).map_err(wrap)?;

        let mut policy = match cfg.mode {
            Mode::MetrpoOffline => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 19 * i as u64));
                GaussianMlpPolicy::random_init(
                    spec.state_dim(),
                    spec.action_dim(),
                    &cfg.policy_hidden,
                    cfg.sigma_init,
                    &mut rng,
                )
                .map_err(wrap)?
            }
            _ => init_target_policy(&bc_net, cfg.sigma_init).map_err(wrap)?,
        };
        let anchor = match cfg.mode {
            Mode::ExplicitKl => Some(GaussianMlpPolicy::new(bc_net.clone(), cfg.sigma_init).map_err(wrap)?),
            _ => None,
        };

        let outcome = optimize_policy(
            cfg,
            &spec,
            &ens,
            &d_all,
            &mut policy,
            anchor.as_ref(),
            writer.as_mut().map(|w| (w, run_id.as_str(), i)),
            sub_seed(cfg.seed, 23 * i as u64),
        )
        .map_err(wrap)?;

        let (eval_return, eval_disc) = evaluate_policy(
            &spec,
            &policy,
            cfg.eval_episodes,
            cfg.gamma,
            sub_seed(cfg.seed, 29 * i as u64),
        )
        .map_err(wrap)?;

        let kl_to_deployed = match &deployed {
            Some(old) => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 31 * i as u64));
                let states = crate::linalg::Matrix::from_rows(
                    &(0..64).map(|_| spec.reset(&mut rng).state).collect::<Vec<_>>(),
                );
                Some(old.mean_kl(&policy, &states).map_err(wrap)?)
            }
            None => None,
        };

        let report = DeploymentReport {
            deployment: i,
            collected,
            env_steps_cumulative: env.step_count(),
            deployed_policy_hash,
            trained_policy_hash: policy.params_hash(),
            bc_val_mse: bc_report.val_action_mse,
            dynamics_val_mse: member_reports.iter().map(|r| r.val_mse).collect(),
            accepted_iters: outcome.accepted_iters,
            final_mean_kl: outcome.final_mean_kl,
            kl_to_deployed,
            eval_return,
            eval_return_discounted: eval_disc,
            imagined_return: outcome.imagined_return,
            rollout_incidents: outcome.incidents,
        };
        if let Some(w) = writer.as_mut() {
            let row = MetricsRow::new(&run_id, i, cfg.trpo_iters)
                .scalar("eval_return", eval_return)
                .scalar("eval_return_discounted", eval_disc)
                .scalar("bc_val_mse", bc_report.val_action_mse)
                .scalar("env_steps", env.step_count() as f64);
            w.write(&row)?;
        }
        reports.push(report);
        last_imagined = outcome.imagined_return;
        last_bc = Some(bc_net);
        last_ens = Some(ens);
        current = Some(policy);
    }

    let policy = current.expect("at least one deployment ran");
    let bc_net = last_bc.expect("at least one deployment ran");
    let ensemble = last_ens.expect("at least one deployment ran");
    let summary = finish_run(
        cfg,
        &run_id,
        reports,
        env.step_count(),
        &policy,
        &bc_net,
        &ensemble,
        &d_all,
        last_imagined,
    )?;
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let out = RunOutput { summary, policy, bc_net, ensemble, dataset: d_all };
    if let Some(dir) = out_dir {
        save_artifacts(&out, dir)?;
    }
    Ok(out)
}

/// Offline variant: one fixed batch, no further interaction. The audit that
/// no real steps happen during training is structural (no env handle is
/// ever constructed) and double-checked by the caller in tests through
/// [`CountingEnv`].
pub fn run_offline(cfg: &ExperimentConfig, d: &Dataset, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    if d.env_id() != cfg.env.id() {
        return Err(BremenError::Config(format!(
            "dataset env '{}' does not match configured env '{}'",
            d.env_id(),
            cfg.env.id()
        )));
    }
    let spec = EnvSpec::new(cfg.env, cfg.horizon);
    let run_id = run_id(cfg);
    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    let mut dyn_cfg = cfg.dynamics.clone();
    dyn_cfg.seed = sub_seed(cfg.seed, 13);
    let (ens, member_reports) = dynamics::train_ensemble(d, &dyn_cfg)?;
    let mut bc_cfg = cfg.bc.clone();
    bc_cfg.seed = sub_seed(cfg.seed, 17);
    let (bc_net, bc_report) = behavior_clone(d, &bc_cfg)?;

    let mut policy = match cfg.mode {
        Mode::MetrpoOffline => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 19));
            GaussianMlpPolicy::random_init(
                spec.state_dim(),
                spec.action_dim(),
                &cfg.policy_hidden,
                cfg.sigma_init,
                &mut rng,
            )?
        }
        _ => init_target_policy(&bc_net, cfg.sigma_init)?,
    };
    let anchor = match cfg.mode {
        Mode::ExplicitKl => Some(GaussianMlpPolicy::new(bc_net.clone(), cfg.sigma_init)?),
        _ => None,
    };
    let outcome = optimize_policy(
        cfg,
        &spec,
        &ens,
        d,
        &mut policy,
        anchor.as_ref(),
        writer.as_mut().map(|w| (w, run_id.as_str(), 1)),
        sub_seed(cfg.seed, 23),
    )?;
    let (eval_return, eval_disc) =
        evaluate_policy(&spec, &policy, cfg.eval_episodes, cfg.gamma, sub_seed(cfg.seed, 29))?;

    let report = DeploymentReport {
        deployment: 1,
        collected: 0,
        env_steps_cumulative: 0,
        deployed_policy_hash: None,
        trained_policy_hash: policy.params_hash(),
        bc_val_mse: bc_report.val_action_mse,
        dynamics_val_mse: member_reports.iter().map(|r| r.val_mse).collect(),
        accepted_iters: outcome.accepted_iters,
        final_mean_kl: outcome.final_mean_kl,
        kl_to_deployed: None,
        eval_return,
        eval_return_discounted: eval_disc,
        imagined_return: outcome.imagined_return,
        rollout_incidents: outcome.incidents,
    };
    if let Some(w) = writer.as_mut() {
        let row = MetricsRow::new(&run_id, 1, cfg.trpo_iters)
            .scalar("eval_return", eval_return)
            .scalar("eval_return_discounted", eval_disc)
            .scalar("bc_val_mse", bc_report.val_action_mse)
            .scalar("env_steps", 0.0);
        w.write(&row)?;
        w.flush()?;
    }
    let summary = finish_run(
        cfg,
        &run_id,
        vec![report],
        0,
        &policy,
        &bc_net,
        &ens,
        d,
        outcome.imagined_return,
    )?;
    let out = RunOutput {
        summary,
        policy,
        bc_net,
        ensemble: ens,
        dataset: d.clone(),
    };
    if let Some(dir) = out_dir {
        save_artifacts(&out, dir)?;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    cfg: &ExperimentConfig,
    run_id: &str,
    deployments: Vec<DeploymentReport>,
    total_env_steps: u64,
    policy: &GaussianMlpPolicy,
    bc_net: &MlpParams,
    ens: &DynamicsEnsemble,
    d_all: &Dataset,
    imagined_return: f64,
) -> Result<RunSummary> {
    let _ = policy;
    let eps = bounds::estimate_loss_epsilons(bc_net, ens, d_all)?;
    let r_max = d_all
        .transitions()
        .iter()
        .map(|t| t.r.abs())
        .fold(0.0f64, f64::max);
    let bound = bounds::bound_report(
        &eps,
        cfg.trpo_iters,
        cfg.trpo.delta,
        cfg.gamma,
        r_max,
        imagined_return,
        0,
    )?;
    let final_eval_return = deployments
        .last()
        .map(|d| d.eval_return)
        .unwrap_or(f64::NEG_INFINITY);
    Ok(RunSummary {
        run_id: run_id.to_string(),
        config: cfg.describe(),
        deployments,
        total_env_steps,
        final_eval_return,
        bound,
    })
}

fn save_artifacts(out: &RunOutput, dir: &Path) -> Result<()> {
    out.policy.save(&dir.join("policy.ckpt"))?;
    out.bc_net.save(&dir.join("bc.ckpt"))?;
    out.ensemble.save(&dir.join("ensemble.ckpt"))?;
    out.dataset.save(&dir.join("dataset.brds"))?;
    let json = serde_json::to_string_pretty(&out.summary)
        .map_err(|e| BremenError::Format(format!("summary serialization: {e}")))?;
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

/// Eval return per real transition consumed, per deployment: the
/// deployment-efficiency view of a finished run.
pub fn deployment_efficiency_report(summary: &RunSummary) -> Vec<(usize, u64, f64)> {
    summary
        .deployments
        .iter()
        .map(|d| (d.deployment, d.env_steps_cumulative, d.eval_return))
        .collect()
}
