//! Natural-gradient trust-region policy updates on imagined rollouts:
//! linear value baseline, generalized advantage estimation, conjugate
//! gradient on a Gauss-Newton Fisher-vector product, and a backtracking
//! line search that enforces the KL radius.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::RolloutBatch;
use crate::error::{BremenError, Result};
use crate::linalg::{self, dot, Matrix};
use crate::policy::GaussianMlpPolicy;

/// Value baseline linear in hand-built features of (state, step index):
/// [s, s*s, t/100, (t/100)^2, (t/100)^3, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearValueFn {
    pub weights: Vec<f64>,
    state_dim: usize,
}

impl LinearValueFn {
    pub fn zeros(state_dim: usize) -> Self {
        LinearValueFn {
            weights: vec![0.0; 2 * state_dim + 4],
            state_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn features(s: &[f64], t: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * s.len() + 4);
        f.extend_from_slice(s);
        f.extend(s.iter().map(|v| v * v));
        let tt = t as f64 * 0.01;
        f.push(tt);
        f.push(tt * tt);
        f.push(tt * tt * tt);
        f.push(1.0);
        f
    }

    pub fn predict(&self, s: &[f64], t: usize) -> f64 {
        dot(&Self::features(s, t), &self.weights)
    }
}

/// Ridge regression of the baseline onto discounted reward-to-go targets.
pub fn fit_value_fn(batch: &RolloutBatch, gamma: f64, ridge: f64) -> Result<LinearValueFn> {
    let state_dim = batch
        .trajectories
        .first()
        .map(|t| t.states[0].len())
        .ok_or_else(|| BremenError::Dataset("cannot fit a value baseline to zero rollouts".into()))?;
    let dim = 2 * state_dim + 4;
    let mut xtx = Matrix::zeros(dim, dim);
    let mut xty = vec![0.0; dim];
    for traj in &batch.trajectories {
        let mut rtg = 0.0;
        let mut targets = vec![0.0; traj.len()];
        for t in (0..traj.len()).rev() {
            rtg = traj.rewards[t] + gamma * rtg;
            targets[t] = rtg;
        }
        for t in 0..traj.len() {
            let f = LinearValueFn::features(&traj.states[t], t);
            for i in 0..dim {
                xty[i] += f[i] * targets[t];
                for j in 0..dim {
                    let v = xtx.get(i, j) + f[i] * f[j];
                    xtx.set(i, j, v);
                }
            }
        }
    }
    for i in 0..dim {
        let v = xtx.get(i, i) + ridge;
        xtx.set(i, i, v);
    }
    let rhs = Matrix::new(dim, 1, xty)?;
    let w = linalg::solve(&xtx, &rhs)?;
    Ok(LinearValueFn {
        weights: w.data().to_vec(),
        state_dim,
    })
}

#[derive(Debug, Clone)]
pub struct AdvantageBatch {
    pub raw: Vec<f64>,
    /// Mean-zero, unit-variance copy actually fed to the surrogate.
    pub normalized: Vec<f64>,
}

/// Generalized advantage estimation, one entry per imagined step in
/// trajectory order. Terminated branches bootstrap with zero; truncated
/// ones with the baseline value of the final state.
pub fn compute_gae(
    batch: &RolloutBatch,
    vf: &LinearValueFn,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageBatch> {
    let mut raw = Vec::with_capacity(batch.total_steps());
    for traj in &batch.trajectories {
        let n = traj.len();
        if n == 0 {
            continue;
        }
        let values: Vec<f64> = (0..=n).map(|t| vf.predict(&traj.states[t.min(traj.states.len() - 1)], t)).collect();
        let tail = if traj.terminated { 0.0 } else { values[n] };
        let mut adv = vec![0.0; n];
        let mut acc = 0.0;
        for t in (0..n).rev() {
            let v_next = if t == n - 1 { tail } else { values[t + 1] };
            let delta = traj.rewards[t] + gamma * v_next - values[t];
            acc = delta + gamma * lambda * acc;
            adv[t] = acc;
        }
        raw.extend(adv);
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(BremenError::NonFinite("advantage estimates".into()));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    let normalized = raw.iter().map(|v| (v - mean) / std).collect();
    Ok(AdvantageBatch { raw, normalized })
}

/// Per-step inputs of one trust-region update, flattened across rollouts.
#[derive(Debug, Clone)]
pub struct StepData {
    pub states: Matrix,
    /// Pre-clip actions the behavior log-densities were evaluated at.
    pub actions: Matrix,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl StepData {
    pub fn from_rollouts(batch: &RolloutBatch, adv: &AdvantageBatch) -> Result<Self> {
        let data = StepData {
            states: batch.step_states(),
            actions: batch.step_actions(),
            old_log_probs: batch.step_log_probs(),
            advantages: adv.normalized.clone(),
        };
        if data.states.rows() != data.advantages.len()
            || data.states.rows() != data.old_log_probs.len()
        {
            return Err(BremenError::shape(
                "step_data",
                data.states.rows(),
                data.advantages.len(),
            ));
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }

    /// Evenly strided subset used for curvature estimates.
    pub fn subsample(&self, max_rows: usize) -> StepData {
        if max_rows == 0 || self.len() <= max_rows {
            return self.clone();
        }
        let stride = self.len().div_ceil(max_rows);
        let idx: Vec<usize> = (0..self.len()).step_by(stride).collect();
        StepData {
            states: Matrix::from_rows(&idx.iter().map(|&i| self.states.row(i).to_vec()).collect::<Vec<_>>()),
            actions: Matrix::from_rows(&idx.iter().map(|&i| self.actions.row(i).to_vec()).collect::<Vec<_>>()),
            old_log_probs: idx.iter().map(|&i| self.old_log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
        }
    }
}

/// Importance-weighted surrogate mean(ratio * advantage) and its gradient
/// w.r.t. the mean-network parameters.
pub fn surrogate_and_grad(
    policy: &GaussianMlpPolicy,
    data: &StepData,
) -> Result<(f64, Vec<f64>)> {
    let acts = policy.mean_net.forward_cached(&data.states)?;
    let z = acts.last().unwrap();
    let n = data.len();
    let nf = n as f64;
    let ad = policy.action_dim();
    let mut value = 0.0;
    let mut upstream = Matrix::zeros(n, ad);
    for r in 0..n {
        let mut lp = 0.0;
        for c in 0..ad {
            let sd = policy.sigma[c];
            let diff = data.actions.get(r, c) - z.get(r, c).tanh();
            lp += -(sd.ln() + 0.5 * crate::policy::LN_2PI) - diff * diff / (2.0 * sd * sd);
        }
        let ratio = (lp - data.old_log_probs[r]).exp();
        if !ratio.is_finite() {
            return Err(BremenError::NonFinite("importance ratio".into()));
        }
        value += ratio * data.advantages[r];
        for c in 0..ad {
            let sd = policy.sigma[c];
            let t = z.get(r, c).tanh();
            let diff = data.actions.get(r, c) - t;
            // d log pi / dz through the tanh mean squashing
            let dlogp_dz = diff / (sd * sd) * (1.0 - t * t);
            upstream.set(r, c, ratio * data.advantages[r] * dlogp_dz / nf);
        }
    }
    value /= nf;
    let grad = policy
        .mean_net
        .backward_from_cache(&data.states, &acts, &upstream)?;
    Ok((value, grad))
}

pub fn surrogate_value(policy: &GaussianMlpPolicy, data: &StepData) -> Result<f64> {
    let lps = policy.log_probs(&data.states, &data.actions)?;
    let mut value = 0.0;
    for r in 0..data.len() {
        let ratio = (lps[r] - data.old_log_probs[r]).exp();
        if !ratio.is_finite() {
            return Err(BremenError::NonFinite("importance ratio".into()));
        }
        value += ratio * data.advantages[r];
    }
    Ok(value / data.len() as f64)
}

/// Gauss-Newton Fisher-vector product of the mean-KL constraint at the
/// current parameters: F v = E[J^T diag((1-tanh^2)^2 / sigma^2) J v] over
/// the pre-tanh mean outputs, plus damping.
pub fn fisher_vector_product(
    policy: &GaussianMlpPolicy,
    states: &Matrix,
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>> {
    let acts = policy.mean_net.forward_cached(states)?;
    let z = acts.last().unwrap();
    let n = states.rows() as f64;
    let mut jv = policy.mean_net.jvp(states, v)?;
    for r in 0..jv.rows() {
        for c in 0..jv.cols() {
            let t = z.get(r, c).tanh();
            let d = 1.0 - t * t;
            let sd = policy.sigma[c];
            jv.set(r, c, jv.get(r, c) * d * d / (sd * sd) / n);
        }
    }
    let mut out = policy
        .mean_net
        .backward_from_cache(states, &acts, &jv)?;
    for (o, vi) in out.iter_mut().zip(v) {
        *o += damping * vi;
    }
    Ok(out)
}

/// Plain conjugate gradient for SPD operators; returns (solution, final
/// residual norm).
pub fn conjugate_gradient<F>(apply: F, b: &[f64], iters: usize) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    for _ in 0..iters {
        if rr.sqrt() < 1e-10 {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(BremenError::Diverged(format!(
                "conjugate gradient met a non-positive curvature direction (pAp={pap})"
            )));
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Ok((x, rr.sqrt()))
}

#[derive(Debug, Clone)]
pub struct TrpoConfig {
    pub delta: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_coeff: f64,
    pub max_backtracks: usize,
    /// Cap on states used for curvature (0 = use all).
    pub fvp_subsample: usize,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        TrpoConfig {
            delta: 0.05,
            cg_iters: 10,
            cg_damping: 0.1,
            backtrack_coeff: 0.8,
            max_backtracks: 10,
            fvp_subsample: 500,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrpoStepReport {
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub improvement: f64,
    pub mean_kl: f64,
    pub max_state_kl: f64,
    pub max_tv: f64,
    pub backtracks: usize,
    pub cg_residual: f64,
    pub accepted: bool,
}

/// Total-variation proxy between old and new conditionals at one state:
/// equal-variance Gaussians per dim, max over dims.
pub fn gaussian_tv(delta_mean: &[f64], sigma: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    delta_mean
        .iter()
        .zip(sigma)
        .map(|(d, s)| 2.0 * normal.cdf(d.abs() / (2.0 * s)) - 1.0)
        .fold(0.0, f64::max)
}

fn max_tv_over_states(
    old: &GaussianMlpPolicy,
    new: &GaussianMlpPolicy,
    states: &Matrix,
) -> Result<f64> {
    let mu_old = old.mean_actions(states)?;
    let mu_new = new.mean_actions(states)?;
    let mut max_tv = 0.0f64;
    for r in 0..states.rows() {
        let d: Vec<f64> = (0..old.action_dim())
            .map(|c| mu_new.get(r, c) - mu_old.get(r, c))
            .collect();
        max_tv = max_tv.max(gaussian_tv(&d, &old.sigma));
    }
    Ok(max_tv)
}

/// One natural-gradient step with line search. The returned policy shares
/// sigma with the input; only the mean network moves. A step is accepted
/// when the surrogate improves, the mean KL stays within 1.5 delta, and the
/// per-state total-variation proxy stays within sqrt(delta / 2).
pub fn trpo_step(
    policy: &GaussianMlpPolicy,
    data: &StepData,
    cfg: &TrpoConfig,
) -> Result<(GaussianMlpPolicy, TrpoStepReport)> {
    if data.is_empty() {
        return Err(BremenError::Dataset("trpo_step needs at least one sample".into()));
    }
    let (surrogate_before, grad) = surrogate_and_grad(policy, data)?;
    let curvature = data.subsample(cfg.fvp_subsample);
    let apply = |v: &[f64]| fisher_vector_product(policy, &curvature.states, v, cfg.cg_damping);
    let (dir, cg_residual) = conjugate_gradient(apply, &grad, cfg.cg_iters)?;
    let shs = dot(&dir, &apply(&dir)?);
    if shs <= 0.0 || !shs.is_finite() {
        return Err(BremenError::Diverged(format!(
            "search direction has non-positive curvature ({shs})"
        )));
    }
    let full_scale = (2.0 * cfg.delta / shs).sqrt();
    let base = policy.mean_net.flatten();
    let tv_limit = (cfg.delta / 2.0).sqrt() + 1e-9;

    let mut report = TrpoStepReport {
        surrogate_before,
        surrogate_after: surrogate_before,
        improvement: 0.0,
        mean_kl: 0.0,
        max_state_kl: 0.0,
        max_tv: 0.0,
        backtracks: cfg.max_backtracks,
        cg_residual,
        accepted: false,
    };

    let mut scale = full_scale;
    for attempt in 0..cfg.max_backtracks {
        let mut flat = base.clone();
        for (f, d) in flat.iter_mut().zip(&dir) {
            *f += scale * d;
        }
        let mut candidate = policy.clone();
        candidate.mean_net.set_flat(&flat)?;

        let surrogate_after = surrogate_value(&candidate, data)?;
        // constraints measured on the same sampled states as curvature
        let per_state = policy.per_state_kl(&candidate, &curvature.states)?;
        let mean_kl = per_state.iter().sum::<f64>() / per_state.len() as f64;
        let max_state_kl = per_state.iter().fold(0.0f64, |a, &b| a.max(b));
        let max_tv = max_tv_over_states(policy, &candidate, &curvature.states)?;
        let improvement = surrogate_after - surrogate_before;

        if improvement > 0.0 && mean_kl <= 1.5 * cfg.delta && max_tv <= tv_limit {
            report.surrogate_after = surrogate_after;
            report.improvement = improvement;
            report.mean_kl = mean_kl;
            report.max_state_kl = max_state_kl;
            report.max_tv = max_tv;
            report.backtracks = attempt;
            report.accepted = true;
            return Ok((candidate, report));
        }
        scale *= cfg.backtrack_coeff;
    }
    // every scale rejected: keep the old policy
    Ok((policy.clone(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Trajectory;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(seed: u64, n_traj: usize, len: usize, sd: usize) -> RolloutBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajectories = (0..n_traj)
            .map(|_| {
                let states: Vec<Vec<f64>> = (0..=len)
                    .map(|_| (0..sd).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                Trajectory {
                    actions: (0..len).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect(),
                    rewards: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    log_probs: vec![0.0; len],
                    member_idx: vec![0; len],
                    terminated: false,
                    states,
                }
            })
            .collect();
        RolloutBatch { trajectories, incidents: 0 }
    }

    /// Literal transcription of the recursive definition, used as the GAE
    /// oracle: A_t = delta_t + gamma lambda A_{t+1}.
    fn gae_recursive(
        rewards: &[f64],
        values: &[f64],
        tail: f64,
        gamma: f64,
        lambda: f64,
        t: usize,
    ) -> f64 {
        let v_next = if t == rewards.len() - 1 { tail } else { values[t + 1] };
        let delta = rewards[t] + gamma * v_next - values[t];
        if t == rewards.len() - 1 {
            delta
        } else {
            delta + gamma * lambda * gae_recursive(rewards, values, tail, gamma, lambda, t + 1)
        }
    }

    #[test]
    fn gae_matches_recursive_oracle_bitwise() {
        let batch = toy_batch(1, 4, 25, 3);
        let mut vf = LinearValueFn::zeros(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for w in vf.weights.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        let adv = compute_gae(&batch, &vf, 0.99, 0.95).unwrap();
        let mut i = 0;
        for traj in &batch.trajectories {
            let n = traj.len();
            let values: Vec<f64> = (0..=n).map(|t| vf.predict(&traj.states[t], t)).collect();
            let tail = values[n];
            for t in 0..n {
                let want = gae_recursive(&traj.rewards, &values, tail, 0.99, 0.95, t);
                assert_eq!(adv.raw[i], want, "traj step {t}");
                i += 1;
            }
        }
        assert_eq!(i, adv.raw.len());
    }

    #[test]
    fn gae_reduces_to_reward_to_go() {
        // gamma=1, lambda=1, zero baseline: advantage = undiscounted
        // reward-to-go minus nothing
        let batch = toy_batch(3, 2, 10, 2);
        let vf = LinearValueFn::zeros(2);
        let adv = compute_gae(&batch, &vf, 1.0, 1.0).unwrap();
        let mut i = 0;
        for traj in &batch.trajectories {
            for t in 0..traj.len() {
                let want: f64 = traj.rewards[t..].iter().sum();
                assert!((adv.raw[i] - want).abs() < 1e-12);
                i += 1;
            }
        }
    }

    #[test]
    fn gae_terminated_bootstraps_zero() {
        let mut batch = toy_batch(4, 1, 5, 2);
        batch.trajectories[0].terminated = true;
        let mut vf = LinearValueFn::zeros(2);
        let last = vf.feature_dim() - 1;
        vf.weights[last] = 10.0; // constant baseline 10
        let adv_term = compute_gae(&batch, &vf, 0.9, 0.9).unwrap();
        batch.trajectories[0].terminated = false;
        let adv_trunc = compute_gae(&batch, &vf, 0.9, 0.9).unwrap();
        // the two differ exactly through the bootstrap value at every step
        let n = batch.trajectories[0].len();
        for t in 0..n {
            let diff = adv_trunc.raw[t] - adv_term.raw[t];
            let want = 10.0 * 0.9f64.powi((n - t) as i32) * 0.9f64.powi((n - 1 - t) as i32);
            assert!((diff - want).abs() < 1e-9, "t={t} diff={diff} want={want}");
        }
    }

    #[test]
    fn advantages_normalized() {
        let batch = toy_batch(5, 3, 40, 2);
        let vf = fit_value_fn(&batch, 0.99, 1e-5).unwrap();
        let adv = compute_gae(&batch, &vf, 0.99, 0.95).unwrap();
        let n = adv.normalized.len() as f64;
        let mean: f64 = adv.normalized.iter().sum::<f64>() / n;
        let var: f64 = adv.normalized.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }

    #[test]
    fn value_fit_recovers_linear_target() {
        // rewards built so the reward-to-go IS a linear feature function;
        // ridge regression should recover it almost exactly
        let mut batch = toy_batch(6, 5, 30, 2);
        let true_w = vec![0.5, -0.3, 0.2, 0.1, 0.0, 0.0, 0.0, 1.0];
        let gamma = 0.9;
        for traj in &mut batch.trajectories {
            let n = traj.len();
            let target = |s: &[f64], t: usize| dot(&LinearValueFn::features(s, t), &true_w);
            for t in 0..n {
                let here = target(&traj.states[t], t);
                let next = if t == n - 1 { 0.0 } else { target(&traj.states[t + 1], t + 1) };
                traj.rewards[t] = here - gamma * next;
            }
        }
        let vf = fit_value_fn(&batch, gamma, 1e-8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let s: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = rng.gen_range(0..30);
            let want = dot(&LinearValueFn::features(&s, t), &true_w);
            assert!((vf.predict(&s, t) - want).abs() < 1e-4);
        }
    }

    fn random_step_data(seed: u64, n: usize, sd: usize, ad: usize) -> (GaussianMlpPolicy, StepData) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = GaussianMlpPolicy::random_init(sd, ad, &[8], 0.3, &mut rng).unwrap();
        let states = Matrix::new(
            n,
            sd,
            (0..n * sd).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut actions = Matrix::zeros(n, ad);
        let mut old_log_probs = Vec::with_capacity(n);
        for r in 0..n {
            let s = states.row(r).to_vec();
            let sample = policy.sample(&s, &mut rng).unwrap();
            for c in 0..ad {
                actions.set(r, c, sample.preclip[c]);
            }
            old_log_probs.push(sample.log_prob);
        }
        let advantages: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (
            policy,
            StepData { states, actions, old_log_probs, advantages },
        )
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let (policy, data) = random_step_data(10, 40, 3, 2);
        let (value, grad) = surrogate_and_grad(&policy, &data).unwrap();
        let check = surrogate_value(&policy, &data).unwrap();
        assert!((value - check).abs() < 1e-12);
        let base = policy.mean_net.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-6;
        for _ in 0..20 {
            let i = rng.gen_range(0..base.len());
            let mut p = policy.clone();
            let mut flat = base.clone();
            flat[i] += eps;
            p.mean_net.set_flat(&flat).unwrap();
            let up = surrogate_value(&p, &data).unwrap();
            flat[i] -= 2.0 * eps;
            p.mean_net.set_flat(&flat).unwrap();
            let down = surrogate_value(&p, &data).unwrap();
            let fd = (up - down) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn fvp_predicts_local_kl_growth() {
        // mean KL(theta, theta + eps v) ~= 0.5 eps^2 v'Fv for small eps
        let (policy, data) = random_step_data(12, 60, 3, 2);
        let n_params = policy.mean_net.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fv = fisher_vector_product(&policy, &data.states, &v, 0.0).unwrap();
        let vfv = dot(&v, &fv);
        assert!(vfv > 0.0);
        let eps = 1e-4;
        let mut perturbed = policy.clone();
        let mut flat = policy.mean_net.flatten();
        for (f, vi) in flat.iter_mut().zip(&v) {
            *f += eps * vi;
        }
        perturbed.mean_net.set_flat(&flat).unwrap();
        let kl = policy.mean_kl(&perturbed, &data.states).unwrap();
        let predicted = 0.5 * eps * eps * vfv;
        assert!(
            (kl - predicted).abs() / predicted < 1e-2,
            "kl {kl} predicted {predicted}"
        );
    }

    #[test]
    fn fvp_damping_adds_identity() {
        let (policy, data) = random_step_data(14, 20, 2, 1);
        let v: Vec<f64> = (0..policy.mean_net.param_count()).map(|i| (i % 3) as f64 - 1.0).collect();
        let f0 = fisher_vector_product(&policy, &data.states, &v, 0.0).unwrap();
        let f1 = fisher_vector_product(&policy, &data.states, &v, 0.1).unwrap();
        for i in 0..v.len() {
            assert!((f1[i] - f0[i] - 0.1 * v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_solves_small_spd_system() {
        // SPD matrix A = M'M + I in 6 dims; 10 CG iters are exact here
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 6;
        let m = Matrix::new(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = m.transpose().matmul(&m).add(&Matrix::identity(n));
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let apply = |v: &[f64]| -> Result<Vec<f64>> {
            let vm = Matrix::new(n, 1, v.to_vec())?;
            Ok(a.matmul(&vm).data().to_vec())
        };
        let (x, residual) = conjugate_gradient(apply, &b, 10).unwrap();
        assert!(residual < 1e-8, "residual {residual}");
        let ax = apply(&x).unwrap();
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cg_rejects_negative_curvature() {
        let apply = |v: &[f64]| -> Result<Vec<f64>> { Ok(v.iter().map(|x| -x).collect()) };
        assert!(conjugate_gradient(apply, &[1.0, 2.0], 10).is_err());
    }

    #[test]
    fn trpo_step_improves_surrogate_within_kl() {
        let (policy, data) = random_step_data(16, 200, 3, 2);
        let cfg = TrpoConfig { delta: 0.05, fvp_subsample: 0, ..Default::default() };
        let (new_policy, report) = trpo_step(&policy, &data, &cfg).unwrap();
        assert!(report.accepted, "step rejected: {report:?}");
        assert!(report.improvement > 0.0);
        assert!(report.mean_kl <= 1.5 * cfg.delta + 1e-12);
        assert!(report.max_tv <= (cfg.delta / 2.0).sqrt() + 1e-9);
        let real_kl = policy.mean_kl(&new_policy, &data.states).unwrap();
        assert!((real_kl - report.mean_kl).abs() < 1e-12);
    }

    #[test]
    fn trpo_step_rejection_keeps_policy() {
        // zero advantages: the surrogate cannot improve, so every
        // backtracking scale is rejected and the policy is unchanged
        let (policy, mut data) = random_step_data(17, 50, 2, 1);
        for a in data.advantages.iter_mut() {
            *a = 0.0;
        }
        let cfg = TrpoConfig::default();
        let result = trpo_step(&policy, &data, &cfg);
        match result {
            Ok((new_policy, report)) => {
                assert!(!report.accepted);
                assert_eq!(new_policy.mean_net.flatten(), policy.mean_net.flatten());
            }
            // an all-zero gradient can also surface as degenerate curvature
            Err(_) => {}
        }
    }

    #[test]
    fn gaussian_tv_matches_closed_form() {
        assert_eq!(gaussian_tv(&[0.0], &[0.5]), 0.0);
        // TV(N(0,1), N(1,1)) = 2 Phi(0.5) - 1
        let tv = gaussian_tv(&[1.0], &[1.0]);
        assert!((tv - 0.38292492254802624).abs() < 1e-9);
        // max over dims
        let tv2 = gaussian_tv(&[0.1, 1.0], &[1.0, 1.0]);
        assert!((tv2 - tv).abs() < 1e-12);
    }
}
