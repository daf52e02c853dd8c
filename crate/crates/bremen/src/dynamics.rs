//! Ensemble of deterministic next-state predictors trained on the
//! accumulated dataset, and imaginary rollout generation with per-step
//! uniform model selection.
//!
//! Members predict normalized state deltas; inputs are normalized per
//! dimension with statistics shared across the ensemble.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::dataset::Dataset;
use crate::env::EnvSpec;
use crate::error::{BremenError, Result};
use crate::exec;
use crate::linalg::Matrix;
use crate::nn::{read_f64, read_u32, MlpParams};
use crate::policy::{fisher_yates, GaussianMlpPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub s_mean: Vec<f64>,
    pub s_std: Vec<f64>,
    pub a_mean: Vec<f64>,
    pub a_std: Vec<f64>,
    /// Scale-only for targets so a zero network predicts a zero delta.
    pub d_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Normalizer {
            s_mean: vec![0.0; state_dim],
            s_std: vec![1.0; state_dim],
            a_mean: vec![0.0; action_dim],
            a_std: vec![1.0; action_dim],
            d_std: vec![1.0; state_dim],
        }
    }

    pub fn fit(d: &Dataset) -> Self {
        let (sd, ad) = (d.state_dim(), d.action_dim());
        let n = d.len() as f64;
        let mut s_mean = vec![0.0; sd];
        let mut a_mean = vec![0.0; ad];
        let mut d_mean = vec![0.0; sd];
        for t in d.transitions() {
            for i in 0..sd {
                s_mean[i] += t.s[i];
                d_mean[i] += t.s_next[i] - t.s[i];
            }
            for i in 0..ad {
                a_mean[i] += t.a[i];
            }
        }
        for v in s_mean.iter_mut().chain(a_mean.iter_mut()).chain(d_mean.iter_mut()) {
            *v /= n;
        }
        let mut s_var = vec![0.0; sd];
        let mut a_var = vec![0.0; ad];
        let mut d_var = vec![0.0; sd];
        for t in d.transitions() {
            for i in 0..sd {
                let e = t.s[i] - s_mean[i];
                s_var[i] += e * e;
                let de = (t.s_next[i] - t.s[i]) - d_mean[i];
                d_var[i] += de * de;
            }
            for i in 0..ad {
                let e = t.a[i] - a_mean[i];
                a_var[i] += e * e;
            }
        }
        let std = |var: Vec<f64>| -> Vec<f64> {
            var.into_iter().map(|v| (v / n).sqrt().max(1e-6)).collect()
        };
        Normalizer {
            s_mean,
            s_std: std(s_var),
            a_mean,
            a_std: std(a_var),
            d_std: std(d_var),
        }
    }

    fn norm_input(&self, s: &[f64], a: &[f64], out: &mut Vec<f64>) {
        for i in 0..s.len() {
            out.push((s[i] - self.s_mean[i]) / self.s_std[i]);
        }
        for i in 0..a.len() {
            out.push((a[i] - self.a_mean[i]) / self.a_std[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsEnsemble {
    pub members: Vec<MlpParams>,
    pub norm: Normalizer,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MemberReport {
    pub train_mse: f64,
    /// Raw-space per-dimension one-step MSE on held-out transitions.
    pub val_mse: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct DynamicsConfig {
    pub k: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            k: 5,
            hidden: vec![64, 64],
            learning_rate: 0.001,
            max_epochs: 100,
            patience: 5,
            minibatch: 256,
            seed: 0,
        }
    }
}

impl DynamicsEnsemble {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn state_dim(&self) -> usize {
        self.norm.s_mean.len()
    }

    /// Single exact linear member f(s,a) = As + Ba with identity
    /// normalization. The imagined dynamics then match the real linear env
    /// bit for bit, which pins down rollout bookkeeping in tests.
    pub fn from_linear_dynamics(a: &Matrix, b: &Matrix) -> Self {
        let sd = a.rows();
        let ad = b.cols();
        // delta = (A - I) s + B a, as one linear layer of shape (sd+ad, sd)
        let mut w = Matrix::zeros(sd + ad, sd);
        for r in 0..sd {
            for c in 0..sd {
                let v = a.get(c, r) - if r == c { 1.0 } else { 0.0 };
                w.set(r, c, v);
            }
        }
        for r in 0..ad {
            for c in 0..sd {
                w.set(sd + r, c, b.get(c, r));
            }
        }
        let mut net = MlpParams::zeros(&[sd + ad, sd]);
        let mut flat = w.data().to_vec();
        flat.extend(vec![0.0; sd]);
        net.set_flat(&flat).unwrap();
        DynamicsEnsemble {
            members: vec![net],
            norm: Normalizer::identity(sd, ad),
        }
    }

    /// Deterministic one-step prediction by member `member_index`.
    pub fn predict_next(&self, member_index: usize, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        if member_index >= self.k() {
            return Err(BremenError::Config(format!(
                "member index {member_index} out of range (K={})",
                self.k()
            )));
        }
        let states = Matrix::new(1, s.len(), s.to_vec())?;
        let actions = Matrix::new(1, a.len(), a.to_vec())?;
        let out = self.predict_batch(member_index, &states, &actions)?;
        Ok(out.row(0).to_vec())
    }

    /// Batched prediction: rows of `states`/`actions` are parallel samples.
    pub fn predict_batch(
        &self,
        member_index: usize,
        states: &Matrix,
        actions: &Matrix,
    ) -> Result<Matrix> {
        let sd = self.state_dim();
        let n = states.rows();
        let mut input = Vec::with_capacity(n * (sd + actions.cols()));
        for r in 0..n {
            self.norm.norm_input(states.row(r), actions.row(r), &mut input);
        }
        let x = Matrix::new(n, sd + actions.cols(), input)?;
        let out = self.members[member_index].forward(&x)?;
        let mut next = Matrix::zeros(n, sd);
        for r in 0..n {
            for c in 0..sd {
                next.set(r, c, states.get(r, c) + out.get(r, c) * self.norm.d_std[c]);
            }
        }
        Ok(next)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        for m in &self.members {
            m.write_to(&mut w)?;
        }
        for block in [
            &self.norm.s_mean,
            &self.norm.s_std,
            &self.norm.a_mean,
            &self.norm.a_std,
            &self.norm.d_std,
        ] {
            w.write_all(&(block.len() as u32).to_le_bytes())?;
            for v in block.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let k = read_u32(&mut r)? as usize;
        if k == 0 || k > 1024 {
            return Err(BremenError::Format("bad ensemble size".into()));
        }
        let mut members = Vec::with_capacity(k);
        for _ in 0..k {
            members.push(MlpParams::read_from(&mut r)?);
        }
        let mut blocks = Vec::with_capacity(5);
        for _ in 0..5 {
            let len = read_u32(&mut r)? as usize;
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(read_f64(&mut r)?);
            }
            blocks.push(v);
        }
        let d_std = blocks.pop().unwrap();
        let a_std = blocks.pop().unwrap();
        let a_mean = blocks.pop().unwrap();
        let s_std = blocks.pop().unwrap();
        let s_mean = blocks.pop().unwrap();
        Ok(DynamicsEnsemble {
            members,
            norm: Normalizer { s_mean, s_std, a_mean, a_std, d_std },
        })
    }
}

/// Trains K members on the accumulated dataset (Adam on mean squared
/// next-state error), each on its own shuffle ordering and init, with early
/// stopping on shared held-out validation data.
pub fn train_ensemble(
    d_all: &Dataset,
    cfg: &DynamicsConfig,
) -> Result<(DynamicsEnsemble, Vec<MemberReport>)> {
    if d_all.len() < 10 * cfg.k {
        return Err(BremenError::Dataset(format!(
            "train_ensemble needs at least {} transitions, have {}",
            10 * cfg.k,
            d_all.len()
        )));
    }
    let (train, val) = d_all.split_train_val((2, 1), cfg.seed ^ 0x5851_f42d_4c95_7f2d)?;
    let norm = Normalizer::fit(d_all);
    let sd = d_all.state_dim();
    let ad = d_all.action_dim();

    let build_xy = |d: &Dataset| -> (Matrix, Matrix) {
        let n = d.len();
        let mut x = Vec::with_capacity(n * (sd + ad));
        let mut y = Vec::with_capacity(n * sd);
        for t in d.transitions() {
            norm.norm_input(&t.s, &t.a, &mut x);
            for i in 0..sd {
                y.push((t.s_next[i] - t.s[i]) / norm.d_std[i]);
            }
        }
        (
            Matrix::new(n, sd + ad, x).unwrap(),
            Matrix::new(n, sd, y).unwrap(),
        )
    };
    let (train_x, train_y) = build_xy(&train);
    let (val_x, val_y) = build_xy(&val);

    let mut dims = vec![sd + ad];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(sd);

    let results: Vec<Result<(MlpParams, MemberReport)>> = exec::map_indexed(cfg.k, |member| {
        train_member(
            member,
            cfg,
            &dims,
            &train_x,
            &train_y,
            &val_x,
            &val_y,
            &norm,
        )
    });
    let mut members = Vec::with_capacity(cfg.k);
    let mut reports = Vec::with_capacity(cfg.k);
    for r in results {
        let (m, rep) = r?;
        members.push(m);
        reports.push(rep);
    }
    Ok((DynamicsEnsemble { members, norm }, reports))
}

#[allow(clippy::too_many_arguments)]
fn train_member(
    member: usize,
    cfg: &DynamicsConfig,
    dims: &[usize],
    train_x: &Matrix,
    train_y: &Matrix,
    val_x: &Matrix,
    val_y: &Matrix,
    norm: &Normalizer,
) -> Result<(MlpParams, MemberReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(member as u64 + 1),
    );
    let mut net = MlpParams::init(dims, &mut rng);
    let mut adam = AdamState::new(net.param_count(), cfg.learning_rate);
    let n = train_x.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut stall = 0;
    let batch = cfg.minibatch.max(1);

    for epoch in 0..cfg.max_epochs {
        fisher_yates(&mut order, &mut rng);
        for chunk in order.chunks(batch) {
            let x = Matrix::from_rows(
                &chunk.iter().map(|&i| train_x.row(i).to_vec()).collect::<Vec<_>>(),
            );
            let y = Matrix::from_rows(
                &chunk.iter().map(|&i| train_y.row(i).to_vec()).collect::<Vec<_>>(),
            );
            let acts = net.forward_cached(&x)?;
            let out = acts.last().unwrap();
            let rows = x.rows() as f64;
            let mut upstream = Matrix::zeros(out.rows(), out.cols());
            let mut loss = 0.0;
            for r in 0..out.rows() {
                for c in 0..out.cols() {
                    let e = out.get(r, c) - y.get(r, c);
                    loss += 0.5 * e * e;
                    upstream.set(r, c, e / rows);
                }
            }
            if !loss.is_finite() {
                return Err(BremenError::Diverged(format!(
                    "member {member}: non-finite dynamics loss at epoch {epoch}"
                )));
            }
            let grad = net.backward_from_cache(&x, &acts, &upstream)?;
            let mut flat = net.flatten();
            adam.step(&mut flat, &grad)?;
            net.set_flat(&flat)?;
        }
        let val_mse = normalized_mse(&net, val_x, val_y)?;
        if val_mse < best.0 - 1e-12 {
            best = (val_mse, net.clone(), epoch + 1);
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_net, epochs) = best;
    let train_mse = normalized_mse(&best_net, train_x, train_y)?;
    // raw-space validation MSE: scale normalized per-dim errors back up
    let out = best_net.forward(val_x)?;
    let sd = val_y.cols();
    let mut acc = 0.0;
    for r in 0..val_y.rows() {
        for c in 0..sd {
            let e = (out.get(r, c) - val_y.get(r, c)) * norm.d_std[c];
            acc += e * e;
        }
    }
    let val_mse = acc / (val_y.rows() * sd) as f64;
    Ok((
        best_net,
        MemberReport { train_mse, val_mse, epochs },
    ))
}

fn normalized_mse(net: &MlpParams, x: &Matrix, y: &Matrix) -> Result<f64> {
    let out = net.forward(x)?;
    let mut acc = 0.0;
    for (p, t) in out.data().iter().zip(y.data()) {
        let e = p - t;
        acc += e * e;
    }
    Ok(acc / y.data().len() as f64)
}

/// One imagined trajectory. `states` has one more entry than the per-step
/// vectors; `actions` are pre-clip samples (densities are evaluated there,
/// dynamics and rewards use the clipped values).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub member_idx: Vec<usize>,
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    /// Branches truncated because an imagined state went non-finite.
    pub incidents: usize,
}

impl RolloutBatch {
    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn member_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for t in &self.trajectories {
            for &m in &t.member_idx {
                counts[m] += 1;
            }
        }
        counts
    }

    /// All per-step states flattened in trajectory order, as a matrix.
    pub fn step_states(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self
            .trajectories
            .iter()
            .flat_map(|t| t.states[..t.len()].iter().cloned())
            .collect();
        Matrix::from_rows(&rows)
    }

    pub fn step_actions(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self
            .trajectories
            .iter()
            .flat_map(|t| t.actions.iter().cloned())
            .collect();
        Matrix::from_rows(&rows)
    }

    pub fn step_log_probs(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .flat_map(|t| t.log_probs.iter().copied())
            .collect()
    }

    pub fn mean_return(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .trajectories
            .iter()
            .map(|t| t.rewards.iter().sum::<f64>())
            .sum();
        total / self.trajectories.len() as f64
    }
}

/// Generates imagined trajectories from the given start states: actions
/// sampled from the policy, next states from a member drawn uniformly and
/// independently at every step, rewards and termination from the env's
/// known functions only.
pub fn rollout_wave(
    ens: &DynamicsEnsemble,
    policy: &GaussianMlpPolicy,
    spec: &EnvSpec,
    start_states: &[Vec<f64>],
    length: usize,
    seed: u64,
) -> Result<RolloutBatch> {
    if length == 0 {
        return Err(BremenError::Config("rollout length must be >= 1".into()));
    }
    let k = ens.k();
    let n = start_states.len();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(i as u64),
            )
        })
        .collect();
    let mut trajs: Vec<Trajectory> = start_states
        .iter()
        .map(|s| Trajectory {
            states: vec![s.clone()],
            actions: Vec::new(),
            rewards: Vec::new(),
            log_probs: Vec::new(),
            member_idx: Vec::new(),
            terminated: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut incidents = 0;

    for _ in 0..length {
        if active.is_empty() {
            break;
        }
        let states = Matrix::from_rows(
            &active
                .iter()
                .map(|&i| trajs[i].states.last().unwrap().clone())
                .collect::<Vec<_>>(),
        );
        let means = policy.mean_actions(&states)?;
        let ad = policy.action_dim();
        let mut preclip = Matrix::zeros(active.len(), ad);
        let mut clipped = Matrix::zeros(active.len(), ad);
        let mut members = Vec::with_capacity(active.len());
        for (row, &branch) in active.iter().enumerate() {
            let rng = &mut rngs[branch];
            let mut lp = 0.0;
            for d in 0..ad {
                let sd = policy.sigma[d];
                let z = standard_normal(rng);
                let eps = sd * z;
                let a = means.get(row, d) + eps;
                preclip.set(row, d, a);
                clipped.set(row, d, a.clamp(-1.0, 1.0));
                lp += -(sd.ln() + 0.5 * crate::policy::LN_2PI) - eps * eps / (2.0 * sd * sd);
            }
            let member = rng.gen_range(0..k);
            members.push(member);
            trajs[branch].log_probs.push(lp);
            trajs[branch].actions.push(preclip.row(row).to_vec());
            trajs[branch].member_idx.push(member);
            let r_step = spec.reward_fn(trajs[branch].states.last().unwrap(), clipped.row(row));
            trajs[branch].rewards.push(r_step);
        }
        // one batched forward per member used this step
        let mut next_rows: Vec<Vec<f64>> = vec![Vec::new(); active.len()];
        for m in 0..k {
            let rows: Vec<usize> = (0..active.len()).filter(|&r| members[r] == m).collect();
            if rows.is_empty() {
                continue;
            }
            let s = Matrix::from_rows(&rows.iter().map(|&r| states.row(r).to_vec()).collect::<Vec<_>>());
            let a = Matrix::from_rows(&rows.iter().map(|&r| clipped.row(r).to_vec()).collect::<Vec<_>>());
            let next = ens.predict_batch(m, &s, &a)?;
            for (j, &r) in rows.iter().enumerate() {
                next_rows[r] = next.row(j).to_vec();
            }
        }
        let mut still_active = Vec::with_capacity(active.len());
        for (row, &branch) in active.iter().enumerate() {
            let next = std::mem::take(&mut next_rows[row]);
            if next.iter().any(|v| !v.is_finite()) {
                incidents += 1;
                trajs[branch].terminated = true; // cut the branch, keep its steps
                continue;
            }
            let terminated = spec.termination_fn(&next);
            trajs[branch].states.push(next);
            if terminated {
                trajs[branch].terminated = true;
            } else {
                still_active.push(branch);
            }
        }
        active = still_active;
    }

    Ok(RolloutBatch { trajectories: trajs, incidents })
}

/// Rollout driver: samples start states uniformly from the accumulated
/// dataset and generates waves of branches until at least `min_steps`
/// imagined steps are collected.
pub fn imaginary_rollout(
    ens: &DynamicsEnsemble,
    policy: &GaussianMlpPolicy,
    spec: &EnvSpec,
    d_all: &Dataset,
    length: usize,
    min_steps: usize,
    seed: u64,
) -> Result<RolloutBatch> {
    let mut batch = RolloutBatch::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5_4a32_d192_ed03);
    let mut wave = 0u64;
    while batch.total_steps() < min_steps {
        let deficit = min_steps - batch.total_steps();
        let n_branches = deficit.div_ceil(length).max(1);
        let starts: Vec<Vec<f64>> = (0..n_branches)
            .map(|_| {
                let i = rng.gen_range(0..d_all.len());
                d_all.transitions()[i].s.clone()
            })
            .collect();
        let w = rollout_wave(ens, policy, spec, &starts, length, seed.wrapping_add(wave))?;
        batch.incidents += w.incidents;
        batch.trajectories.extend(w.trajectories);
        wave += 1;
        if wave > 10_000 {
            return Err(BremenError::Diverged(
                "imaginary_rollout cannot reach the requested step count".into(),
            ));
        }
    }
    Ok(batch)
}

/// Deterministic in-model evaluation: mean actions, per-step uniform
/// member selection, mean return over the given start states. Used for
/// offline policy selection; touches no real environment.
pub fn model_eval(
    ens: &DynamicsEnsemble,
    policy: &GaussianMlpPolicy,
    spec: &EnvSpec,
    start_states: &[Vec<f64>],
    length: usize,
    seed: u64,
) -> Result<f64> {
    let mut quiet = policy.clone();
    for s in quiet.sigma.iter_mut() {
        *s = 1e-9;
    }
    let batch = rollout_wave(ens, &quiet, spec, start_states, length, seed)?;
    Ok(batch.mean_return())
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}
