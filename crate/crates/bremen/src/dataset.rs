//! Transition storage: the accumulated dataset (all deployments) and the
//! latest batch, persistence in a binary columnar format, train/validation
//! splitting, and noise-corrupted dataset synthesis.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::EnvSpec;
use crate::error::{BremenError, Result};
use crate::nn::{read_f64, read_u32};
use crate::policy::{fisher_yates, GaussianMlpPolicy};

pub const DATASET_MAGIC: &[u8; 4] = b"BRDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    /// 1-based index of the deployment that collected this transition.
    pub deployment_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    transitions: Vec<Transition>,
    env_id: String,
    state_dim: usize,
    action_dim: usize,
    pub seed: u64,
    pub policy_hash: u64,
    pub noise_scheme: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScheme {
    Eps1,
    Eps3,
    Gaussian1,
    Gaussian3,
    Random,
}

impl NoiseScheme {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "eps1" => Ok(NoiseScheme::Eps1),
            "eps3" => Ok(NoiseScheme::Eps3),
            "gaussian1" => Ok(NoiseScheme::Gaussian1),
            "gaussian3" => Ok(NoiseScheme::Gaussian3),
            "random" => Ok(NoiseScheme::Random),
            other => Err(BremenError::Config(format!("unknown noise scheme '{other}'"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            NoiseScheme::Eps1 => "eps1",
            NoiseScheme::Eps3 => "eps3",
            NoiseScheme::Gaussian1 => "gaussian1",
            NoiseScheme::Gaussian3 => "gaussian3",
            NoiseScheme::Random => "random",
        }
    }
}

impl Dataset {
    pub fn new(env_id: &str, state_dim: usize, action_dim: usize) -> Self {
        Dataset {
            transitions: Vec::new(),
            env_id: env_id.to_string(),
            state_dim,
            action_dim,
            seed: 0,
            policy_hash: 0,
            noise_scheme: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn reverse(&mut self) {
        self.transitions.reverse();
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.s.len() != self.state_dim
            || t.s_next.len() != self.state_dim
            || t.a.len() != self.action_dim
        {
            return Err(BremenError::shape(
                "Dataset::push",
                format!("s:{} a:{}", self.state_dim, self.action_dim),
                format!("s:{} a:{}", t.s.len(), t.a.len()),
            ));
        }
        if !t.r.is_finite() {
            return Err(BremenError::NonFinite("transition reward".into()));
        }
        self.transitions.push(t);
        Ok(())
    }

    /// Appends the latest deployment batch to the accumulated dataset.
    /// Deployment indices must not go backwards.
    pub fn append_batch(&mut self, batch: &Dataset) -> Result<()> {
        if batch.is_empty() {
            return Err(BremenError::Dataset("append_batch: empty batch".into()));
        }
        if batch.state_dim != self.state_dim || batch.action_dim != self.action_dim {
            return Err(BremenError::shape(
                "append_batch",
                format!("s:{} a:{}", self.state_dim, self.action_dim),
                format!("s:{} a:{}", batch.state_dim, batch.action_dim),
            ));
        }
        let last = self.transitions.last().map(|t| t.deployment_index).unwrap_or(0);
        let incoming = batch.transitions.iter().map(|t| t.deployment_index).min().unwrap();
        if incoming < last {
            return Err(BremenError::Dataset(format!(
                "append_batch: deployment index went backwards ({incoming} < {last})"
            )));
        }
        self.transitions.extend(batch.transitions.iter().cloned());
        Ok(())
    }

    /// Disjoint train/validation split by seeded shuffle; `ratio` is
    /// (train parts, val parts), train size rounded up.
    pub fn split_train_val(&self, ratio: (usize, usize), seed: u64) -> Result<(Dataset, Dataset)> {
        if self.len() < 3 {
            return Err(BremenError::Dataset(format!(
                "split_train_val needs at least 3 transitions, have {}",
                self.len()
            )));
        }
        if ratio.0 == 0 || ratio.1 == 0 {
            return Err(BremenError::Config("split ratio parts must be positive".into()));
        }
        let n = self.len();
        let n_train = (n * ratio.0).div_ceil(ratio.0 + ratio.1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fisher_yates(&mut order, &mut rng);
        let mut train = self.meta_clone();
        let mut val = self.meta_clone();
        for (i, &idx) in order.iter().enumerate() {
            let t = self.transitions[idx].clone();
            if i < n_train {
                train.transitions.push(t);
            } else {
                val.transitions.push(t);
            }
        }
        Ok((train, val))
    }

    fn meta_clone(&self) -> Dataset {
        Dataset {
            transitions: Vec::new(),
            env_id: self.env_id.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            seed: self.seed,
            policy_hash: self.policy_hash,
            noise_scheme: self.noise_scheme.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.action_dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        write_str(&mut w, &self.env_id)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.policy_hash.to_le_bytes())?;
        write_str(&mut w, &self.noise_scheme)?;
        // columnar: states, actions, rewards, next states, dones, deployment
        for t in &self.transitions {
            for v in &t.s {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for t in &self.transitions {
            for v in &t.a {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for t in &self.transitions {
            w.write_all(&t.r.to_le_bytes())?;
        }
        for t in &self.transitions {
            for v in &t.s_next {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for t in &self.transitions {
            w.write_all(&[t.done as u8])?;
        }
        for t in &self.transitions {
            w.write_all(&t.deployment_index.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| BremenError::Format("truncated dataset header".into()))?;
        if &magic != DATASET_MAGIC {
            return Err(BremenError::Format("bad dataset magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(BremenError::Format(format!("unsupported dataset version {version}")));
        }
        let state_dim = read_u32(&mut r)? as usize;
        let action_dim = read_u32(&mut r)? as usize;
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)
            .map_err(|_| BremenError::Format("truncated dataset count".into()))?;
        let count = u64::from_le_bytes(buf8) as usize;
        let env_id = read_str(&mut r)?;
        r.read_exact(&mut buf8)
            .map_err(|_| BremenError::Format("truncated dataset seed".into()))?;
        let seed = u64::from_le_bytes(buf8);
        r.read_exact(&mut buf8)
            .map_err(|_| BremenError::Format("truncated dataset policy hash".into()))?;
        let policy_hash = u64::from_le_bytes(buf8);
        let noise_scheme = read_str(&mut r)?;

        let mut states = vec![0.0; count * state_dim];
        for v in states.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let mut actions = vec![0.0; count * action_dim];
        for v in actions.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let mut rewards = vec![0.0; count];
        for v in rewards.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let mut nexts = vec![0.0; count * state_dim];
        for v in nexts.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let mut dones = vec![0u8; count];
        r.read_exact(&mut dones)
            .map_err(|_| BremenError::Format("truncated dataset dones".into()))?;
        let mut deployments = Vec::with_capacity(count);
        for _ in 0..count {
            deployments.push(read_u32(&mut r)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(BremenError::Format("trailing bytes in dataset file".into()));
        }

        let mut d = Dataset {
            transitions: Vec::with_capacity(count),
            env_id,
            state_dim,
            action_dim,
            seed,
            policy_hash,
            noise_scheme,
        };
        for i in 0..count {
            d.transitions.push(Transition {
                s: states[i * state_dim..(i + 1) * state_dim].to_vec(),
                a: actions[i * action_dim..(i + 1) * action_dim].to_vec(),
                r: rewards[i],
                s_next: nexts[i * state_dim..(i + 1) * state_dim].to_vec(),
                done: dones[i] != 0,
                deployment_index: deployments[i],
            });
        }
        Ok(d)
    }

    /// Human-inspectable JSON-lines export, one transition per line.
    pub fn export_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.transitions {
            let row = serde_json::json!({
                "s": t.s,
                "a": t.a,
                "r": t.r,
                "s_next": t.s_next,
                "done": t.done,
                "deployment": t.deployment_index,
            });
            writeln!(w, "{row}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(BremenError::Format("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| BremenError::Format("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| BremenError::Format("invalid utf-8 string".into()))
}

/// Collects `size` transitions under the given noise scheme, in contiguous
/// segments (behavior policy, noisy variant, uniform random).
pub fn synthesize_noisy_dataset(
    spec: &EnvSpec,
    behavior_policy: &GaussianMlpPolicy,
    scheme: NoiseScheme,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::new(spec.kind.id(), spec.state_dim(), spec.action_dim());
    d.seed = seed;
    d.policy_hash = behavior_policy.params_hash();
    d.noise_scheme = scheme.id().to_string();

    let (n_behavior, n_noisy) = match scheme {
        NoiseScheme::Random => (0, 0),
        _ => {
            let nb = (size as f64 * 0.4).round() as usize;
            (nb, nb)
        }
    };

    let mut st = spec.reset(&mut rng);
    for i in 0..size {
        let action: Vec<f64> = if i < n_behavior {
            behavior_policy.act(&st.state, &mut rng)?.0
        } else if i < n_behavior + n_noisy {
            match scheme {
                NoiseScheme::Eps1 | NoiseScheme::Eps3 => {
                    let eps = if scheme == NoiseScheme::Eps1 { 0.1 } else { 0.3 };
                    if rng.gen::<f64>() < eps {
                        uniform_action(spec, &mut rng)
                    } else {
                        behavior_policy.act(&st.state, &mut rng)?.0
                    }
                }
                NoiseScheme::Gaussian1 | NoiseScheme::Gaussian3 => {
                    let noise_std = if scheme == NoiseScheme::Gaussian1 { 0.1 } else { 0.3 };
                    let mean = behavior_policy.mean_action(&st.state)?;
                    mean.iter()
                        .map(|m| {
                            let z: f64 = standard_normal(&mut rng);
                            (m + noise_std * z).clamp(-1.0, 1.0)
                        })
                        .collect()
                }
                NoiseScheme::Random => unreachable!(),
            }
        } else {
            uniform_action(spec, &mut rng)
        };
        let (next, r, done) = spec.step(&st, &action)?;
        d.push(Transition {
            s: st.state.clone(),
            a: action,
            r,
            s_next: next.state.clone(),
            done,
            deployment_index: 1,
        })?;
        st = if done { spec.reset(&mut rng) } else { next };
    }
    Ok(d)
}

fn uniform_action<R: Rng>(spec: &EnvSpec, rng: &mut R) -> Vec<f64> {
    (0..spec.action_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()
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
