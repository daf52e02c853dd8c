//! Analytic continuous-control environments.
//!
//! Reward and termination are pure functions of (state, action), so they can
//! be evaluated on model-imagined states during rollouts without any
//! environment internals. Actions are clipped to [-1, 1] on every step.

use rand::Rng;

use crate::error::{BremenError, Result};
use crate::linalg::Matrix;

pub const POINT_MASS_DT: f64 = 0.05;
pub const PENDULUM_DT: f64 = 0.02;
pub const PENDULUM_DAMPING: f64 = 0.3;
pub const PENDULUM_GRAVITY: f64 = 10.0;
pub const PENDULUM_TORQUE: f64 = 2.0;
pub const GATE_WALKER_DT: f64 = 0.05;
pub const GATE_WALKER_BAND: (f64, f64) = (0.3, 1.7);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    /// 2-D double integrator, s = (px, py, vx, vy), quadratic cost.
    PointMassLqr,
    /// Damped torque-limited pendulum, s = (theta, theta_dot).
    Pendulum,
    /// 1-D locomotion toy with a height band termination,
    /// s = (x, x_dot, height).
    GateWalker,
}

impl EnvKind {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "pointmass" => Ok(EnvKind::PointMassLqr),
            "pendulum" => Ok(EnvKind::Pendulum),
            "gatewalker" => Ok(EnvKind::GateWalker),
            other => Err(BremenError::Config(format!("unknown env id '{other}'"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            EnvKind::PointMassLqr => "pointmass",
            EnvKind::Pendulum => "pendulum",
            EnvKind::GateWalker => "gatewalker",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub state: Vec<f64>,
    pub step: usize,
}

impl EnvSpec {
    pub fn new(kind: EnvKind, horizon: usize) -> Self {
        assert!(horizon >= 1);
        EnvSpec { kind, horizon }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointMassLqr => 4,
            EnvKind::Pendulum => 2,
            EnvKind::GateWalker => 3,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointMassLqr => 2,
            EnvKind::Pendulum => 1,
            EnvKind::GateWalker => 2,
        }
    }

    /// Double-integrator transition matrix for the LQR env.
    pub fn lqr_a(&self) -> Matrix {
        let dt = POINT_MASS_DT;
        Matrix::from_rows(&[
            vec![1.0, 0.0, dt, 0.0],
            vec![0.0, 1.0, 0.0, dt],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
    }

    pub fn lqr_b(&self) -> Matrix {
        let dt = POINT_MASS_DT;
        Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![dt, 0.0],
            vec![0.0, dt],
        ])
    }

    /// State cost weights, diagonal.
    pub fn lqr_q(&self) -> Matrix {
        let mut q = Matrix::zeros(4, 4);
        for (i, v) in [1.0, 1.0, 0.1, 0.1].iter().enumerate() {
            q.set(i, i, *v);
        }
        q
    }

    /// Control cost weights; sized so the unconstrained optimal controller
    /// stays inside the [-1, 1] action bounds from the reset distribution.
    pub fn lqr_r(&self) -> Matrix {
        let mut r = Matrix::zeros(2, 2);
        r.set(0, 0, 0.5);
        r.set(1, 1, 0.5);
        r
    }

    pub fn reset<R: Rng>(&self, rng: &mut R) -> EnvState {
        let state = match self.kind {
            EnvKind::PointMassLqr => vec![
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            ],
            EnvKind::Pendulum => vec![
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                rng.gen_range(-1.0..1.0),
            ],
            EnvKind::GateWalker => vec![
                0.0,
                rng.gen_range(-0.1..0.1),
                1.0 + rng.gen_range(-0.05..0.05),
            ],
        };
        EnvState { state, step: 0 }
    }

    /// One transition. The action is clipped to the bounds before use. The
    /// returned flag is true on termination or when the horizon is hit.
    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<(EnvState, f64, bool)> {
        if action.len() != self.action_dim() {
            return Err(BremenError::shape("env_step", self.action_dim(), action.len()));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(BremenError::NonFinite("env_step action".into()));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let reward = self.reward_fn(&state.state, &a);
        let next = self.transition(&state.state, &a);
        let step = state.step + 1;
        let done = self.termination_fn(&next) || step >= self.horizon;
        Ok((EnvState { state: next, step }, reward, done))
    }

    /// Analytic dynamics, pure in (state, action).
    pub fn transition(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self.kind {
            EnvKind::PointMassLqr => {
                let dt = POINT_MASS_DT;
                vec![
                    s[0] + dt * s[2],
                    s[1] + dt * s[3],
                    s[2] + dt * a[0],
                    s[3] + dt * a[1],
                ]
            }
            EnvKind::Pendulum => {
                // semi-implicit Euler with viscous damping
                let dt = PENDULUM_DT;
                let (theta, omega) = (s[0], s[1]);
                let torque = PENDULUM_TORQUE * a[0];
                let omega_next =
                    omega + dt * (-PENDULUM_GRAVITY * theta.sin() - PENDULUM_DAMPING * omega + torque);
                let theta_next = theta + dt * omega_next;
                vec![theta_next, omega_next]
            }
            EnvKind::GateWalker => {
                let dt = GATE_WALKER_DT;
                vec![
                    s[0] + dt * s[1],
                    s[1] + dt * (a[0] - 0.2 * s[1]),
                    s[2] + dt * (a[1] - 0.5 * (s[2] - 1.0)),
                ]
            }
        }
    }

    /// Known reward, callable on arbitrary (including imagined) states.
    pub fn reward_fn(&self, s: &[f64], a: &[f64]) -> f64 {
        match self.kind {
            EnvKind::PointMassLqr => {
                let q = [1.0, 1.0, 0.1, 0.1];
                let r = [0.5, 0.5];
                let state_cost: f64 = s.iter().zip(&q).map(|(x, w)| w * x * x).sum();
                let action_cost: f64 = a.iter().zip(&r).map(|(x, w)| w * x * x).sum();
                -(state_cost + action_cost)
            }
            EnvKind::Pendulum => {
                let angle = wrap_angle(s[0]);
                -(angle * angle + 0.1 * s[1] * s[1] + 0.001 * a[0] * a[0])
            }
            EnvKind::GateWalker => {
                let action_sq: f64 = a.iter().map(|x| x * x).sum();
                s[1] - 0.001 * action_sq + 1.0
            }
        }
    }

    /// Pure termination predicate on the state alone.
    pub fn termination_fn(&self, s: &[f64]) -> bool {
        match self.kind {
            EnvKind::PointMassLqr | EnvKind::Pendulum => false,
            EnvKind::GateWalker => {
                let h = s[2];
                h <= GATE_WALKER_BAND.0 || h >= GATE_WALKER_BAND.1
            }
        }
    }

    pub fn pendulum_energy(&self, s: &[f64]) -> f64 {
        0.5 * s[1] * s[1] + PENDULUM_GRAVITY * (1.0 - s[0].cos())
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = (theta + std::f64::consts::PI) % two_pi;
    if t < 0.0 {
        t += two_pi;
    }
    t - std::f64::consts::PI
}

/// Env wrapper that counts true-environment transitions, for the offline /
/// deployment audits.
#[derive(Debug)]
pub struct CountingEnv {
    pub spec: EnvSpec,
    steps: u64,
}

impl CountingEnv {
    pub fn new(spec: EnvSpec) -> Self {
        CountingEnv { spec, steps: 0 }
    }

    pub fn reset<R: Rng>(&self, rng: &mut R) -> EnvState {
        self.spec.reset(rng)
    }

    pub fn step(&mut self, state: &EnvState, action: &[f64]) -> Result<(EnvState, f64, bool)> {
        self.steps += 1;
        self.spec.step(state, action)
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reset_deterministic_under_seed() {
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 200);
        let a = spec.reset(&mut ChaCha8Rng::seed_from_u64(3)).state;
        let b = spec.reset(&mut ChaCha8Rng::seed_from_u64(3)).state;
        assert_eq!(a, b);
    }

    #[test]
    fn reset_differs_across_seeds() {
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 200);
        let a = spec.reset(&mut ChaCha8Rng::seed_from_u64(1)).state;
        let b = spec.reset(&mut ChaCha8Rng::seed_from_u64(2)).state;
        assert_ne!(a, b);
    }

    #[test]
    fn pendulum_reset_in_range() {
        let spec = EnvSpec::new(EnvKind::Pendulum, 200);
        for seed in 0..50 {
            let s = spec.reset(&mut ChaCha8Rng::seed_from_u64(seed)).state;
            assert!(s[0].abs() <= std::f64::consts::PI);
            assert!(s[1].abs() <= 1.0);
        }
    }

    #[test]
    fn point_mass_origin_fixed_point() {
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 200);
        let st = EnvState { state: vec![0.0; 4], step: 0 };
        let (next, r, done) = spec.step(&st, &[0.0, 0.0]).unwrap();
        assert_eq!(next.state, vec![0.0; 4]);
        assert_eq!(r, 0.0);
        assert!(!done);
    }

    #[test]
    fn gate_walker_velocity_reward() {
        // x_dot = 1, a = 0 -> reward = 1 - 0 + 1 = 2
        let spec = EnvSpec::new(EnvKind::GateWalker, 200);
        assert_eq!(spec.reward_fn(&[0.0, 1.0, 1.0], &[0.0, 0.0]), 2.0);
    }

    #[test]
    fn point_mass_never_terminates() {
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 200);
        assert!(!spec.termination_fn(&[100.0, 100.0, 100.0, 100.0]));
    }

    #[test]
    fn zero_state_zero_reward() {
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 200);
        assert_eq!(spec.reward_fn(&[0.0; 4], &[0.0; 2]), 0.0);
    }

    #[test]
    fn gate_walker_band_termination() {
        let spec = EnvSpec::new(EnvKind::GateWalker, 200);
        assert!(spec.termination_fn(&[0.0, 0.0, 0.2]));
        assert!(spec.termination_fn(&[0.0, 0.0, 1.8]));
        assert!(!spec.termination_fn(&[0.0, 0.0, 1.0]));
    }

    #[test]
    fn pendulum_energy_dissipates_unforced() {
        let spec = EnvSpec::new(EnvKind::Pendulum, 100_000);
        let mut st = EnvState { state: vec![2.0, 0.5], step: 0 };
        let mut energy = spec.pendulum_energy(&st.state);
        for _ in 0..1000 {
            let (next, _, _) = spec.step(&st, &[0.0]).unwrap();
            let e = spec.pendulum_energy(&next.state);
            assert!(
                e <= energy + 1e-9,
                "energy increased: {energy} -> {e} at state {:?}",
                next.state
            );
            energy = e;
            st = next;
        }
    }

    #[test]
    fn step_is_pure() {
        let spec = EnvSpec::new(EnvKind::Pendulum, 200);
        let st = EnvState { state: vec![1.0, -0.5], step: 3 };
        let (n1, r1, d1) = spec.step(&st, &[0.3]).unwrap();
        let (n2, r2, d2) = spec.step(&st, &[0.3]).unwrap();
        assert_eq!(n1.state, n2.state);
        assert_eq!(r1, r2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn non_finite_action_rejected() {
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 200);
        let st = EnvState { state: vec![0.0; 4], step: 0 };
        assert!(spec.step(&st, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn horizon_hits_done() {
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 3);
        let mut st = EnvState { state: vec![0.1; 4], step: 0 };
        let mut done = false;
        for _ in 0..3 {
            let (next, _, d) = spec.step(&st, &[0.0, 0.0]).unwrap();
            st = next;
            done = d;
        }
        assert!(done);
    }
}
