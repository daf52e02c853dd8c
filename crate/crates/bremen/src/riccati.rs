//! Discrete-time Riccati solvers for the PointMassLQR optimality oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{EnvKind, EnvSpec};
use crate::error::{BremenError, Result};
use crate::linalg::{quadratic_form, solve, Matrix};

const MAX_ITERS: usize = 200_000;

/// Fixed point of the discounted discrete-time Riccati equation, to
/// `tol` in max-abs element difference. Cost convention: sum of
/// gamma^t (s'Qs + a'Ra), minimized.
pub fn discounted_riccati(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    gamma: f64,
    tol: f64,
) -> Result<Matrix> {
    let mut p = q.clone();
    for _ in 0..MAX_ITERS {
        let next = riccati_backup(a, b, q, r, &p, gamma)?;
        let diff = next.max_abs_diff(&p);
        p = next;
        if diff < tol {
            return Ok(p);
        }
    }
    Err(BremenError::RiccatiDiverged(MAX_ITERS))
}

/// One backward step: P' = Q + K'RK + gamma (A-BK)' P (A-BK) with the
/// minimizing gain K = gamma (R + gamma B'PB)^-1 B'PA. A singular inner
/// matrix (e.g. P = 0 with R = 0) falls back to K = 0.
fn riccati_backup(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    p: &Matrix,
    gamma: f64,
) -> Result<Matrix> {
    let k = optimal_gain(a, b, r, p, gamma)?;
    let closed = a.sub(&b.matmul(&k));
    let ctrl_cost = k.transpose().matmul(&r.matmul(&k));
    Ok(q
        .add(&ctrl_cost)
        .add(&closed.transpose().matmul(&p.matmul(&closed)).scale(gamma)))
}

/// Minimizing feedback gain for value matrix `p`: a = -K s.
pub fn optimal_gain(
    a: &Matrix,
    b: &Matrix,
    r: &Matrix,
    p: &Matrix,
    gamma: f64,
) -> Result<Matrix> {
    let btp = b.transpose().matmul(p);
    let inner = r.add(&btp.matmul(b).scale(gamma));
    let rhs = btp.matmul(a).scale(gamma);
    match solve(&inner, &rhs) {
        Ok(k) => Ok(k),
        // degenerate inner matrix: no controllable direction yet
        Err(_) => Ok(Matrix::zeros(b.cols(), a.rows())),
    }
}

/// Finite-horizon undiscounted cost-to-go matrix at t=0 by backward
/// induction over `horizon` steps with zero terminal cost.
pub fn finite_horizon_value(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    horizon: usize,
) -> Result<Matrix> {
    let mut p = Matrix::zeros(a.rows(), a.rows());
    for _ in 0..horizon {
        p = riccati_backup(a, b, q, r, &p, 1.0)?;
    }
    Ok(p)
}

fn require_lqr(spec: &EnvSpec) -> Result<()> {
    if spec.kind != EnvKind::PointMassLqr {
        return Err(BremenError::Config(
            "optimality oracle only exists for the pointmass env".into(),
        ));
    }
    Ok(())
}

/// Discounted optimal return from the reset distribution: the negative of
/// E[s0' P s0] averaged over 1,000 reset samples (Riccati to 1e-10).
pub fn oracle_optimal_return(spec: &EnvSpec, gamma: f64, seed: u64) -> Result<f64> {
    require_lqr(spec)?;
    let p = discounted_riccati(
        &spec.lqr_a(),
        &spec.lqr_b(),
        &spec.lqr_q(),
        &spec.lqr_r(),
        gamma,
        1e-10,
    )?;
    Ok(-mean_initial_cost(spec, &p, seed))
}

/// Undiscounted finite-horizon analog of the oracle, matching the
/// evaluation protocol (cumulative reward over the env horizon).
pub fn oracle_optimal_return_undiscounted(spec: &EnvSpec, seed: u64) -> Result<f64> {
    require_lqr(spec)?;
    let p = finite_horizon_value(
        &spec.lqr_a(),
        &spec.lqr_b(),
        &spec.lqr_q(),
        &spec.lqr_r(),
        spec.horizon,
    )?;
    Ok(-mean_initial_cost(spec, &p, seed))
}

fn mean_initial_cost(spec: &EnvSpec, p: &Matrix, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1000;
    let mut acc = 0.0;
    for _ in 0..n {
        let s0 = spec.reset(&mut rng).state;
        acc += quadratic_form(p, &s0);
    }
    acc / n as f64
}

/// The stationary optimal feedback gain for the discounted problem; useful
/// as a reference policy in evaluation tests.
pub fn oracle_gain(spec: &EnvSpec, gamma: f64) -> Result<Matrix> {
    require_lqr(spec)?;
    let (a, b, q, r) = (spec.lqr_a(), spec.lqr_b(), spec.lqr_q(), spec.lqr_r());
    let p = discounted_riccati(&a, &b, &q, &r, gamma, 1e-10)?;
    optimal_gain(&a, &b, &r, &p, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_cost_gives_zero_return() {
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 200);
        let q = Matrix::zeros(4, 4);
        let r = Matrix::zeros(2, 2);
        let p = discounted_riccati(&spec.lqr_a(), &spec.lqr_b(), &q, &r, 0.99, 1e-10).unwrap();
        assert!(p.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn scalar_riccati_matches_closed_form_fixed_point() {
        // a=1, b=1, q=1, r=1, gamma=0.99; independent scalar fixed-point
        // iteration as the oracle.
        let a = Matrix::new(1, 1, vec![1.0]).unwrap();
        let b = Matrix::new(1, 1, vec![1.0]).unwrap();
        let q = Matrix::new(1, 1, vec![1.0]).unwrap();
        let r = Matrix::new(1, 1, vec![1.0]).unwrap();
        let gamma = 0.99;
        let p = discounted_riccati(&a, &b, &q, &r, gamma, 1e-12).unwrap();

        let mut ps = 1.0f64;
        for _ in 0..100_000 {
            let k = gamma * ps / (1.0 + gamma * ps);
            let closed = 1.0 - k;
            let next = 1.0 + k * k + gamma * closed * closed * ps;
            if (next - ps).abs() < 1e-13 {
                ps = next;
                break;
            }
            ps = next;
        }
        assert!(
            (p.get(0, 0) - ps).abs() < 1e-9,
            "matrix {} vs scalar {}",
            p.get(0, 0),
            ps
        );
    }

    #[test]
    fn oracle_dominates_random_linear_policies() {
        // Monte-Carlo evaluation of random linear feedback policies never
        // beats the Riccati value (tolerance for MC error).
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 200);
        let gamma = 0.99;
        let opt = oracle_optimal_return(&spec, gamma, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let kdata: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k = Matrix::new(2, 4, kdata).unwrap();
            // discounted MC return of a = -K s over 100 episodes
            let mut total = 0.0;
            let episodes = 100;
            for _ in 0..episodes {
                let mut st = spec.reset(&mut rng);
                let mut disc = 1.0;
                let mut ret = 0.0;
                loop {
                    let s = &st.state;
                    let act: Vec<f64> = (0..2)
                        .map(|i| -(0..4).map(|j| k.get(i, j) * s[j]).sum::<f64>())
                        .collect();
                    let (next, rew, done) = spec.step(&st, &act).unwrap();
                    ret += disc * rew;
                    disc *= gamma;
                    if done || disc < 1e-8 {
                        break;
                    }
                    st = next;
                }
                total += ret;
            }
            let avg = total / episodes as f64;
            assert!(
                opt >= avg - 1e-6,
                "oracle {opt} beaten by random policy {avg}"
            );
        }
    }

    #[test]
    fn oracle_actions_stay_in_bounds() {
        // The unconstrained optimal controller must be realizable by the
        // clipped policy class from the reset distribution.
        let spec = EnvSpec::new(EnvKind::PointMassLqr, 200);
        let k = oracle_gain(&spec, 0.99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut max_a: f64 = 0.0;
        for _ in 0..200 {
            let mut st = spec.reset(&mut rng);
            for _ in 0..200 {
                let s = &st.state;
                let act: Vec<f64> = (0..2)
                    .map(|i| -(0..4).map(|j| k.get(i, j) * s[j]).sum::<f64>())
                    .collect();
                for v in &act {
                    max_a = max_a.max(v.abs());
                }
                let (next, _, done) = spec.step(&st, &act).unwrap();
                if done {
                    break;
                }
                st = next;
            }
        }
        assert!(max_a < 1.0, "oracle action magnitude {max_a} saturates");
    }
}
