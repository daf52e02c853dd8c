//! Return-gap guarantees for the learned policy: per-step distribution
//! shift bounds derived from training losses, the resulting lower bound on
//! the true return, and numeric checks of the Pinsker step used to get
//! there.

use crate::dataset::Dataset;
use crate::dynamics::DynamicsEnsemble;
use crate::error::{BremenError, Result};
use crate::linalg::Matrix;
use crate::nn::MlpParams;

const LN_2PI: f64 = crate::policy::LN_2PI;

/// Worst-case (max over samples) squared-error losses that feed the
/// per-step bounds. Max over a finite dataset is the computable proxy for
/// the sup in the analysis.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossEpsilons {
    /// sup of 0.5 ||a - cloned_mean(s)||^2 over the behavior data.
    pub eps_beta: f64,
    /// sup over members of 0.5 ||s' - f(s, a)||^2 over the behavior data.
    pub eps_phi: f64,
}

pub fn estimate_loss_epsilons(
    bc_net: &MlpParams,
    ens: &DynamicsEnsemble,
    d: &Dataset,
) -> Result<LossEpsilons> {
    if d.is_empty() {
        return Err(BremenError::Dataset("loss estimation needs a nonempty dataset".into()));
    }
    let n = d.len();
    let sd = d.state_dim();
    let ad = d.action_dim();
    let mut s_rows = Vec::with_capacity(n);
    let mut a_rows = Vec::with_capacity(n);
    for t in d.transitions() {
        s_rows.push(t.s.clone());
        a_rows.push(t.a.clone());
    }
    let states = Matrix::from_rows(&s_rows);
    let actions = Matrix::from_rows(&a_rows);

    let mut mu = bc_net.forward(&states)?;
    for v in mu.data_mut() {
        *v = v.tanh();
    }
    let mut eps_beta = 0.0f64;
    for r in 0..n {
        let mut loss = 0.0;
        for c in 0..ad {
            let e = actions.get(r, c) - mu.get(r, c);
            loss += 0.5 * e * e;
        }
        eps_beta = eps_beta.max(loss);
    }

    let mut eps_phi = 0.0f64;
    for k in 0..ens.k() {
        let pred = ens.predict_batch(k, &states, &actions)?;
        for (r, t) in d.transitions().iter().enumerate() {
            let mut loss = 0.0;
            for c in 0..sd {
                let e = t.s_next[c] - pred.get(r, c);
                loss += 0.5 * e * e;
            }
            eps_phi = eps_phi.max(loss);
        }
    }
    Ok(LossEpsilons { eps_beta, eps_phi })
}

/// Per-step total-variation bounds on policy and model shift, derived from
/// the training losses through the KL of a unit-variance Gaussian fit and
/// Pinsker's inequality, plus the trust-region drift over `t_iters`
/// updates of KL radius `delta`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ShiftBounds {
    pub eps_pi: f64,
    pub eps_m: f64,
}

pub fn proposition1_bounds(
    eps: &LossEpsilons,
    t_iters: usize,
    delta: f64,
) -> Result<ShiftBounds> {
    if eps.eps_beta < 0.0 || eps.eps_phi < 0.0 {
        return Err(BremenError::Config(format!(
            "losses must be nonnegative: eps_beta={} eps_phi={}",
            eps.eps_beta, eps.eps_phi
        )));
    }
    if delta < 0.0 {
        return Err(BremenError::Config(format!("delta must be >= 0, got {delta}")));
    }
    let rad_pi = 0.5 * eps.eps_beta + 0.25 * LN_2PI;
    let rad_m = 0.5 * eps.eps_phi + 0.25 * LN_2PI;
    if rad_pi < 0.0 || rad_m < 0.0 {
        return Err(BremenError::Config("negative radicand in the shift bound".into()));
    }
    Ok(ShiftBounds {
        eps_pi: rad_pi.sqrt() + t_iters as f64 * (delta / 2.0).sqrt(),
        eps_m: rad_m.sqrt(),
    })
}

/// Lower bound on the true return from the imagined one:
/// eta >= eta_hat - 2 gamma r_max (eps_m + 2 eps_pi) / (1-gamma)^2
///              - 4 r_max eps_pi / (1-gamma).
pub fn return_gap_bound(
    eta_hat: f64,
    shift: &ShiftBounds,
    gamma: f64,
    r_max: f64,
) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(BremenError::Config(format!("gamma must be in [0, 1), got {gamma}")));
    }
    if r_max < 0.0 {
        return Err(BremenError::Config(format!("r_max must be >= 0, got {r_max}")));
    }
    let gap = 2.0 * gamma * r_max * (shift.eps_m + 2.0 * shift.eps_pi) / ((1.0 - gamma) * (1.0 - gamma))
        + 4.0 * r_max * shift.eps_pi / (1.0 - gamma);
    Ok((gap, eta_hat - gap))
}

/// Everything the theory checker reports for one trained run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BoundReport {
    pub eps_beta: f64,
    pub eps_phi: f64,
    pub eps_pi: f64,
    pub eps_m: f64,
    pub t_iters: usize,
    pub delta: f64,
    pub gamma: f64,
    pub r_max: f64,
    pub eta_hat: f64,
    pub gap: f64,
    pub return_lower_bound: f64,
    pub pinsker_violations: usize,
}

pub fn bound_report(
    eps: &LossEpsilons,
    t_iters: usize,
    delta: f64,
    gamma: f64,
    r_max: f64,
    eta_hat: f64,
    pinsker_violations: usize,
) -> Result<BoundReport> {
    let shift = proposition1_bounds(eps, t_iters, delta)?;
    let (gap, lower) = return_gap_bound(eta_hat, &shift, gamma, r_max)?;
    Ok(BoundReport {
        eps_beta: eps.eps_beta,
        eps_phi: eps.eps_phi,
        eps_pi: shift.eps_pi,
        eps_m: shift.eps_m,
        t_iters,
        delta,
        gamma,
        r_max,
        eta_hat,
        gap,
        return_lower_bound: lower,
        pinsker_violations,
    })
}

/// Numeric total variation between two 1-D Gaussians by trapezoid
/// integration of 0.5 |p - q| over +-8 std around both means.
pub fn gaussian_tv_numeric(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let lo = m1.min(m2) - 8.0 * s1.max(s2);
    let hi = m1.max(m2) + 8.0 * s1.max(s2);
    let n = 100_000;
    let h = (hi - lo) / n as f64;
    let pdf = |m: f64, s: f64, x: f64| {
        (-((x - m) * (x - m)) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    };
    let f = |x: f64| 0.5 * (pdf(m1, s1, x) - pdf(m2, s2, x)).abs();
    let mut acc = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        acc += f(lo + i as f64 * h);
    }
    acc * h
}

/// Closed-form KL(N(m1, s1^2) || N(m2, s2^2)).
pub fn gaussian_kl(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    (s2 / s1).ln() + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5
}

/// Verifies D_TV <= sqrt(D_KL / 2) numerically for one Gaussian pair.
/// Returns (tv, kl bound, holds).
pub fn pinsker_tv_check(m1: f64, s1: f64, m2: f64, s2: f64) -> (f64, f64, bool) {
    let tv = gaussian_tv_numeric(m1, s1, m2, s2);
    let bound = (gaussian_kl(m1, s1, m2, s2) / 2.0).sqrt();
    // small slack for the quadrature error
    (tv, bound, tv <= bound + 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_loss_zero_iters_policy_shift() {
        let eps = LossEpsilons { eps_beta: 0.0, eps_phi: 0.0 };
        let shift = proposition1_bounds(&eps, 0, 0.05).unwrap();
        let want = (0.25 * LN_2PI).sqrt();
        assert!((shift.eps_pi - want).abs() < 1e-12);
        assert!((shift.eps_m - want).abs() < 1e-12);
        assert!((want - 0.6778416235392574).abs() < 1e-12);
    }

    #[test]
    fn trust_region_drift_term() {
        let eps = LossEpsilons { eps_beta: 0.0, eps_phi: 0.0 };
        let s0 = proposition1_bounds(&eps, 0, 0.05).unwrap();
        let s10 = proposition1_bounds(&eps, 10, 0.05).unwrap();
        let drift = s10.eps_pi - s0.eps_pi;
        assert!((drift - 10.0 * 0.025f64.sqrt()).abs() < 1e-12);
        assert!((drift - 1.5811388300841895).abs() < 1e-12);
    }

    #[test]
    fn shift_bound_monotone_in_losses() {
        let lo = proposition1_bounds(&LossEpsilons { eps_beta: 0.1, eps_phi: 0.1 }, 5, 0.05).unwrap();
        let hi = proposition1_bounds(&LossEpsilons { eps_beta: 1.0, eps_phi: 1.0 }, 5, 0.05).unwrap();
        assert!(hi.eps_pi > lo.eps_pi);
        assert!(hi.eps_m > lo.eps_m);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let eps = LossEpsilons { eps_beta: -1.0, eps_phi: 0.0 };
        assert!(proposition1_bounds(&eps, 0, 0.05).is_err());
        let ok = LossEpsilons { eps_beta: 0.0, eps_phi: 0.0 };
        assert!(proposition1_bounds(&ok, 0, -0.1).is_err());
        let shift = proposition1_bounds(&ok, 0, 0.05).unwrap();
        assert!(return_gap_bound(0.0, &shift, 1.0, 1.0).is_err());
        assert!(return_gap_bound(0.0, &shift, 0.99, -1.0).is_err());
    }

    #[test]
    fn return_gap_independent_recomputation() {
        // same bound assembled from scratch, written independently of the
        // production composition
        let eps = LossEpsilons { eps_beta: 0.37, eps_phi: 0.12 };
        let (t_iters, delta, gamma, r_max, eta_hat) = (25usize, 0.1, 0.99, 3.0, 42.0);
        let report = bound_report(&eps, t_iters, delta, gamma, r_max, eta_hat, 0).unwrap();

        let eps_pi = (0.5 * 0.37 + 0.25 * (2.0 * std::f64::consts::PI).ln()).sqrt()
            + 25.0 * (0.1f64 / 2.0).sqrt();
        let eps_m = (0.5 * 0.12 + 0.25 * (2.0 * std::f64::consts::PI).ln()).sqrt();
        let gap = 2.0 * 0.99 * 3.0 * (eps_m + 2.0 * eps_pi) / (0.01 * 0.01)
            + 4.0 * 3.0 * eps_pi / 0.01;
        assert!((report.eps_pi - eps_pi).abs() < 1e-12);
        assert!((report.eps_m - eps_m).abs() < 1e-12);
        assert!((report.gap - gap).abs() < 1e-6 * gap.abs());
        assert!((report.return_lower_bound - (42.0 - gap)).abs() < 1e-6 * gap.abs());
    }

    #[test]
    fn lower_bound_never_exceeds_imagined_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let eps = LossEpsilons {
                eps_beta: rng.gen_range(0.0..2.0),
                eps_phi: rng.gen_range(0.0..2.0),
            };
            let shift = proposition1_bounds(&eps, rng.gen_range(0..50), 0.05).unwrap();
            let eta_hat = rng.gen_range(-100.0..100.0);
            let (gap, lower) = return_gap_bound(eta_hat, &shift, 0.99, 1.0).unwrap();
            assert!(gap >= 0.0);
            assert!(lower <= eta_hat);
        }
    }

    #[test]
    fn pinsker_unit_gaussians() {
        let (tv, bound, holds) = pinsker_tv_check(0.0, 1.0, 1.0, 1.0);
        assert!((tv - 0.38292492254802624).abs() < 1e-6, "tv {tv}");
        // KL = 0.5 here, so the bound is exactly 0.5
        assert!((bound - 0.5).abs() < 1e-12);
        assert!(holds);
    }

    #[test]
    fn pinsker_identical_distributions() {
        let (tv, bound, holds) = pinsker_tv_check(0.3, 0.7, 0.3, 0.7);
        assert!(tv < 1e-9);
        assert!(bound.abs() < 1e-12);
        assert!(holds);
    }

    #[test]
    fn pinsker_holds_for_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut violations = 0;
        for _ in 0..1000 {
            let m1 = rng.gen_range(-3.0..3.0);
            let m2 = rng.gen_range(-3.0..3.0);
            let s1 = rng.gen_range(0.1..2.0);
            let s2 = rng.gen_range(0.1..2.0);
            let (_, _, holds) = pinsker_tv_check(m1, s1, m2, s2);
            if !holds {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn tv_numeric_symmetry_and_range() {
        let a = gaussian_tv_numeric(0.0, 1.0, 2.0, 0.5);
        let b = gaussian_tv_numeric(2.0, 0.5, 0.0, 1.0);
        assert!((a - b).abs() < 1e-9);
        assert!(a > 0.0 && a < 1.0);
        // far-apart distributions approach total variation 1
        let far = gaussian_tv_numeric(0.0, 0.1, 100.0, 0.1);
        assert!((far - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_closed_form_known_values() {
        assert!(gaussian_kl(0.0, 1.0, 0.0, 1.0).abs() < 1e-15);
        assert!((gaussian_kl(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
        // doubling the second std: ln 2 + 1/8 - 1/2
        let want = std::f64::consts::LN_2 + 0.125 - 0.5;
        assert!((gaussian_kl(0.0, 1.0, 0.0, 2.0) - want).abs() < 1e-15);
    }
}
