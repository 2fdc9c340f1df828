//! The inductive parameter schedule: γ₀ = ε^{1/20}, μ₀ = ε^{1/(40η(τ+1))},
//! and the recurrences
//!   r_ν = r₀(1 − Σ_{i=1}^{ν} 2^{−i−1}),   s_ν = α_{ν−1} s_{ν−1} / 8,
//!   α_ν = μ_ν^{1/5},                       μ_ν = 8⁴ c₀ μ_{ν−1}^{1+ρ},
//!   K_ν = ([−ln μ_{ν−1}] + 1)^{3η},        ρ = 1/10.
//!
//! The μ-recurrence only contracts when μ₀ < (8⁴c₀)^{−1/ρ}; for the exponents
//! involved that puts the contraction threshold on ε far below the positive
//! f64 range, so the schedule is primarily a diagnostic object: the driver
//! records it (and its feasibility flag) but runs on operational cutoffs
//! derived from γ₀ and the smallness condition of the homological lemma.

use serde::Serialize;

use crate::error::{Error, Result};

pub const RHO: f64 = 0.1;

/// Minimal integer η with (1+ρ)^η > 2.
pub fn minimal_eta() -> u32 {
    let mut eta = 1u32;
    while (1.0 + RHO).powi(eta as i32) <= 2.0 {
        eta += 1;
    }
    eta
}

#[derive(Clone, Debug, Serialize)]
pub struct Schedule {
    pub eps: f64,
    pub tau: f64,
    pub eta: u32,
    pub rho: f64,
    pub c0: f64,
    pub m_star: f64,
    pub gamma0: f64,
    pub mu0: f64,
    pub r0: f64,
    pub s0: f64,
    pub k1: f64,
    /// μ* = μ₀ / ((M*+2)³ K₁^{5(τ+1)}): the budget against which the drift of
    /// h̄ away from h̄₀ is monitored (‖h̄_ν − h̄₀‖ ≤ 2√μ*).
    pub mu_star: f64,
    /// μ₀ < 1 and the first ten μ_ν strictly decreasing.
    pub feasible: bool,
    /// log₁₀ of the ε below which the μ-recurrence contracts
    /// (ε < (8⁴c₀)^{−400η(τ+1)}; stored as a log because the value itself
    /// underflows f64).
    pub eps_threshold_log10: f64,
    /// r_0..r_steps
    pub r: Vec<f64>,
    /// s_0..s_steps
    pub s: Vec<f64>,
    /// α_0..α_steps
    pub alpha: Vec<f64>,
    /// μ_0..μ_steps
    pub mu: Vec<f64>,
    /// K_1..K_{steps} (f64: the formula overflows integers long before it
    /// stops being meaningful), index ν−1.
    pub k: Vec<f64>,
}

/// Compute the schedule for a planned number of steps.
///
/// `eta` of `None` selects the minimal η with (1+ρ)^η > 2; `s` and `r` are the
/// initial domain radii; `m_star` estimates max‖∂²h̄‖ (0 for h̄₀ = 0).
pub fn make_schedule(
    eps: f64,
    tau: f64,
    eta: Option<u32>,
    r: f64,
    s: f64,
    m_star: f64,
    steps: usize,
) -> Result<Schedule> {
    if !(eps > 0.0) || !(tau > 0.0) || !(r > 0.0) || !(s > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "schedule needs eps, tau, r, s > 0 (got {eps}, {tau}, {r}, {s})"
        )));
    }
    let eta = eta.unwrap_or_else(minimal_eta);
    if (1.0 + RHO).powi(eta as i32) <= 2.0 {
        return Err(Error::InvalidConfig(format!(
            "eta = {eta} violates (1+rho)^eta > 2"
        )));
    }
    let c0 = 1.0;
    let gamma0 = eps.powf(1.0 / 20.0);
    let mu0 = eps.powf(1.0 / (40.0 * eta as f64 * (tau + 1.0)));
    let r0 = r;

    let kappa = |mu_prev: f64| -> f64 {
        let base = ((-mu_prev.ln()).floor() + 1.0).max(1.0);
        base.powi(3 * eta as i32)
    };
    let k1 = kappa(mu0);
    let s0 = s * gamma0 / (16.0 * (m_star + 2.0) * k1.powf(tau + 1.0));

    let len = steps + 1;
    let mut mu = Vec::with_capacity(len);
    let mut alpha = Vec::with_capacity(len);
    let mut rs = Vec::with_capacity(len);
    let mut ss = Vec::with_capacity(len);
    let mut ks = Vec::with_capacity(steps.max(1));
    mu.push(mu0);
    alpha.push(mu0.powf(0.2));
    rs.push(r0);
    ss.push(s0);
    let mut half_sum = 0.0;
    for nu in 1..len {
        let mu_prev = mu[nu - 1];
        mu.push(8f64.powi(4) * c0 * mu_prev.powf(1.0 + RHO));
        alpha.push(mu[nu].powf(0.2));
        half_sum += 2f64.powi(-(nu as i32) - 1);
        rs.push(r0 * (1.0 - half_sum));
        ss.push(alpha[nu - 1] * ss[nu - 1] / 8.0);
        ks.push(kappa(mu_prev));
    }
    if steps == 0 {
        ks.push(k1);
    }

    let mut feasible = mu0 < 1.0;
    let mut probe = mu0;
    for _ in 0..10 {
        let next = 8f64.powi(4) * c0 * probe.powf(1.0 + RHO);
        if next >= probe {
            feasible = false;
            break;
        }
        probe = next;
    }
    let eps_threshold_log10 =
        -400.0 * eta as f64 * (tau + 1.0) * (8f64.powi(4) * c0).log10();

    Ok(Schedule {
        eps,
        tau,
        eta,
        rho: RHO,
        c0,
        m_star,
        gamma0,
        mu0,
        r0,
        s0,
        k1,
        mu_star: mu0 / ((m_star + 2.0).powi(3) * k1.powf(5.0 * (tau + 1.0))),
        feasible,
        eps_threshold_log10,
        r: rs,
        s: ss,
        alpha,
        mu,
        k: ks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eta_is_eight() {
        assert_eq!(minimal_eta(), 8);
        assert!(1.1f64.powi(8) > 2.0);
        assert!(1.1f64.powi(7) < 2.0);
    }

    #[test]
    fn zeroth_step_parameters() {
        let sch = make_schedule(1e-6, 1.2, None, 1.0, 1.0, 0.0, 5).unwrap();
        assert_abs_diff_eq!(sch.gamma0, 10f64.powf(-0.3), epsilon = 1e-15);
        assert_abs_diff_eq!(sch.mu0, 1e-6f64.powf(1.0 / 704.0), epsilon = 1e-15);
        assert_eq!(sch.eta, 8);
    }

    #[test]
    fn mu_recurrence_definition() {
        let sch = make_schedule(1e-6, 1.2, None, 1.0, 1.0, 0.0, 3).unwrap();
        assert_abs_diff_eq!(
            sch.mu[1],
            8f64.powi(4) * sch.mu0.powf(1.1),
            epsilon = 1e-12
        );
    }

    #[test]
    fn alpha_fifth_power_is_mu() {
        let sch = make_schedule(1e-8, 1.5, None, 1.0, 1.0, 0.0, 6).unwrap();
        for (a, m) in sch.alpha.iter().zip(&sch.mu) {
            assert_abs_diff_eq!(a.powi(5), *m, epsilon = 1e-10 * m);
        }
    }

    #[test]
    fn r_decreases_to_half() {
        let sch = make_schedule(1e-6, 1.2, None, 2.0, 1.0, 0.0, 40).unwrap();
        for w in sch.r.windows(2) {
            assert!(w[1] < w[0]);
        }
        for &rv in &sch.r {
            assert!(rv > sch.r0 / 2.0);
        }
        assert_abs_diff_eq!(*sch.r.last().unwrap(), sch.r0 / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn k_is_nondecreasing() {
        let sch = make_schedule(1e-6, 1.2, None, 1.0, 1.0, 0.0, 10).unwrap();
        for w in sch.k.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn contraction_threshold_is_below_f64_range() {
        // No representable eps makes the literal mu-recurrence contract; the
        // driver must therefore treat the schedule as diagnostic.
        let sch = make_schedule(f64::MIN_POSITIVE, 1.2, None, 1.0, 1.0, 0.0, 3).unwrap();
        assert!(!sch.feasible);
        assert!(sch.eps_threshold_log10 < -300.0 - 8.0);
        let sch = make_schedule(1e-6, 1.2, None, 1.0, 1.0, 0.0, 3).unwrap();
        assert!(!sch.feasible);
    }
}
