//! The full iteration: certification, schedule, step loop with convergence
//! monitoring, and end-to-end torus verification by flow integration.

pub mod builtins;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frequency::{
    certify_weak_convexity, check_diophantine, ConvexityReport, DiophCheck, DiophantineCert,
};
use crate::ode;
use crate::schedule::{make_schedule, Schedule};
use crate::series::{AnalyticDomain, FourierTaylorSeries};
use crate::step::{KamState, Pipeline, Problem, StepGeometry, StepReport};

/// Knobs for one end-to-end run.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub steps: usize,
    /// Success threshold on ‖P_ν‖ (0 disables early convergence).
    pub tol: f64,
    /// Tolerance of the frequency-preserving translation.
    pub trans_tol: f64,
    /// None selects γ = ε^{1/20}.
    pub gamma: Option<f64>,
    pub tau: f64,
    /// Minimal η with (1+ρ)^η > 2 when None.
    pub eta: Option<u32>,
    pub r0: f64,
    pub m_star: f64,
    /// Hard cap on the per-step Fourier cutoff (the operational K₊ is the
    /// perturbation's actual support, clamped here).
    pub k_cap: u64,
    pub defect_samples: usize,
    pub convexity_samples: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            tol: 0.0,
            trans_tol: 1e-12,
            gamma: None,
            tau: 1.2,
            eta: None,
            r0: 0.5,
            m_star: 0.0,
            k_cap: 32,
            defect_samples: 20,
            convexity_samples: 200,
            seed: 1,
        }
    }
}

/// Why the loop stopped.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Converged { p_norm: f64 },
    BudgetExhausted { p_norm: f64 },
    NonContraction { before: f64, after: f64 },
    TranslationFailure { message: String },
    BallGuard { dist: f64, radius: f64 },
    StepError { message: String },
}

impl Termination {
    pub fn is_success(&self) -> bool {
        matches!(
            self,
            Termination::Converged { .. } | Termination::BudgetExhausted { .. }
        )
    }
}

/// Complete record of a run.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceTrace {
    pub schedule: Schedule,
    pub gamma: f64,
    pub reports: Vec<StepReport>,
    /// ‖P_ν‖ for ν = 0..(steps completed), one longer than `reports`.
    pub p_norms: Vec<f64>,
    pub xi_increments: Vec<f64>,
    pub freq_residuals: Vec<f64>,
    pub final_xi: Vec<f64>,
    pub final_freq_residual: f64,
    /// Mean of log‖P_{ν+1}‖ / log‖P_ν‖ over recorded steps with ‖P‖ < 1.
    pub contraction_exponent: Option<f64>,
    pub termination: Termination,
}

/// Trace plus the non-serialized endpoint data consumers need.
#[derive(Debug)]
pub struct RunOutcome {
    pub trace: ConvergenceTrace,
    pub cert: DiophantineCert,
    pub convexity: ConvexityReport,
    pub final_state: KamState,
    /// ω(ξ*) + Σ p₀₁ʲ(ξ*) — equals ω(ξ₀) up to the translation tolerance.
    pub final_lambda: Vec<f64>,
}

impl RunOutcome {
    /// The transformed Hamiltonian at the final parameter value.
    pub fn final_hamiltonian(&self) -> FourierTaylorSeries {
        use num_complex::Complex64;
        let s = &self.final_state;
        FourierTaylorSeries::constant(self.final_lambda.len(), Complex64::new(s.e, 0.0))
            .add(&FourierTaylorSeries::linear_in_y(&self.final_lambda))
            .and_then(|h| h.add(&s.hbar))
            .and_then(|h| h.add(&s.pert))
            .expect("matched dims")
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Run the iteration: Diophantine certification, weak-convexity certification,
/// schedule, then `steps` normal-form steps (or fewer on early convergence or
/// a step-level failure, which terminates with a partial trace and cause).
pub fn run(problem: Problem, cfg: &RunConfig) -> Result<RunOutcome> {
    let eps = problem.eps;
    let gamma = cfg.gamma.unwrap_or_else(|| eps.powf(1.0 / 20.0));
    let omega0 = problem.map.omega0();

    let check = check_diophantine(&omega0, gamma, cfg.tau, cfg.k_cap)?;
    let cert = match check {
        DiophCheck::Certified(c) => c,
        DiophCheck::Violation {
            witness_k, scaled, ..
        } => {
            return Err(Error::DiophantineViolation {
                witness_k,
                scaled,
                gamma,
            })
        }
    };
    let convexity = certify_weak_convexity(&problem.map, cfg.convexity_samples, cfg.seed);
    if !convexity.pass {
        return Err(Error::ConvexityFailed {
            worst_ratio: convexity.worst_ratio,
        });
    }

    let schedule = make_schedule(eps, cfg.tau, cfg.eta, cfg.r0, 1.0, cfg.m_star, cfg.steps)?;

    // Operational geometry: the analytic μ-schedule never contracts at
    // representable ε (see `schedule`), so cutoffs come from the homological
    // solve's smallness condition and the perturbation's actual support.
    let p0 = (problem.perturbation)(&problem.map.base_point).scale_re(eps);
    let k_eff = p0.support_k_order().clamp(1, cfg.k_cap);
    let s0 = 0.5 * gamma / (2.0 * (cfg.m_star + 2.0) * (k_eff as f64).powf(cfg.tau + 1.0));

    let mut pipeline = Pipeline::new(problem, gamma, cfg.tau, cfg.trans_tol);
    pipeline.defect_samples = cfg.defect_samples;
    let delta = pipeline.problem.map.ball_radius;

    let dom_at = |nu: usize| -> Result<AnalyticDomain> {
        let r = if nu < schedule.r.len() {
            schedule.r[nu]
        } else {
            schedule.r0 / 2.0
        };
        AnalyticDomain::new(s0 * 2f64.powi(-(nu as i32)), r)
    };

    let mut state = pipeline.initial_state(dom_at(0)?);
    let mut reports: Vec<StepReport> = Vec::new();
    let mut p_norms = vec![state.pert.weighted_norm(state.dom)];
    let mut termination = Termination::BudgetExhausted {
        p_norm: p_norms[0],
    };

    for nu in 0..cfg.steps {
        let p_now = p_norms[nu];
        if cfg.tol > 0.0 && p_now < cfg.tol {
            termination = Termination::Converged { p_norm: p_now };
            break;
        }
        let k_cut = state.pert.support_k_order().clamp(1, cfg.k_cap);
        let geo = StepGeometry {
            k_cut,
            dom: state.dom,
            dom_next: dom_at(nu + 1)?,
            s_solve: state.dom.s,
        };
        match pipeline.kam_step(&state, geo) {
            Ok((next, report)) => {
                let before = report.p_before;
                let after = report.p_after;
                p_norms.push(after);
                reports.push(report);
                state = next;
                if before > 0.0 && (!after.is_finite() || after >= before) {
                    termination = Termination::NonContraction { before, after };
                    break;
                }
                let d = dist(&state.xi, &pipeline.problem.map.base_point);
                if d > 0.9 * delta {
                    termination = Termination::BallGuard { dist: d, radius: delta };
                    break;
                }
                termination = Termination::BudgetExhausted {
                    p_norm: *p_norms.last().unwrap(),
                };
            }
            Err(e @ (Error::TranslationFailed { .. } | Error::BallBoundary { .. })) => {
                termination = Termination::TranslationFailure {
                    message: e.to_string(),
                };
                break;
            }
            Err(e) => {
                termination = Termination::StepError {
                    message: e.to_string(),
                };
                break;
            }
        }
    }
    if cfg.tol > 0.0 {
        if let Termination::BudgetExhausted { p_norm } = termination {
            if p_norm < cfg.tol {
                termination = Termination::Converged { p_norm };
            }
        }
    }

    let mut exps = Vec::new();
    for w in p_norms.windows(2) {
        if w[0] > 0.0 && w[0] < 1.0 && w[1] > 0.0 && w[1] < 1.0 {
            exps.push(w[1].ln() / w[0].ln());
        }
    }
    let contraction_exponent = if exps.is_empty() {
        None
    } else {
        Some(exps.iter().sum::<f64>() / exps.len() as f64)
    };

    let final_lambda: Vec<f64> = {
        let drift = pipeline.total_drift(&state.xi, state.nu)?;
        pipeline
            .problem
            .map
            .eval(&state.xi)
            .iter()
            .zip(&drift)
            .map(|(w, d)| w + d)
            .collect()
    };
    let final_freq_residual = dist(&final_lambda, &omega0);

    let trace = ConvergenceTrace {
        schedule,
        gamma,
        xi_increments: reports.iter().map(|r| r.xi_increment).collect(),
        freq_residuals: reports.iter().map(|r| r.freq_residual).collect(),
        reports,
        p_norms,
        final_xi: state.xi.clone(),
        final_freq_residual,
        contraction_exponent,
        termination,
    };
    Ok(RunOutcome {
        trace,
        cert,
        convexity,
        final_state: state,
        final_lambda,
    })
}

/// Invariance defects of the torus {y = 0} under the flow of `h`.
#[derive(Clone, Debug, Serialize)]
pub struct TorusDefect {
    pub horizon: f64,
    /// max over time and initial angles of |y(t)|.
    pub max_y: f64,
    /// max over time of the unwrapped rotation defect |x(t) − x₀ − ω₀t|.
    pub max_rotation_drift: f64,
    pub initial_angles: usize,
}

/// Integrate ẏ = −∂ₓH, ẋ = ∂_yH from (0, x₀) for several random x₀ and
/// measure how far the trajectory strays from the linear flow x₀ + ω₀t on
/// {y = 0}. Angles are integrated in ℝⁿ, so the drift is already unwrapped.
pub fn verify_torus(
    h: &FourierTaylorSeries,
    omega0: &[f64],
    t_max: f64,
    angles: usize,
    seed: u64,
) -> Result<TorusDefect> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let n = omega0.len();
    let gy = h.gradient_y();
    let gx = h.gradient_x();
    let field = |_: f64, z: &[f64]| -> Vec<f64> {
        let (y, x) = z.split_at(n);
        let mut dz = Vec::with_capacity(2 * n);
        for i in 0..n {
            dz.push(-gx[i].evaluate_re(y, x).unwrap());
        }
        for i in 0..n {
            dz.push(gy[i].evaluate_re(y, x).unwrap());
        }
        dz
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_y: f64 = 0.0;
    let mut max_rot: f64 = 0.0;
    for _ in 0..angles {
        let x0: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        let mut z0 = vec![0.0; n];
        z0.extend(&x0);
        ode::integrate_observe(field, 0.0, &z0, t_max, 1e-12, 1e-12, |t, z| {
            for i in 0..n {
                max_y = max_y.max(z[i].abs());
                max_rot = max_rot.max((z[n + i] - x0[i] - omega0[i] * t).abs());
            }
        })?;
    }
    Ok(TorusDefect {
        horizon: t_max,
        max_y,
        max_rotation_drift: max_rot,
        initial_angles: angles,
    })
}
