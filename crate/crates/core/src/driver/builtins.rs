//! Ready-made problem instances: a smooth contraction benchmark and a
//! weakly-regular instance whose frequency map interpolates between
//! nowhere-differentiable boundary pieces and an identity core.

use std::sync::Arc;

use num_complex::Complex64;

use crate::driver::RunConfig;
use crate::frequency::FrequencyMap;
use crate::regularity::{
    build_weierstrass, eval_weierstrass, BSequence, ModulusOfContinuity, WeierstrassFamily,
};
use crate::series::FourierTaylorSeries;
use crate::step::{Problem, SeriesFamily};

pub const PHI: f64 = 1.618033988749895;

/// Identity frequency map at ω₀ = (1, φ) with the perturbation
/// ε(cos x₁ + cos(x₁ + x₂) + ξ₁ y₁): smooth, strongly Diophantine, and
/// quadratically contracting for small ε.
pub fn smooth_benchmark(eps: f64) -> (Problem, RunConfig) {
    let map = FrequencyMap::identity(vec![1.0, PHI], 0.5).expect("valid base data");
    let pert: SeriesFamily = Arc::new(|xi: &[f64]| {
        let mut p = FourierTaylorSeries::cosine(vec![1, 0], 1.0)
            .add(&FourierTaylorSeries::cosine(vec![1, 1], 1.0))
            .unwrap();
        p.add_term(
            crate::series::MultiIndexPair::new(vec![0, 0], vec![1, 0]),
            Complex64::new(xi[0], 0.0),
        );
        p
    });
    let problem = Problem {
        map,
        perturbation: pert,
        eps,
    };
    let cfg = RunConfig {
        steps: 5,
        tol: 0.0,
        gamma: Some(0.05),
        tau: 1.2,
        ..RunConfig::default()
    };
    (problem, cfg)
}

/// One coordinate of the piecewise glued map: identity on [−1/2, 1/2],
/// continued by a shifted nowhere-differentiable branch on either side.
fn glued_coordinate(t: f64, left: &WeierstrassFamily, right: &WeierstrassFamily) -> f64 {
    if t < -0.5 {
        let (g, _) = eval_weierstrass(left, t);
        let (g_anchor, _) = eval_weierstrass(left, -0.5);
        -0.5 + (g - g_anchor)
    } else if t <= 0.5 {
        t
    } else {
        let (g, _) = eval_weierstrass(right, t);
        let (g_anchor, _) = eval_weierstrass(right, 0.5);
        0.5 + (g - g_anchor)
    }
}

/// The four boundary families used by [`weak_regularity_instance`]: same
/// Hölder-1/2 target modulus, staggered amplitude decay rates.
pub fn boundary_families() -> crate::error::Result<[WeierstrassFamily; 4]> {
    let modulus = ModulusOfContinuity::hoelder(0.5)?;
    let mut out = Vec::with_capacity(4);
    for c in [5.0, 6.0, 7.0, 8.0] {
        out.push(build_weierstrass(
            &modulus,
            &BSequence::GaussianExp { c },
            4,
        )?);
    }
    Ok(out.try_into().expect("four families"))
}

/// n = 2 instance on the parameter ball B(ξ₀, 1/8), ξ₀ = (1/8, φ/8):
/// ω_i(ξ) = ξ_i and P_i = ξ_i y_i on the core region, glued to
/// nowhere-differentiable continuations outside [−1/2, 1/2]. The map is
/// declared non-smooth, so translations use derivative-free search. The
/// perturbation also carries an angular part so the step has real work.
pub fn weak_regularity_instance(eps: f64) -> crate::error::Result<(Problem, RunConfig)> {
    let [g1, g2, g3, g4] = boundary_families()?;
    let xi0 = vec![0.125, PHI / 8.0];
    let delta = 0.125;

    let (g1c, g2c) = (g1.clone(), g2.clone());
    let map = FrequencyMap::new(
        move |xi: &[f64]| {
            xi.iter()
                .map(|&t| glued_coordinate(t, &g1c, &g2c))
                .collect()
        },
        xi0,
        delta,
        ModulusOfContinuity::lipschitz(),
        "piecewise glued identity with nowhere-differentiable wings",
    )?
    .non_smooth();

    let pert: SeriesFamily = Arc::new(move |xi: &[f64]| {
        let mut p = FourierTaylorSeries::cosine(vec![1, 0], 1.0)
            .add(&FourierTaylorSeries::cosine(vec![1, 1], 1.0))
            .unwrap();
        for i in 0..2 {
            let coeff = glued_coordinate(xi[i], &g3, &g4);
            let mut l = vec![0u32; 2];
            l[i] = 1;
            p.add_term(
                crate::series::MultiIndexPair::new(vec![0, 0], l),
                Complex64::new(coeff, 0.0),
            );
        }
        p
    });

    let problem = Problem {
        map,
        perturbation: pert,
        eps,
    };
    let cfg = RunConfig {
        steps: 3,
        tol: 0.0,
        gamma: Some(0.05),
        tau: 1.2,
        ..RunConfig::default()
    };
    Ok((problem, cfg))
}
