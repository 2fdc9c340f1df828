//! Moduli of continuity, their "not weaker than" ordering, empirical
//! ϖ-seminorms of parameter-dependent series, and the construction of
//! nowhere-Hölder Weierstrass-type functions.

mod weierstrass;

pub use weierstrass::{
    build_weierstrass, eval_weierstrass, omega_star, probe_quotient_growth, ratio_to_f64,
    BSequence, ProbeResult, WeierstrassFamily,
};

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{AnalyticDomain, FourierTaylorSeries};

/// A gauge ϖ : (0, 1] → (0, ∞), strictly increasing with ϖ(x) → 0 as x → 0⁺,
/// quantifying regularity weaker than Lipschitz.
#[derive(Clone)]
pub enum ModulusOfContinuity {
    /// ϖ(x) = x^β, β ∈ (0, 1].
    Hoelder { beta: f64 },
    /// ϖ(x) = x.
    Lipschitz,
    /// ϖ(x) = 1 / (1 − ln x): asymptotically −1/ln x near 0, finite at x = 1.
    LogLipschitz,
    /// Arbitrary monotone gauge; inverted numerically.
    Custom {
        name: String,
        eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl std::fmt::Debug for ModulusOfContinuity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl ModulusOfContinuity {
    pub fn hoelder(beta: f64) -> Result<Self> {
        if beta > 0.0 && beta <= 1.0 {
            Ok(Self::Hoelder { beta })
        } else {
            Err(Error::InvalidModulus(format!(
                "Hoelder exponent must lie in (0, 1], got {beta}"
            )))
        }
    }

    pub fn lipschitz() -> Self {
        Self::Lipschitz
    }

    pub fn log_lipschitz() -> Self {
        Self::LogLipschitz
    }

    pub fn custom(name: impl Into<String>, eval: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::Custom {
            name: name.into(),
            eval: Arc::new(eval),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Hoelder { beta } => format!("holder:{beta}"),
            Self::Lipschitz => "lipschitz".into(),
            Self::LogLipschitz => "log-lipschitz".into(),
            Self::Custom { name, .. } => format!("custom:{name}"),
        }
    }

    /// ϖ(x) for x ∈ (0, 1].
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Hoelder { beta } => x.powf(*beta),
            Self::Lipschitz => x,
            Self::LogLipschitz => 1.0 / (1.0 - x.ln()),
            Self::Custom { eval, .. } => eval(x),
        }
    }

    /// ϖ^{−1}(v): closed form where available, bisection on [2^{−60}, 1] for
    /// custom gauges.
    pub fn inverse(&self, v: f64) -> f64 {
        match self {
            Self::Hoelder { beta } => v.powf(1.0 / beta),
            Self::Lipschitz => v,
            Self::LogLipschitz => (1.0 - 1.0 / v).exp(),
            Self::Custom { eval, .. } => {
                let (mut lo, mut hi) = (2f64.powi(-60), 1.0);
                if eval(hi) <= v {
                    return hi;
                }
                if eval(lo) >= v {
                    return lo;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if eval(mid) < v {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// Dyadic-grid sanity check: strict monotonicity, vanishing at 0⁺, and a
    /// finite limsup of x/ϖ(x), all at x = 2^{−j}, j = 1..40.
    pub fn validate(&self) -> Result<()> {
        let mut prev = f64::INFINITY;
        let mut max_ratio = 0.0f64;
        for j in 1..=40 {
            let x = 2f64.powi(-j);
            let w = self.eval(x);
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidModulus(format!(
                    "{} evaluates to {w} at x = 2^-{j}",
                    self.name()
                )));
            }
            if w >= prev {
                return Err(Error::InvalidModulus(format!(
                    "{} is not strictly increasing at x = 2^-{j}",
                    self.name()
                )));
            }
            prev = w;
            max_ratio = max_ratio.max(x / w);
        }
        // Vanishing at 0 can only be sampled; even a logarithmic modulus
        // decays by more than a factor 20 over forty dyadic halvings, while a
        // modulus with a positive limit stays pinned near ϖ(1).
        if prev > 0.05 * self.eval(1.0) {
            return Err(Error::InvalidModulus(format!(
                "{} does not vanish towards 0 (value {prev} at x = 2^-40)",
                self.name()
            )));
        }
        if !max_ratio.is_finite() {
            return Err(Error::InvalidModulus(format!(
                "{} has unbounded x/w(x) on the dyadic grid",
                self.name()
            )));
        }
        Ok(())
    }
}

/// Result of comparing two moduli on the dyadic grid x = 2^{−j}, j = 1..40.
///
/// `comparable` means "ϖ₁ is not weaker than ϖ₂" was established empirically:
/// the ratio ϖ₁/ϖ₂ shows no monotone growth towards x → 0⁺.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderingReport {
    pub comparable: bool,
    pub observed_sup: f64,
    pub final_ratio: f64,
    pub tail_decreasing: bool,
    pub ratios: Vec<f64>,
}

/// Estimate limsup_{x→0⁺} ϖ₁(x)/ϖ₂(x) on the dyadic grid. A finite, eventually
/// non-growing ratio establishes ϖ₁ ≲ ϖ₂; monotone growth across the tail of
/// the grid leaves the ordering not established.
pub fn compare_moduli(w1: &ModulusOfContinuity, w2: &ModulusOfContinuity) -> OrderingReport {
    let ratios: Vec<f64> = (1..=40)
        .map(|j| {
            let x = 2f64.powi(-j);
            w1.eval(x) / w2.eval(x)
        })
        .collect();
    let observed_sup = ratios.iter().cloned().fold(0.0, f64::max);
    let final_ratio = *ratios.last().unwrap();
    let tail = &ratios[30..];
    let tail_increasing = tail.windows(2).all(|w| w[1] > w[0]);
    let tail_decreasing = tail.windows(2).all(|w| w[1] < w[0]);
    let comparable = observed_sup.is_finite() && !(tail_increasing && final_ratio > ratios[0]);
    OrderingReport {
        comparable,
        observed_sup,
        final_ratio,
        tail_decreasing,
        ratios,
    }
}

/// Empirical ϖ-seminorm of a ξ-indexed series family: the supremum of
/// ‖P(ξ) − P(ζ)‖ / ϖ(|ξ−ζ|) over sampled pairs in B(center, radius) with
/// 0 < |ξ−ζ| ≤ 1. A lower bound on the true seminorm.
#[allow(clippy::too_many_arguments)]
pub fn seminorm(
    family: &dyn Fn(&[f64]) -> FourierTaylorSeries,
    modulus: &ModulusOfContinuity,
    center: &[f64],
    radius: f64,
    dom: AnalyticDomain,
    pairs: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = center.len();
    let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if p.iter().map(|v| v * v).sum::<f64>() < 1.0 {
                return p.iter().zip(center).map(|(u, c)| c + u * radius).collect();
            }
        }
    };
    let mut sup: f64 = 0.0;
    let mut done = 0;
    while done < pairs {
        let xi = sample(&mut rng);
        let zeta = sample(&mut rng);
        let d: f64 = xi
            .iter()
            .zip(&zeta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if d == 0.0 || d > 1.0 {
            continue;
        }
        let diff = family(&xi).sub(&family(&zeta)).expect("matching dims");
        sup = sup.max(diff.weighted_norm(dom) / modulus.eval(d));
        done += 1;
    }
    sup
}
