//! Frequency maps ξ ↦ ω(ξ), Diophantine verification of the target frequency,
//! and small-divisor inspection.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularity::ModulusOfContinuity;

/// Evaluable frequency map with its parameter ball B(ξ₀, δ) and the declared
/// lower modulus ϖ₂ (the weak-convexity bound |ω(ξ)−ω(ζ)| ≥ ϖ₂(|ξ−ζ|)).
#[derive(Clone)]
pub struct FrequencyMap {
    n: usize,
    eval: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    pub base_point: Vec<f64>,
    pub ball_radius: f64,
    pub lower_modulus: ModulusOfContinuity,
    pub descriptor: String,
    /// Whether the map is smooth enough for difference-quotient Jacobians; the
    /// parameter-translation solver uses derivative-free search when false.
    pub smooth: bool,
}

impl std::fmt::Debug for FrequencyMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrequencyMap")
            .field("n", &self.n)
            .field("base_point", &self.base_point)
            .field("ball_radius", &self.ball_radius)
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

impl FrequencyMap {
    pub fn new(
        eval: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        base_point: Vec<f64>,
        ball_radius: f64,
        lower_modulus: ModulusOfContinuity,
        descriptor: impl Into<String>,
    ) -> Result<Self> {
        if ball_radius <= 0.0 || !ball_radius.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ball radius must be positive, got {ball_radius}"
            )));
        }
        let n = base_point.len();
        let probe = eval(&base_point);
        if probe.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: probe.len(),
            });
        }
        Ok(Self {
            n,
            eval: Arc::new(eval),
            base_point,
            ball_radius,
            lower_modulus,
            descriptor: descriptor.into(),
            smooth: true,
        })
    }

    pub fn non_smooth(mut self) -> Self {
        self.smooth = false;
        self
    }

    /// The identity map ω(ξ) = ξ, the simplest map satisfying (A2) with ϖ₂ = x.
    pub fn identity(
        base_point: Vec<f64>,
        ball_radius: f64,
    ) -> Result<Self> {
        Self::new(
            |xi: &[f64]| xi.to_vec(),
            base_point,
            ball_radius,
            ModulusOfContinuity::lipschitz(),
            "identity",
        )
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eval(&self, xi: &[f64]) -> Vec<f64> {
        (self.eval)(xi)
    }

    pub fn omega0(&self) -> Vec<f64> {
        self.eval(&self.base_point)
    }

    pub fn contains(&self, xi: &[f64]) -> bool {
        dist(xi, &self.base_point) < self.ball_radius
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Certificate that |⟨k, ω⟩|·|k|^τ ≥ γ for all 0 < |k| ≤ k_max.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiophantineCert {
    pub gamma: f64,
    pub tau: f64,
    pub k_max: u64,
    pub min_scaled: f64,
    pub witness_k: Vec<i64>,
}

/// Outcome of a finite-cutoff Diophantine scan.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DiophCheck {
    Certified(DiophantineCert),
    Violation {
        gamma: f64,
        tau: f64,
        k_max: u64,
        /// First k (shell-ascending, lexicographic within each shell) with
        /// |⟨k,ω⟩|·|k|^τ < γ.
        witness_k: Vec<i64>,
        scaled: f64,
    },
}

impl DiophCheck {
    pub fn is_certified(&self) -> bool {
        matches!(self, DiophCheck::Certified(_))
    }

    pub fn cert(&self) -> Option<&DiophantineCert> {
        match self {
            DiophCheck::Certified(c) => Some(c),
            DiophCheck::Violation { .. } => None,
        }
    }
}

/// |⟨k, ω⟩| for a nonzero integer vector k.
pub fn small_divisor(k: &[i64], omega: &[f64]) -> Result<f64> {
    if k.len() != omega.len() {
        return Err(Error::DimensionMismatch {
            expected: omega.len(),
            got: k.len(),
        });
    }
    if k.iter().all(|&ki| ki == 0) {
        return Err(Error::ZeroMode);
    }
    Ok(k.iter()
        .zip(omega)
        .map(|(&ki, &wi)| ki as f64 * wi)
        .sum::<f64>()
        .abs())
}

/// Enumerate, in lexicographic order, every k ∈ ℤⁿ with Σ|k_i| = shell whose
/// first nonzero component is positive (one representative per ±k pair —
/// |⟨k,ω⟩| is even in k, so scanning a half-space loses nothing).
fn canonical_shell(n: usize, shell: u64) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut cur = vec![0i64; n];
    fn rec(cur: &mut Vec<i64>, pos: usize, remaining: u64, seen_nonzero: bool, out: &mut Vec<Vec<i64>>) {
        let n = cur.len();
        if pos == n {
            if remaining == 0 && seen_nonzero {
                out.push(cur.clone());
            }
            return;
        }
        let lo = if seen_nonzero { -(remaining as i64) } else { 0 };
        for v in lo..=(remaining as i64) {
            cur[pos] = v;
            rec(cur, pos + 1, remaining - v.unsigned_abs(), seen_nonzero || v != 0, out);
        }
        cur[pos] = 0;
    }
    rec(&mut cur, 0, shell, false, &mut out);
    out.sort();
    out
}

/// Exhaustive scan of 0 < |k| ≤ k_max. Returns a certificate carrying the
/// minimizing witness, or the first failing k in deterministic scan order.
pub fn check_diophantine(omega: &[f64], gamma: f64, tau: f64, k_max: u64) -> Result<DiophCheck> {
    if gamma <= 0.0 || tau <= 0.0 || k_max < 1 {
        return Err(Error::InvalidConfig(format!(
            "check_diophantine requires gamma > 0, tau > 0, k_max >= 1 (got {gamma}, {tau}, {k_max})"
        )));
    }
    let n = omega.len();
    let mut min_scaled = f64::INFINITY;
    let mut witness = vec![0i64; n];
    for shell in 1..=k_max {
        let weight = (shell as f64).powf(tau);
        for k in canonical_shell(n, shell) {
            let scaled = small_divisor(&k, omega)? * weight;
            if scaled < gamma {
                return Ok(DiophCheck::Violation {
                    gamma,
                    tau,
                    k_max,
                    witness_k: k,
                    scaled,
                });
            }
            if scaled < min_scaled {
                min_scaled = scaled;
                witness = k;
            }
        }
    }
    Ok(DiophCheck::Certified(DiophantineCert {
        gamma,
        tau,
        k_max,
        min_scaled,
        witness_k: witness,
    }))
}

/// Like `check_diophantine` but never short-circuits: always reports the
/// scan's true minimum, useful for choosing γ.
pub fn min_scaled_divisor(omega: &[f64], tau: f64, k_max: u64) -> Result<(f64, Vec<i64>)> {
    let n = omega.len();
    let mut min_scaled = f64::INFINITY;
    let mut witness = vec![0i64; n];
    for shell in 1..=k_max {
        let weight = (shell as f64).powf(tau);
        for k in canonical_shell(n, shell) {
            let scaled = small_divisor(&k, omega)? * weight;
            if scaled < min_scaled {
                min_scaled = scaled;
                witness = k;
            }
        }
    }
    Ok((min_scaled, witness))
}

/// Sampled weak-convexity check: worst observed |ω(ξ)−ω(ζ)| / ϖ₂(|ξ−ζ|) over
/// deterministic pseudo-random pairs in B(ξ₀, δ).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub samples: usize,
    pub seed: u64,
    pub worst_ratio: f64,
    pub worst_pair: (Vec<f64>, Vec<f64>),
    pub pass: bool,
}

pub fn certify_weak_convexity(map: &FrequencyMap, samples: usize, seed: u64) -> ConvexityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = map.dim();
    let mut worst_ratio = f64::INFINITY;
    let mut worst_pair = (map.base_point.clone(), map.base_point.clone());

    let sample_point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if p.iter().map(|v| v * v).sum::<f64>() < 1.0 {
                return p
                    .iter()
                    .zip(&map.base_point)
                    .map(|(u, c)| c + u * map.ball_radius)
                    .collect();
            }
        }
    };

    let mut done = 0;
    while done < samples {
        let xi = sample_point(&mut rng);
        let zeta = sample_point(&mut rng);
        let d = dist(&xi, &zeta);
        if d == 0.0 || d > 1.0 {
            continue;
        }
        let dw = dist(&map.eval(&xi), &map.eval(&zeta));
        let ratio = dw / map.lower_modulus.eval(d);
        if ratio < worst_ratio {
            worst_ratio = ratio;
            worst_pair = (xi, zeta);
        }
        done += 1;
    }

    ConvexityReport {
        samples,
        seed,
        worst_ratio,
        worst_pair,
        pass: worst_ratio >= 1.0 - 1e-12,
    }
}
