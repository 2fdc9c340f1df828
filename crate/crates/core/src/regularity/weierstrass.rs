//! Lacunary sine series f(x) = Σ b_n sin(π a_n x) engineered to be nowhere
//! ϖ-continuous for a prescribed modulus ϖ, with an explicit weaker modulus
//! ϖ* it does satisfy.
//!
//! The frequencies a_n are chosen greedily minimal subject to:
//!   (a1) a_n and a_n/a_{n−1} are even positive integers;
//!   (a2) a_m/a_{m−1} ≥ 2π Σ_n b_n / b_m;
//!   (a3) a_m ≥ 1/ϖ^{−1}(m^{−1}(b_m/2 − Σ_{n>m} b_n)).
//!
//! All inequality bookkeeping runs in exact big-rational arithmetic over the
//! exact binary values of the f64 inputs. This matters beyond pedantry: bounds
//! of magnitude ~1e33 computed in f64 are multiples of large powers of two, and
//! frequencies divisible by 2^50+ make a_m·x an exact integer for *every* f64
//! probe point x — the pathology would become invisible to its own probe.

use std::ops::RangeInclusive;

use num_bigint::{BigInt, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::ser::SerializeStruct;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::regularity::ModulusOfContinuity;

/// Hard cap on the bit length of any a_m; beyond this the family is declared
/// numerically unrepresentable rather than silently ground through.
const MAX_A_BITS: u64 = 20_000;

/// Recipe for the amplitude sequence b_n.
#[derive(Clone, Debug)]
pub enum BSequence {
    /// b_n = e^{−c n²} — super-exponentially lacunary, always feasible for c ≥ 1.
    GaussianExp { c: f64 },
    /// Finite explicit list (b_1..b_len) with a declared tail bound for n > len.
    Explicit { values: Vec<f64>, tail: f64 },
    /// b_n = 1/n — divergent tail, never feasible; kept for failure-path tests.
    Harmonic,
}

impl BSequence {
    pub fn value(&self, n: usize) -> f64 {
        match self {
            BSequence::GaussianExp { c } => (-c * (n * n) as f64).exp(),
            BSequence::Explicit { values, .. } => values.get(n - 1).copied().unwrap_or(0.0),
            BSequence::Harmonic => 1.0 / n as f64,
        }
    }

    /// Upper bound on Σ_{n>m} b_n. Returns +∞ when the tail diverges.
    pub fn tail_upper(&self, m: usize) -> f64 {
        match self {
            BSequence::GaussianExp { c } => {
                // Σ_{n>m} e^{−cn²} ≤ e^{−c(m+1)²} / (1 − e^{−c(2m+3)}).
                let head = (-c * ((m + 1) * (m + 1)) as f64).exp();
                let q = (-c * (2 * m + 3) as f64).exp();
                head / (1.0 - q) * (1.0 + 1e-12)
            }
            BSequence::Explicit { values, tail } => {
                let rest: f64 = values.iter().skip(m).sum();
                rest + tail
            }
            BSequence::Harmonic => f64::INFINITY,
        }
    }

    pub fn description(&self) -> String {
        match self {
            BSequence::GaussianExp { c } => format!("exp(-{c}*n^2)"),
            BSequence::Explicit { values, .. } => format!("explicit[{}]", values.len()),
            BSequence::Harmonic => "1/n".into(),
        }
    }

    pub fn c(&self) -> Option<f64> {
        match self {
            BSequence::GaussianExp { c } => Some(*c),
            _ => None,
        }
    }
}

/// A constructed family f(x) = Σ_{n=1}^{M} b_n sin(π a_n x) with certified
/// (a1)–(a3) and an explicit truncation tail bound.
#[derive(Clone, Debug)]
pub struct WeierstrassFamily {
    pub b: Vec<f64>,
    pub b_form: String,
    pub c: Option<f64>,
    pub a: Vec<BigInt>,
    pub tail_bound: f64,
    pub modulus: ModulusOfContinuity,
}

impl Serialize for WeierstrassFamily {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = ser.serialize_struct("WeierstrassFamily", 7)?;
        st.serialize_field("conditions_verified", &self.verify_conditions().is_ok())?;
        st.serialize_field("b_form", &self.b_form)?;
        st.serialize_field("c", &self.c)?;
        st.serialize_field("M", &self.a.len())?;
        let a_dec: Vec<String> = self.a.iter().map(|a| a.to_string()).collect();
        st.serialize_field("a", &a_dec)?;
        st.serialize_field("tail_bound", &self.tail_bound)?;
        st.serialize_field("modulus", &self.modulus.name())?;
        st.end()
    }
}

fn big(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite float")
}

/// Rational strictly above π (π itself is irrational; the f64 nearest to π is
/// below it, so nudge up by more than half an ulp).
fn pi_upper() -> BigRational {
    big(std::f64::consts::PI) + BigRational::new(BigInt::one(), BigInt::one() << 48)
}

fn ceil_even(r: &BigRational) -> BigInt {
    let mut c = r.ceil().to_integer();
    if c < BigInt::from(2) {
        c = BigInt::from(2);
    }
    if &c % 2 != BigInt::zero() {
        c += 1;
    }
    c
}

/// Lower bound (exact where the modulus allows) on 1/ϖ^{−1}(v).
fn inv_modulus_bound(modulus: &ModulusOfContinuity, v: &BigRational, m: usize) -> Result<BigRational> {
    if !v.is_positive() {
        return Err(Error::InfeasibleSequence {
            m,
            detail: "non-positive gap b_m/2 - tail".into(),
        });
    }
    match modulus {
        ModulusOfContinuity::Hoelder { beta } if *beta == 0.5 => {
            // ϖ^{−1}(v) = v², so the bound is exactly (1/v)².
            let inv = v.recip();
            Ok(&inv * &inv)
        }
        ModulusOfContinuity::Lipschitz => Ok(v.recip()),
        _ => {
            // f64 fallback with a safety factor; the added 1/3 keeps the
            // ceiling away from large power-of-two multiples (see module doc).
            let vf = ratio_to_f64(v);
            let bound = 1.0 / modulus.inverse(vf) * (1.0 + 1e-9);
            if !bound.is_finite() {
                return Err(Error::SequenceOverflow {
                    m,
                    achieved: m.saturating_sub(1),
                    detail: format!("1/w^-1 overflows f64 for modulus {}", modulus.name()),
                });
            }
            Ok(big(bound) + BigRational::new(BigInt::one(), BigInt::from(3)))
        }
    }
}

struct RationalData {
    b: Vec<BigRational>,          // b_1..b_M
    tail_after: Vec<BigRational>, // upper bound on Σ_{n>m} b_n, index m = 0..M
    s_all: BigRational,           // upper bound on Σ_{n≥1} b_n
}

fn rational_data(b: &[f64], tail_bound: f64, m_of_fail: usize) -> Result<RationalData> {
    if !tail_bound.is_finite() {
        return Err(Error::InfeasibleSequence {
            m: m_of_fail,
            detail: "divergent amplitude tail".into(),
        });
    }
    let m_len = b.len();
    let b_rat: Vec<BigRational> = b.iter().map(|&v| big(v)).collect();
    let tail_m = big(tail_bound);
    let mut tail_after = vec![BigRational::zero(); m_len + 1];
    tail_after[m_len] = tail_m;
    for m in (0..m_len).rev() {
        tail_after[m] = &tail_after[m + 1] + &b_rat[m];
    }
    let s_all = tail_after[0].clone();
    Ok(RationalData {
        b: b_rat,
        tail_after,
        s_all,
    })
}

/// Greedy minimal construction of the frequency sequence a_1..a_M.
pub fn build_weierstrass(
    modulus: &ModulusOfContinuity,
    b_spec: &BSequence,
    m_len: usize,
) -> Result<WeierstrassFamily> {
    if m_len == 0 {
        return Err(Error::InvalidConfig("empty family (M = 0) rejected".into()));
    }
    modulus.validate()?;
    let b: Vec<f64> = (1..=m_len).map(|n| b_spec.value(n)).collect();
    if b.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InfeasibleSequence {
            m: 1 + b.iter().position(|&v| !(v > 0.0)).unwrap_or(0),
            detail: "amplitudes must be positive and finite".into(),
        });
    }
    let tail_bound = b_spec.tail_upper(m_len);
    let data = rational_data(&b, tail_bound, 1)?;
    let two = BigRational::from_integer(BigInt::from(2));
    let pi_up = pi_upper();

    let mut a: Vec<BigInt> = Vec::with_capacity(m_len);
    let mut a_prev = BigInt::one();
    for m in 1..=m_len {
        let bm = &data.b[m - 1];
        let gap = bm / &two - &data.tail_after[m];
        if !gap.is_positive() {
            return Err(Error::InfeasibleSequence {
                m,
                detail: format!(
                    "b_{m}/2 - sum_(n>{m}) b_n = {} <= 0",
                    ratio_to_f64(&gap)
                ),
            });
        }
        let v = gap / BigRational::from_integer(BigInt::from(m));
        let a3_abs = inv_modulus_bound(modulus, &v, m)?;
        let a2_ratio = &two * &pi_up * &data.s_all / bm;
        let a_prev_rat = BigRational::from_integer(a_prev.clone());
        let a3_ratio = a3_abs / &a_prev_rat;
        let ratio_lb = if a2_ratio > a3_ratio { a2_ratio } else { a3_ratio };
        let ratio = ceil_even(&ratio_lb);
        let a_m = &a_prev * &ratio;
        if a_m.bits() > MAX_A_BITS {
            return Err(Error::SequenceOverflow {
                m,
                achieved: m - 1,
                detail: format!("a_{m} would need {} bits", a_m.bits()),
            });
        }
        a.push(a_m.clone());
        a_prev = a_m;
    }

    let fam = WeierstrassFamily {
        b,
        b_form: b_spec.description(),
        c: b_spec.c(),
        a,
        tail_bound,
        modulus: modulus.clone(),
    };
    // A family that fails its own re-verification is a construction bug.
    fam.verify_conditions()?;
    Ok(fam)
}

impl WeierstrassFamily {
    pub fn m_len(&self) -> usize {
        self.a.len()
    }

    /// Exact re-verification of (a1)–(a3) and the positivity gap.
    pub fn verify_conditions(&self) -> Result<()> {
        let data = rational_data(&self.b, self.tail_bound, 1)?;
        let two_int = BigInt::from(2);
        let two = BigRational::from_integer(two_int.clone());
        let pi_up = pi_upper();
        let mut a_prev = BigInt::one();
        for (m, a_m) in self.a.iter().enumerate().map(|(i, a)| (i + 1, a)) {
            // (a1): even positive integers with even consecutive ratios.
            if !a_m.is_positive() || a_m % &two_int != BigInt::zero() {
                return Err(Error::InfeasibleSequence {
                    m,
                    detail: "a_m not an even positive integer".into(),
                });
            }
            if a_m % &a_prev != BigInt::zero() || (a_m / &a_prev) % &two_int != BigInt::zero() {
                return Err(Error::InfeasibleSequence {
                    m,
                    detail: "a_m / a_(m-1) not an even integer".into(),
                });
            }
            let bm = &data.b[m - 1];
            // (a2)
            let ratio = BigRational::from_integer(a_m / &a_prev);
            if ratio < &two * &pi_up * &data.s_all / bm {
                return Err(Error::InfeasibleSequence {
                    m,
                    detail: "(a2) lacunarity bound violated".into(),
                });
            }
            // positivity and (a3)
            let gap = bm / &two - &data.tail_after[m];
            if !gap.is_positive() {
                return Err(Error::InfeasibleSequence {
                    m,
                    detail: "positivity gap violated".into(),
                });
            }
            let v = gap / BigRational::from_integer(BigInt::from(m));
            let a3_abs = inv_modulus_bound(&self.modulus, &v, m)?;
            if BigRational::from_integer(a_m.clone()) < a3_abs {
                return Err(Error::InfeasibleSequence {
                    m,
                    detail: "(a3) frequency bound violated".into(),
                });
            }
            a_prev = a_m.clone();
        }
        Ok(())
    }
}

/// Convert a big rational to the nearest f64, robust to numerator/denominator
/// far outside the f64 exponent range.
pub fn ratio_to_f64(r: &BigRational) -> f64 {
    let numer = r.numer();
    let denom = r.denom();
    if numer.is_zero() {
        return 0.0;
    }
    let neg = numer.sign() == Sign::Minus;
    let n = numer.magnitude().clone();
    let d = denom.magnitude().clone();
    let e = n.bits() as i64 - d.bits() as i64;
    // Form an ~80-bit integer quotient q ≈ |r|·2^shift, then scale back.
    let shift = 80 - e;
    let q = if shift >= 0 {
        (n << shift as u64) / d
    } else {
        n / (d << (-shift) as u64)
    };
    let val = q.to_f64().unwrap_or(f64::INFINITY) * (-shift as f64).exp2();
    if neg {
        -val
    } else {
        val
    }
}

/// r mod 2 into [0, 2), exactly.
fn reduce_mod2(r: &BigRational) -> BigRational {
    let two = BigRational::from_integer(BigInt::from(2));
    r - (r / &two).floor() * &two
}

/// sin(π t) for an exactly reduced rational phase.
fn sin_pi(t: &BigRational) -> f64 {
    (std::f64::consts::PI * ratio_to_f64(&reduce_mod2(t))).sin()
}

fn cos_pi(t: &BigRational) -> f64 {
    (std::f64::consts::PI * ratio_to_f64(&reduce_mod2(t))).cos()
}

/// Partial-sum evaluation with exact mod-2 phase reduction. Returns the value
/// and the truncation error bound Σ_{n>M} b_n.
pub fn eval_weierstrass(fam: &WeierstrassFamily, x: f64) -> (f64, f64) {
    let xr = big(x);
    let mut sum = 0.0;
    for (a_m, &b_m) in fam.a.iter().zip(&fam.b) {
        let phase = BigRational::from_integer(a_m.clone()) * &xr;
        sum += b_m * sin_pi(&phase);
    }
    (sum, fam.tail_bound)
}

/// One probe of the nowhere-ϖ-continuity certificate at scale m.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeResult {
    pub m: usize,
    /// Fractional offset of a_m·x from its nearest integer, in [−1/2, 1/2).
    pub r_m: f64,
    /// The step Δx = a_m^{−1}(−sgn(r_m)/2 − r_m) moving a_m·x to a half-integer.
    pub dx: f64,
    /// |f(x+Δx) − f(x)| / ϖ(|Δx|); exceeds m/2 for a valid family.
    pub quotient: f64,
    /// Set when |r_m| < 1e−12 and the probe carries no information.
    pub degenerate: bool,
}

/// Difference-quotient probes at x for each m in the range, measured against
/// the family's own modulus.
pub fn probe_quotient_growth(
    fam: &WeierstrassFamily,
    x: f64,
    m_range: RangeInclusive<usize>,
) -> Vec<ProbeResult> {
    probe_quotient_growth_with(fam, &fam.modulus, x, m_range)
}

/// Same probe against an arbitrary modulus (a stronger modulus only enlarges
/// the quotients).
pub fn probe_quotient_growth_with(
    fam: &WeierstrassFamily,
    modulus: &ModulusOfContinuity,
    x: f64,
    m_range: RangeInclusive<usize>,
) -> Vec<ProbeResult> {
    let xr = big(x);
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let two = BigRational::from_integer(BigInt::from(2));
    let mut out = Vec::new();
    for m in m_range {
        if m == 0 || m > fam.m_len() {
            continue;
        }
        let a_m = BigRational::from_integer(fam.a[m - 1].clone());
        let p = &a_m * &xr;
        let nearest = (&p + &half).floor();
        let r = &p - &nearest; // in [-1/2, 1/2)
        let r_f = ratio_to_f64(&r);
        if r_f.abs() < 1e-12 {
            out.push(ProbeResult {
                m,
                r_m: r_f,
                dx: 0.0,
                quotient: f64::NAN,
                degenerate: true,
            });
            continue;
        }
        let sgn_half = if r.is_positive() { half.clone() } else { -half.clone() };
        let dx = (-&sgn_half - &r) / &a_m;
        let dx_f = ratio_to_f64(&dx);

        // f(x+Δx) − f(x) term-by-term via
        //   sin A − sin B = 2 cos((A+B)/2) sin((A−B)/2),
        // with both arguments reduced mod 2 exactly; this never subtracts two
        // O(b_n) floats, so no b_1-scale cancellation reaches the m-th scale.
        let mut diff = 0.0;
        for (a_n, &b_n) in fam.a.iter().zip(&fam.b) {
            let a_n = BigRational::from_integer(a_n.clone());
            let mean = &a_n * (&xr + &dx / &two);
            let hdx = &a_n * &dx / &two;
            diff += b_n * 2.0 * cos_pi(&mean) * sin_pi(&hdx);
        }
        let quotient = diff.abs() / modulus.eval(dx_f.abs());
        out.push(ProbeResult {
            m,
            r_m: r_f,
            dx: dx_f,
            quotient,
            degenerate: false,
        });
    }
    out
}

/// Explicit upper modulus ϖ*(h) = 4 Σ_{n>N(h)} b_n with
/// N(h) = max{ N ≤ M : hπ Σ_{n≤N} a_n b_n ≤ 2 Σ_{n>N} b_n }.
pub fn omega_star(fam: &WeierstrassFamily, h: f64) -> f64 {
    let m_len = fam.m_len();
    let a_f: Vec<f64> = fam
        .a
        .iter()
        .map(|a| ratio_to_f64(&BigRational::from_integer(a.clone())))
        .collect();
    // tails[n] = Σ_{j>n} b_j including the beyond-M tail.
    let mut tails = vec![fam.tail_bound; m_len + 1];
    for n in (0..m_len).rev() {
        tails[n] = tails[n + 1] + fam.b[n];
    }
    let mut prefix = 0.0;
    let mut best_n = 0usize; // N = 0 always qualifies (empty sum).
    for n in 1..=m_len {
        prefix += a_f[n - 1] * fam.b[n - 1];
        if h * std::f64::consts::PI * prefix <= 2.0 * tails[n] {
            best_n = n;
        }
    }
    4.0 * tails[best_n]
}
