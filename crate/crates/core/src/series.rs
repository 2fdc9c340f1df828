//! Truncated Fourier–Taylor series Σ p_{kl} y^l e^{i⟨k,x⟩} with sparse
//! coefficient storage and the weighted majorant norm Σ|p_{kl}| s^{|l|} e^{r|k|}.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients whose modulus falls below this are dropped outright. The
/// threshold sits at the denormal boundary: it removes semantic zeros produced
/// by cancellation without ever shaving real mass off the majorant norm.
pub const ZERO_THRESHOLD: f64 = 1e-300;

/// Index of one term: Fourier mode `k` (any sign) and action degree `l`.
///
/// `Ord` is derived, so `BTreeMap<MultiIndexPair, _>` iterates in lexicographic
/// (k, l) order — the canonical order used for serialization and hashing.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MultiIndexPair {
    pub k: Vec<i64>,
    pub l: Vec<u32>,
}

impl MultiIndexPair {
    pub fn new(k: Vec<i64>, l: Vec<u32>) -> Self {
        debug_assert_eq!(k.len(), l.len());
        Self { k, l }
    }

    /// |k| = Σ|k_i|
    pub fn k_order(&self) -> u64 {
        self.k.iter().map(|ki| ki.unsigned_abs()).sum()
    }

    /// |l| = Σ l_i
    pub fn l_order(&self) -> u64 {
        self.l.iter().map(|&li| li as u64).sum()
    }

    fn negated_k(&self) -> Self {
        Self {
            k: self.k.iter().map(|ki| -ki).collect(),
            l: self.l.clone(),
        }
    }
}

/// Domain D(s, r) = { (y, x) : |y| < s, |Im x| < r } on which norms are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticDomain {
    pub s: f64,
    pub r: f64,
}

impl AnalyticDomain {
    pub fn new(s: f64, r: f64) -> Result<Self> {
        if s > 0.0 && r > 0.0 && s.is_finite() && r.is_finite() {
            Ok(Self { s, r })
        } else {
            Err(Error::InvalidDomain { s, r })
        }
    }
}

/// Sparse truncated Fourier–Taylor series.
#[derive(Clone, Debug)]
pub struct FourierTaylorSeries {
    n: usize,
    k_max: u64,
    l_max: u64,
    real: bool,
    coeffs: BTreeMap<MultiIndexPair, Complex64>,
}

#[derive(Serialize, Deserialize)]
struct TermRecord {
    k: Vec<i64>,
    l: Vec<u32>,
    re: f64,
    im: f64,
}

#[derive(Serialize, Deserialize)]
struct SeriesRecord {
    n: usize,
    #[serde(rename = "K_max")]
    k_max: u64,
    #[serde(rename = "L_max")]
    l_max: u64,
    real: bool,
    terms: Vec<TermRecord>,
}

/// Equality is semantic: same dimension and identical coefficient data.
/// Truncation cutoffs and the reality flag are bookkeeping, not content.
impl PartialEq for FourierTaylorSeries {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.coeffs == other.coeffs
    }
}

impl Serialize for FourierTaylorSeries {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let terms = self
            .coeffs
            .iter()
            .map(|(idx, c)| TermRecord {
                k: idx.k.clone(),
                l: idx.l.clone(),
                re: c.re,
                im: c.im,
            })
            .collect();
        SeriesRecord {
            n: self.n,
            k_max: self.k_max,
            l_max: self.l_max,
            real: self.real,
            terms,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for FourierTaylorSeries {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let rec = SeriesRecord::deserialize(de)?;
        let mut out = FourierTaylorSeries::zero(rec.n, rec.k_max, rec.l_max);
        out.real = rec.real;
        for t in rec.terms {
            if t.k.len() != rec.n || t.l.len() != rec.n {
                return Err(serde::de::Error::custom("term index length mismatch"));
            }
            out.add_term(MultiIndexPair::new(t.k, t.l), Complex64::new(t.re, t.im));
        }
        Ok(out)
    }
}

impl FourierTaylorSeries {
    pub fn zero(n: usize, k_max: u64, l_max: u64) -> Self {
        Self {
            n,
            k_max,
            l_max,
            real: true,
            coeffs: BTreeMap::new(),
        }
    }

    /// Constant series c (real flag set iff im(c) = 0).
    pub fn constant(n: usize, c: Complex64) -> Self {
        let mut s = Self::zero(n, 0, 0);
        s.real = c.im == 0.0;
        s.add_term(MultiIndexPair::new(vec![0; n], vec![0; n]), c);
        s
    }

    /// The monomial y_i.
    pub fn action(n: usize, i: usize) -> Self {
        let mut s = Self::zero(n, 0, 1);
        let mut l = vec![0u32; n];
        l[i] = 1;
        s.add_term(MultiIndexPair::new(vec![0; n], l), Complex64::new(1.0, 0.0));
        s
    }

    /// ⟨v, y⟩.
    pub fn linear_in_y(v: &[f64]) -> Self {
        let n = v.len();
        let mut s = Self::zero(n, 0, 1);
        for (i, &vi) in v.iter().enumerate() {
            let mut l = vec![0u32; n];
            l[i] = 1;
            s.add_term(MultiIndexPair::new(vec![0; n], l), Complex64::new(vi, 0.0));
        }
        s
    }

    /// c·cos(⟨k, x⟩), stored as the conjugate pair (c/2)e^{i⟨k,x⟩} + (c/2)e^{−i⟨k,x⟩}.
    pub fn cosine(k: Vec<i64>, c: f64) -> Self {
        let n = k.len();
        let order = k.iter().map(|ki| ki.unsigned_abs()).sum();
        let mut s = Self::zero(n, order, 0);
        let half = Complex64::new(c / 2.0, 0.0);
        let idx = MultiIndexPair::new(k, vec![0; n]);
        let neg = idx.negated_k();
        s.add_term(idx, half);
        s.add_term(neg, half);
        s
    }

    /// c·sin(⟨k, x⟩), stored as (c/2i)e^{i⟨k,x⟩} − (c/2i)e^{−i⟨k,x⟩}.
    pub fn sine(k: Vec<i64>, c: f64) -> Self {
        let n = k.len();
        let order = k.iter().map(|ki| ki.unsigned_abs()).sum();
        let mut s = Self::zero(n, order, 0);
        let half = Complex64::new(0.0, -c / 2.0);
        let idx = MultiIndexPair::new(k, vec![0; n]);
        let neg = idx.negated_k();
        s.add_term(idx, half);
        s.add_term(neg, -half);
        s
    }

    /// Single exponential term c·y^l·e^{i⟨k,x⟩}. Clears the reality flag unless
    /// the term is its own conjugate pair (k = 0, c real).
    pub fn single_term(k: Vec<i64>, l: Vec<u32>, c: Complex64) -> Self {
        let n = k.len();
        let idx = MultiIndexPair::new(k, l);
        let mut s = Self::zero(n, idx.k_order(), idx.l_order());
        s.real = idx.k.iter().all(|&ki| ki == 0) && c.im == 0.0;
        s.add_term(idx, c);
        s
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn k_cutoff(&self) -> u64 {
        self.k_max
    }

    pub fn l_cutoff(&self) -> u64 {
        self.l_max
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.coeffs.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndexPair, &Complex64)> {
        self.coeffs.iter()
    }

    pub fn coefficient(&self, idx: &MultiIndexPair) -> Complex64 {
        self.coeffs
            .get(idx)
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    /// Largest |k| actually present (≤ the declared cutoff).
    pub fn support_k_order(&self) -> u64 {
        self.coeffs.keys().map(|i| i.k_order()).max().unwrap_or(0)
    }

    /// Accumulate a single coefficient, pruning at the zero threshold.
    pub fn add_term(&mut self, idx: MultiIndexPair, c: Complex64) {
        debug_assert_eq!(idx.k.len(), self.n);
        use std::collections::btree_map::Entry;
        match self.coeffs.entry(idx) {
            Entry::Vacant(e) => {
                if c.norm() >= ZERO_THRESHOLD {
                    e.insert(c);
                }
            }
            Entry::Occupied(mut e) => {
                let v = *e.get() + c;
                if v.norm() >= ZERO_THRESHOLD {
                    *e.get_mut() = v;
                } else {
                    e.remove();
                }
            }
        }
        self.k_max = self.k_max.max(self.support_k_order());
        self.l_max = self
            .l_max
            .max(self.coeffs.keys().map(|i| i.l_order()).max().unwrap_or(0));
    }

    /// Declare the series real-valued. Debug builds assert conjugate symmetry.
    pub fn assert_real(mut self) -> Self {
        debug_assert!(self.check_conjugate_symmetry(1e-12));
        self.real = true;
        self
    }

    pub fn check_conjugate_symmetry(&self, tol: f64) -> bool {
        self.coeffs.iter().all(|(idx, c)| {
            let other = self.coefficient(&idx.negated_k());
            (other - c.conj()).norm() <= tol * (1.0 + c.norm())
        })
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.n == other.n {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.n,
                got: other.n,
            })
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let mut out = Self::zero(
            self.n,
            self.k_max.max(other.k_max),
            self.l_max.max(other.l_max),
        );
        out.real = self.real && other.real;
        for (idx, c) in &self.coeffs {
            out.add_term(idx.clone(), *c);
        }
        for (idx, c) in &other.coeffs {
            out.add_term(idx.clone(), *c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = Self::zero(self.n, self.k_max, self.l_max);
        out.real = self.real && c.im == 0.0;
        for (idx, v) in &self.coeffs {
            out.add_term(idx.clone(), v * c);
        }
        out
    }

    pub fn scale_re(&self, c: f64) -> Self {
        self.scale(Complex64::new(c, 0.0))
    }

    /// Full convolution product truncated to |k| ≤ k_cut, |l| ≤ l_cut.
    pub fn multiply(&self, other: &Self, k_cut: u64, l_cut: u64) -> Result<Self> {
        self.check_dims(other)?;
        let mut out = Self::zero(self.n, k_cut.min(self.k_max + other.k_max), l_cut);
        out.real = self.real && other.real;
        for (ia, ca) in &self.coeffs {
            for (ib, cb) in &other.coeffs {
                let k: Vec<i64> = ia.k.iter().zip(&ib.k).map(|(a, b)| a + b).collect();
                let l: Vec<u32> = ia.l.iter().zip(&ib.l).map(|(a, b)| a + b).collect();
                let idx = MultiIndexPair::new(k, l);
                if idx.k_order() > k_cut || idx.l_order() > l_cut {
                    continue;
                }
                out.add_term(idx, ca * cb);
            }
        }
        Ok(out)
    }

    /// ∂/∂y_i (term-wise; exact bookkeeping).
    pub fn deriv_y(&self, i: usize) -> Self {
        let mut out = Self::zero(self.n, self.k_max, self.l_max.saturating_sub(1));
        out.real = self.real;
        for (idx, c) in &self.coeffs {
            if idx.l[i] == 0 {
                continue;
            }
            let mut l = idx.l.clone();
            let pow = l[i] as f64;
            l[i] -= 1;
            out.add_term(MultiIndexPair::new(idx.k.clone(), l), c * pow);
        }
        out
    }

    /// ∂/∂x_i = multiplication of each mode by i·k_i.
    pub fn deriv_x(&self, i: usize) -> Self {
        let mut out = Self::zero(self.n, self.k_max, self.l_max);
        out.real = self.real;
        for (idx, c) in &self.coeffs {
            if idx.k[i] == 0 {
                continue;
            }
            let factor = Complex64::new(0.0, idx.k[i] as f64);
            out.add_term(idx.clone(), c * factor);
        }
        out
    }

    pub fn gradient_y(&self) -> Vec<Self> {
        (0..self.n).map(|i| self.deriv_y(i)).collect()
    }

    pub fn gradient_x(&self) -> Vec<Self> {
        (0..self.n).map(|i| self.deriv_x(i)).collect()
    }

    /// Poisson bracket {F, G} = ⟨∂_x F, ∂_y G⟩ − ⟨∂_y F, ∂_x G⟩, truncated.
    pub fn poisson_bracket(&self, other: &Self, k_cut: u64, l_cut: u64) -> Result<Self> {
        self.check_dims(other)?;
        let mut out = Self::zero(self.n, k_cut, l_cut);
        out.real = self.real && other.real;
        for i in 0..self.n {
            let t1 = self.deriv_x(i).multiply(&other.deriv_y(i), k_cut, l_cut)?;
            let t2 = self.deriv_y(i).multiply(&other.deriv_x(i), k_cut, l_cut)?;
            out = out.add(&t1)?.add(&t2.scale_re(-1.0))?;
        }
        out.real = self.real && other.real;
        Ok(out)
    }

    /// Keep |k| ≤ k_cut, |l| ≤ l_cut; the discarded mass is reported in the
    /// weighted norm of `dom` so truncation-error bookkeeping stays checkable.
    pub fn truncate(&self, k_cut: u64, l_cut: u64, dom: AnalyticDomain) -> (Self, f64) {
        let mut kept = Self::zero(self.n, k_cut.min(self.k_max), l_cut.min(self.l_max));
        kept.real = self.real;
        let mut discarded = 0.0f64;
        for (idx, c) in &self.coeffs {
            if idx.k_order() <= k_cut && idx.l_order() <= l_cut {
                kept.add_term(idx.clone(), *c);
            } else {
                discarded += c.norm()
                    * dom.s.powi(idx.l_order() as i32)
                    * (dom.r * idx.k_order() as f64).exp();
            }
        }
        (kept, discarded)
    }

    /// Angle average [P]: the k = 0 part only.
    pub fn average(&self) -> Self {
        let mut out = Self::zero(self.n, 0, self.l_max);
        out.real = self.real;
        for (idx, c) in &self.coeffs {
            if idx.k_order() == 0 {
                out.add_term(idx.clone(), *c);
            }
        }
        out
    }

    /// Σ |p_{kl}| s^{|l|} e^{r|k|} — an exactly computable upper bound for the
    /// sup norm on D(s, r). Returns +∞ if any term overflows.
    pub fn weighted_norm(&self, dom: AnalyticDomain) -> f64 {
        let mut total = 0.0f64;
        for (idx, c) in &self.coeffs {
            let term =
                c.norm() * dom.s.powi(idx.l_order() as i32) * (dom.r * idx.k_order() as f64).exp();
            if !term.is_finite() {
                return f64::INFINITY;
            }
            total += term;
        }
        total
    }

    /// Σ p_{kl} y^l e^{i⟨k,x⟩} at a real point.
    pub fn evaluate(&self, y: &[f64], x: &[f64]) -> Result<Complex64> {
        if y.len() != self.n || x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: y.len().max(x.len()),
            });
        }
        let mut total = Complex64::new(0.0, 0.0);
        for (idx, c) in &self.coeffs {
            let mut ypow = 1.0;
            for (yi, &li) in y.iter().zip(&idx.l) {
                ypow *= yi.powi(li as i32);
            }
            let phase: f64 = idx
                .k
                .iter()
                .zip(x)
                .map(|(&ki, &xi)| ki as f64 * xi)
                .sum();
            total += c * ypow * Complex64::new(phase.cos(), phase.sin());
        }
        Ok(total)
    }

    /// Real-part evaluation for series carrying the reality flag.
    pub fn evaluate_re(&self, y: &[f64], x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(y, x)?.re)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_series(rng: &mut ChaCha8Rng, n: usize, terms: usize, real: bool) -> FourierTaylorSeries {
        let mut s = FourierTaylorSeries::zero(n, 4, 3);
        for _ in 0..terms {
            let k: Vec<i64> = (0..n).map(|_| rng.gen_range(-2..=2)).collect();
            let l: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=2)).collect();
            let v = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if real {
                let idx = MultiIndexPair::new(k.clone(), l.clone());
                let neg = idx.negated_k();
                s.add_term(idx, v);
                s.add_term(neg, v.conj());
            } else {
                s.add_term(MultiIndexPair::new(k, l), v);
            }
        }
        if real {
            s = s.assert_real();
        }
        s
    }

    #[test]
    fn add_additive_inverse_is_zero() {
        let y1 = FourierTaylorSeries::action(2, 0);
        let sum = y1.add(&y1.scale_re(-1.0)).unwrap();
        assert!(sum.is_zero());
    }

    #[test]
    fn add_conjugate_exponentials_make_cosine() {
        let a = FourierTaylorSeries::single_term(vec![1, 0], vec![0, 0], c(1.0, 0.0));
        let b = FourierTaylorSeries::single_term(vec![-1, 0], vec![0, 0], c(1.0, 0.0));
        let sum = a.add(&b).unwrap().assert_real();
        let cosine = FourierTaylorSeries::cosine(vec![1, 0], 2.0);
        assert_eq!(sum.num_terms(), 2);
        for (idx, v) in sum.terms() {
            assert_abs_diff_eq!((v - cosine.coefficient(idx)).norm(), 0.0, epsilon = 1e-15);
        }
        assert!(sum.is_real());
    }

    #[test]
    fn add_matches_bruteforce_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_series(&mut rng, 2, 10, false);
            let b = random_series(&mut rng, 2, 10, false);
            let sum = a.add(&b).unwrap();
            let mut keys: Vec<MultiIndexPair> = a.terms().map(|(i, _)| i.clone()).collect();
            keys.extend(b.terms().map(|(i, _)| i.clone()));
            for idx in keys {
                let expect = a.coefficient(&idx) + b.coefficient(&idx);
                assert_abs_diff_eq!((sum.coefficient(&idx) - expect).norm(), 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn multiply_monomials() {
        let y1 = FourierTaylorSeries::action(2, 0);
        let sq = y1.multiply(&y1, 4, 4).unwrap();
        assert_eq!(sq.num_terms(), 1);
        let idx = MultiIndexPair::new(vec![0, 0], vec![2, 0]);
        assert_abs_diff_eq!((sq.coefficient(&idx) - c(1.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn multiply_mode_cancellation() {
        let a = FourierTaylorSeries::single_term(vec![1, 0], vec![0, 0], c(1.0, 0.0));
        let b = FourierTaylorSeries::single_term(vec![-1, 0], vec![0, 0], c(1.0, 0.0));
        let p = a.multiply(&b, 4, 4).unwrap();
        assert_eq!(p.num_terms(), 1);
        let idx = MultiIndexPair::new(vec![0, 0], vec![0, 0]);
        assert_abs_diff_eq!((p.coefficient(&idx) - c(1.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn multiply_matches_pointwise_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_series(&mut rng, 2, 12, false);
        let b = random_series(&mut rng, 2, 12, false);
        // Cutoffs cover the full true support, so truncation loses nothing.
        let p = a.multiply(&b, 16, 12).unwrap();
        for _ in 0..25 {
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..6.28)).collect();
            let lhs = p.evaluate(&y, &x).unwrap();
            let rhs = a.evaluate(&y, &x).unwrap() * b.evaluate(&y, &x).unwrap();
            assert_abs_diff_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bracket_single_mode_closed_form() {
        // F = <omega, y> with omega=(1,2), G = e^{i x1} -> {F,G} = -i e^{i x1}.
        let f = FourierTaylorSeries::linear_in_y(&[1.0, 2.0]);
        let g = FourierTaylorSeries::single_term(vec![1, 0], vec![0, 0], c(1.0, 0.0));
        let br = f.poisson_bracket(&g, 4, 4).unwrap();
        assert_eq!(br.num_terms(), 1);
        let idx = MultiIndexPair::new(vec![1, 0], vec![0, 0]);
        assert_abs_diff_eq!((br.coefficient(&idx) - c(0.0, -1.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn bracket_self_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_series(&mut rng, 2, 15, true);
        let br = f.poisson_bracket(&f, 8, 6).unwrap();
        let dom = AnalyticDomain::new(0.5, 0.5).unwrap();
        assert!(br.weighted_norm(dom) <= 1e-14 * (1.0 + f.weighted_norm(dom).powi(2)));
    }

    #[test]
    fn bracket_with_x_independent_vanishes() {
        let y1 = FourierTaylorSeries::action(2, 0);
        let g = FourierTaylorSeries::linear_in_y(&[3.0, -1.0])
            .add(&FourierTaylorSeries::constant(2, c(7.0, 0.0)))
            .unwrap();
        let br = y1.poisson_bracket(&g, 4, 4).unwrap();
        assert!(br.is_zero());
    }

    #[test]
    fn bracket_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_series(&mut rng, 2, 10, false);
            let b = random_series(&mut rng, 2, 10, false);
            let ab = a.poisson_bracket(&b, 10, 8).unwrap();
            let ba = b.poisson_bracket(&a, 10, 8).unwrap();
            let sum = ab.add(&ba).unwrap();
            for (_, v) in sum.terms() {
                assert!(v.norm() <= 1e-14);
            }
        }
    }

    #[test]
    fn bracket_jacobi_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dom = AnalyticDomain::new(0.3, 0.2).unwrap();
        for _ in 0..5 {
            let a = random_series(&mut rng, 2, 6, false);
            let b = random_series(&mut rng, 2, 6, false);
            let cc = random_series(&mut rng, 2, 6, false);
            // Cutoffs large enough that no bracket term is lost to truncation.
            let (kc, lc) = (40, 12);
            let t1 = a.poisson_bracket(&b.poisson_bracket(&cc, kc, lc).unwrap(), kc, lc).unwrap();
            let t2 = b.poisson_bracket(&cc.poisson_bracket(&a, kc, lc).unwrap(), kc, lc).unwrap();
            let t3 = cc.poisson_bracket(&a.poisson_bracket(&b, kc, lc).unwrap(), kc, lc).unwrap();
            let total = t1.add(&t2).unwrap().add(&t3).unwrap();
            let bound = a.weighted_norm(dom) * b.weighted_norm(dom) * cc.weighted_norm(dom);
            assert!(total.weighted_norm(dom) <= 1e-10 * bound.max(1.0));
        }
    }

    #[test]
    fn truncate_is_idempotent_on_supported_series() {
        let p = FourierTaylorSeries::cosine(vec![1, 0], 1.0)
            .add(&FourierTaylorSeries::action(2, 0))
            .unwrap();
        let dom = AnalyticDomain::new(1.0, 1.0).unwrap();
        let (kept, mass) = p.truncate(2, 4, dom);
        assert_eq!(kept, p.truncate(2, 4, dom).0);
        assert_abs_diff_eq!(mass, 0.0);
        assert_eq!(kept.num_terms(), p.num_terms());
    }

    #[test]
    fn truncate_reports_discarded_mass() {
        let hi = FourierTaylorSeries::single_term(vec![3, 0], vec![0, 0], c(1.0, 0.0));
        let p = hi.add(&FourierTaylorSeries::action(2, 0)).unwrap();
        let dom = AnalyticDomain::new(0.5, 0.25).unwrap();
        let (kept, mass) = p.truncate(1, 4, dom);
        assert_eq!(kept.num_terms(), 1);
        assert_abs_diff_eq!(mass, hi.weighted_norm(dom), epsilon = 1e-15);
    }

    #[test]
    fn truncate_norm_subadditivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dom = AnalyticDomain::new(0.7, 0.3).unwrap();
        for _ in 0..10 {
            let p = random_series(&mut rng, 2, 20, false);
            let (kept, _) = p.truncate(2, 2, dom);
            let rest = p.sub(&kept).unwrap();
            let (a, b, total) = (
                kept.weighted_norm(dom),
                rest.weighted_norm(dom),
                p.weighted_norm(dom),
            );
            assert!(a + b >= total - 1e-12);
            assert!(total >= a.max(b) - 1e-12);
        }
    }

    #[test]
    fn average_of_cosine_is_zero() {
        let p = FourierTaylorSeries::cosine(vec![1, 0], 1.0);
        assert!(p.average().is_zero());
    }

    #[test]
    fn average_keeps_zero_modes() {
        let p = FourierTaylorSeries::constant(2, c(3.0, 0.0))
            .add(&FourierTaylorSeries::cosine(vec![1, 0], 1.0))
            .unwrap()
            .add(&FourierTaylorSeries::action(2, 1))
            .unwrap();
        let avg = p.average();
        assert_eq!(avg.num_terms(), 2);
        assert_abs_diff_eq!(
            (avg.coefficient(&MultiIndexPair::new(vec![0, 0], vec![0, 0])) - c(3.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            (avg.coefficient(&MultiIndexPair::new(vec![0, 0], vec![0, 1])) - c(1.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn average_matches_angle_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = random_series(&mut rng, 2, 15, true);
        let avg = p.average();
        // 64-point rectangle rule per angle is exact for |k| <= 4 trig modes.
        let grid = 64usize;
        let mut sum = Complex64::new(0.0, 0.0);
        for i in 0..grid {
            for j in 0..grid {
                let x = [
                    2.0 * std::f64::consts::PI * i as f64 / grid as f64,
                    2.0 * std::f64::consts::PI * j as f64 / grid as f64,
                ];
                sum += p.evaluate(&[0.0, 0.0], &x).unwrap();
            }
        }
        sum /= (grid * grid) as f64;
        let expect = avg.evaluate(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!((sum - expect).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn weighted_norm_single_terms() {
        let dom = AnalyticDomain::new(0.5, 0.3).unwrap();
        let e = FourierTaylorSeries::single_term(vec![2, -1], vec![0, 0], c(0.7, 0.0));
        assert_abs_diff_eq!(e.weighted_norm(dom), 0.7 * (0.3f64 * 3.0).exp(), epsilon = 1e-15);
        let y1 = FourierTaylorSeries::action(2, 0);
        assert_abs_diff_eq!(y1.weighted_norm(dom), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn weighted_norm_dominates_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = random_series(&mut rng, 2, 20, true);
        let dom = AnalyticDomain::new(0.4, 0.2).unwrap();
        let bound = p.weighted_norm(dom);
        for _ in 0..1000 {
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.4..0.4)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..6.28)).collect();
            let v = p.evaluate(&y, &x).unwrap().norm();
            assert!(v <= bound + 1e-12);
        }
    }

    #[test]
    fn weighted_norm_submultiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let dom = AnalyticDomain::new(0.6, 0.25).unwrap();
        for _ in 0..10 {
            let a = random_series(&mut rng, 2, 8, false);
            let b = random_series(&mut rng, 2, 8, false);
            let p = a.multiply(&b, 16, 12).unwrap();
            assert!(p.weighted_norm(dom) <= a.weighted_norm(dom) * b.weighted_norm(dom) + 1e-12);
        }
    }

    #[test]
    fn evaluate_closed_forms() {
        let p = FourierTaylorSeries::cosine(vec![1, 0], 1.0);
        assert_abs_diff_eq!(p.evaluate_re(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0, epsilon = 1e-15);
        let y1y2 = FourierTaylorSeries::action(2, 0)
            .multiply(&FourierTaylorSeries::action(2, 1), 4, 4)
            .unwrap();
        assert_abs_diff_eq!(y1y2.evaluate_re(&[2.0, 3.0], &[0.1, 0.2]).unwrap(), 6.0, epsilon = 1e-14);
    }

    #[test]
    fn evaluate_real_series_has_tiny_imaginary_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let dom = AnalyticDomain::new(0.5, 0.2).unwrap();
        for _ in 0..20 {
            let p = random_series(&mut rng, 2, 15, true);
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..6.28)).collect();
            let v = p.evaluate(&y, &x).unwrap();
            assert!(v.im.abs() <= 1e-12 * p.weighted_norm(dom).max(1.0));
        }
    }

    #[test]
    fn evaluate_is_homomorphic() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let a = random_series(&mut rng, 2, 8, false);
        let b = random_series(&mut rng, 2, 8, false);
        let sum = a.add(&b).unwrap();
        let prod = a.multiply(&b, 16, 12).unwrap();
        for _ in 0..10 {
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..6.28)).collect();
            let (va, vb) = (a.evaluate(&y, &x).unwrap(), b.evaluate(&y, &x).unwrap());
            assert_abs_diff_eq!((sum.evaluate(&y, &x).unwrap() - (va + vb)).norm(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!((prod.evaluate(&y, &x).unwrap() - va * vb).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradients_closed_forms() {
        let h = FourierTaylorSeries::linear_in_y(&[1.5, -2.0]);
        let gy = h.gradient_y();
        assert_abs_diff_eq!(gy[0].evaluate_re(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(gy[1].evaluate_re(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), -2.0, epsilon = 1e-15);

        let e = FourierTaylorSeries::single_term(vec![1, 0], vec![0, 0], c(1.0, 0.0));
        let gx = e.deriv_x(0);
        let idx = MultiIndexPair::new(vec![1, 0], vec![0, 0]);
        assert_abs_diff_eq!((gx.coefficient(&idx) - c(0.0, 1.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let p = random_series(&mut rng, 2, 12, true);
        let gy = p.gradient_y();
        let gx = p.gradient_x();
        let h = 1e-6;
        for _ in 0..100 {
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..6.28)).collect();
            for i in 0..2 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[i] += h;
                ym[i] -= h;
                let fd = (p.evaluate_re(&yp, &x).unwrap() - p.evaluate_re(&ym, &x).unwrap()) / (2.0 * h);
                let an = gy[i].evaluate_re(&y, &x).unwrap();
                assert!((fd - an).abs() <= 1e-7 * (1.0 + an.abs()));

                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (p.evaluate_re(&y, &xp).unwrap() - p.evaluate_re(&y, &xm).unwrap()) / (2.0 * h);
                let an = gx[i].evaluate_re(&y, &x).unwrap();
                assert!((fd - an).abs() <= 1e-7 * (1.0 + an.abs()));
            }
        }
    }

    #[test]
    fn reality_flag_propagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let a = random_series(&mut rng, 2, 10, true);
        let b = random_series(&mut rng, 2, 10, true);
        assert!(a.add(&b).unwrap().is_real());
        assert!(a.multiply(&b, 10, 8).unwrap().is_real());
        assert!(a.poisson_bracket(&b, 10, 8).unwrap().is_real());
        assert!(a.truncate(2, 2, AnalyticDomain::new(1.0, 1.0).unwrap()).0.is_real());
        assert!(a.average().is_real());
        assert!(a.deriv_x(0).is_real());
        assert!(a.deriv_y(1).is_real());
        // And the flag is honest: outputs keep conjugate symmetry.
        assert!(a.multiply(&b, 10, 8).unwrap().check_conjugate_symmetry(1e-12));
        assert!(a.poisson_bracket(&b, 10, 8).unwrap().check_conjugate_symmetry(1e-12));
    }

    #[test]
    fn json_round_trip_is_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let p = random_series(&mut rng, 2, 15, true);
        let text = serde_json::to_string(&p).unwrap();
        let back: FourierTaylorSeries = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
        assert_eq!(text, serde_json::to_string(&back).unwrap());
    }
}
