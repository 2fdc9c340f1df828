//! One full normal-form step: truncation, homological solve, time-1 Lie
//! transform, normal-form extraction, and frequency-preserving parameter
//! translation — plus the pipeline that replays the whole chain at arbitrary
//! parameter values so the accumulated drift stays an evaluable function of ξ.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frequency::FrequencyMap;
use crate::ode;
use crate::series::{AnalyticDomain, FourierTaylorSeries, MultiIndexPair};

pub type ParamFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type SeriesFamily = Arc<dyn Fn(&[f64]) -> FourierTaylorSeries + Send + Sync>;

/// Integrable part N = e + ⟨ω₀, y⟩ + h̄(y) carried through the iteration.
/// The drift vectors ⟨p₀₁ʲ(ξ), y⟩ live in the pipeline as functions of ξ.
#[derive(Clone, Debug)]
pub struct NormalForm {
    pub e: f64,
    pub omega0: Vec<f64>,
    /// k = 0 only, 2 ≤ |l| ≤ 4.
    pub hbar: FourierTaylorSeries,
}

impl NormalForm {
    pub fn new(e: f64, omega0: Vec<f64>, hbar: FourierTaylorSeries) -> Self {
        debug_assert!(hbar
            .terms()
            .all(|(idx, _)| idx.k_order() == 0 && (2..=4).contains(&idx.l_order())));
        Self { e, omega0, hbar }
    }

    pub fn series(&self) -> FourierTaylorSeries {
        let n = self.omega0.len();
        FourierTaylorSeries::constant(n, Complex64::new(self.e, 0.0))
            .add(&FourierTaylorSeries::linear_in_y(&self.omega0))
            .and_then(|s| s.add(&self.hbar))
            .expect("matched dims")
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub nu: usize,
    pub xi_next: Vec<f64>,
    /// |ω(ξ₊) + Σ_{j≤ν} p₀₁ʲ(ξ₊) − ω(ξ₀)| after the translation.
    pub freq_residual: f64,
    /// |ξ₊ − ξ_ν|, floored by the analytic bound ϖ₂^{−1}(2|p₀₁^ν(ξ₊)|) when the
    /// measured move is below solver resolution.
    pub xi_increment: f64,
    pub p_before: f64,
    pub r_norm: f64,
    pub p_minus_r: f64,
    pub f_norm: f64,
    pub p_after: f64,
    /// ‖{N,F} + R − [R]‖ / ‖R − [R]‖ on the solve domain.
    pub homological_residual: f64,
    /// max over sampled points of ‖(DΦ)ᵀJ(DΦ) − J‖ / ‖DΦ‖².
    pub symplectic_defect: f64,
    /// ‖ad_F^{J+1}(H)‖ / (J+1)! — the dropped Lie-series tail.
    pub transform_tail: f64,
    pub translation_evals: usize,
    pub drift: Vec<f64>,
    /// ‖h̄_{ν+1}‖ at ξ₊ — monitored against the 2√μ* drift budget.
    pub hbar_norm: f64,
}

/// Enumerate all action multi-indices with |l| ≤ deg, lexicographically.
fn action_basis(n: usize, deg: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; n];
    fn rec(cur: &mut Vec<u32>, pos: usize, left: u32, out: &mut Vec<Vec<u32>>) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[pos] = v;
            rec(cur, pos + 1, left - v, out);
        }
        cur[pos] = 0;
    }
    rec(&mut cur, 0, deg, &mut out);
    out.sort();
    out
}

/// Solve {N, F} + R − [R] = 0 for F, mode by mode.
///
/// For each Fourier mode k the equation reads i⟨k, ω₀ + ∂_y h̄(y)⟩ F_k(y) =
/// R_k(y) in the degree-≤4 truncated polynomial algebra; the multiplication
/// operator is assembled as a dense matrix over the monomial basis — in
/// s-scaled coordinates (coefficients × s^{|l|}), where the smallness
/// condition s < γ/(2(M*+2)K^{τ+1}) keeps the nilpotent off-diagonal part
/// dominated by the constant divisor i⟨k, ω₀⟩.
pub fn solve_homological(
    nf: &NormalForm,
    rhs: &FourierTaylorSeries,
    gamma: f64,
    tau: f64,
    k_cut: u64,
    s_scale: f64,
) -> Result<FourierTaylorSeries> {
    let n = rhs.dim();
    let basis = action_basis(n, 4);
    let index: HashMap<Vec<u32>, usize> =
        basis.iter().enumerate().map(|(i, b)| (b.clone(), i)).collect();
    let dim = basis.len();

    // ⟨k, ∂_y h̄(y)⟩ monomials, reused across modes (only k-weights change).
    let dh: Vec<FourierTaylorSeries> = nf.hbar.gradient_y();

    // Group rhs coefficients by mode.
    let mut modes: HashMap<Vec<i64>, Vec<(Vec<u32>, Complex64)>> = HashMap::new();
    for (idx, c) in rhs.terms() {
        if idx.k_order() == 0 {
            continue; // the average has no homological counterpart
        }
        modes
            .entry(idx.k.clone())
            .or_default()
            .push((idx.l.clone(), *c));
    }
    let mut keys: Vec<Vec<i64>> = modes.keys().cloned().collect();
    keys.sort();

    let mut f = FourierTaylorSeries::zero(n, rhs.k_cutoff(), 4);
    for k in keys {
        let k_order: u64 = k.iter().map(|ki| ki.unsigned_abs()).sum();
        if k_order > k_cut {
            continue;
        }
        let d0: f64 = k
            .iter()
            .zip(&nf.omega0)
            .map(|(&ki, &wi)| ki as f64 * wi)
            .sum();
        let floor = gamma * (k_order as f64).powf(-tau);
        if d0.abs() < floor {
            return Err(Error::DivisorBelowFloor {
                k: k.clone(),
                divisor: d0.abs(),
                floor,
            });
        }

        // M = i(d0 I + Nil) in scaled coordinates.
        let mut mat = DMatrix::<Complex64>::zeros(dim, dim);
        for i in 0..dim {
            mat[(i, i)] = Complex64::new(0.0, d0);
        }
        for (axis, dh_axis) in dh.iter().enumerate() {
            let kw = k[axis] as f64;
            if kw == 0.0 {
                continue;
            }
            for (midx, c) in dh_axis.terms() {
                debug_assert_eq!(midx.k_order(), 0);
                let q = &midx.l;
                let qdeg: u32 = q.iter().sum();
                let weight = Complex64::new(0.0, kw) * c * s_scale.powi(qdeg as i32);
                for (col, src) in basis.iter().enumerate() {
                    let tgt: Vec<u32> = src.iter().zip(q).map(|(a, b)| a + b).collect();
                    if tgt.iter().sum::<u32>() > 4 {
                        continue;
                    }
                    let row = index[&tgt];
                    mat[(row, col)] += weight;
                }
            }
        }

        let mut r_vec = DVector::<Complex64>::zeros(dim);
        for (l, c) in &modes[&k] {
            let deg: u32 = l.iter().sum();
            r_vec[index[l]] = c * s_scale.powi(deg as i32);
        }

        let lu = mat.clone().lu();
        let sol = lu.solve(&r_vec).ok_or_else(|| {
            let diag: Vec<f64> = (0..dim).map(|i| lu.u()[(i, i)].norm()).collect();
            let max = diag.iter().cloned().fold(0.0, f64::max);
            let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            Error::SingularSystem {
                k: k.clone(),
                rcond: if max > 0.0 { min / max } else { 0.0 },
            }
        })?;

        for (i, l) in basis.iter().enumerate() {
            let deg: u32 = l.iter().sum();
            let val = sol[i] / s_scale.powi(deg as i32);
            f.add_term(MultiIndexPair::new(k.clone(), l.clone()), val);
        }
    }
    if rhs.is_real() {
        debug_assert!(f.check_conjugate_symmetry(1e-9));
        f = f.assert_real();
    }
    Ok(f)
}

/// Σ_{j=0}^{J} ad_F^j(H)/j!, with ad_F(H) = {H, F} (so the sum evaluates
/// H ∘ φ_F¹ for the time-1 flow of F under this bracket convention), together
/// with the norm of the first dropped term.
pub fn lie_transform(
    h: &FourierTaylorSeries,
    f: &FourierTaylorSeries,
    order: usize,
    k_cut: u64,
    l_cut: u64,
    dom: AnalyticDomain,
) -> Result<(FourierTaylorSeries, f64)> {
    assert!(order >= 2, "Lie order must be at least 2");
    let mut acc = h.clone();
    let mut term = h.clone();
    for j in 1..=order {
        term = term.poisson_bracket(f, k_cut, l_cut)?.scale_re(1.0 / j as f64);
        acc = acc.add(&term)?;
    }
    let tail = term
        .poisson_bracket(f, k_cut, l_cut)?
        .scale_re(1.0 / (order + 1) as f64)
        .weighted_norm(dom);
    Ok((acc, tail))
}

/// Sort a transformed Hamiltonian into normal-form increments and the new
/// perturbation: constant average → e, linear average → p₀₁, degree-2..4
/// average → h̄ increment; every other term (all k ≠ 0 terms and any |l| > 4
/// average) is the new perturbation.
pub fn split_after_transform(
    h_new: &FourierTaylorSeries,
) -> (f64, Vec<f64>, FourierTaylorSeries, FourierTaylorSeries) {
    let n = h_new.dim();
    let mut e_inc = 0.0;
    let mut p01 = vec![0.0; n];
    let mut hbar_inc = FourierTaylorSeries::zero(n, 0, 4);
    let mut p_plus = FourierTaylorSeries::zero(n, h_new.k_cutoff(), h_new.l_cutoff());
    for (idx, c) in h_new.terms() {
        if idx.k_order() == 0 {
            match idx.l_order() {
                0 => e_inc = c.re,
                1 => {
                    let axis = idx.l.iter().position(|&v| v == 1).unwrap();
                    p01[axis] = c.re;
                }
                2..=4 => hbar_inc.add_term(idx.clone(), *c),
                _ => p_plus.add_term(idx.clone(), *c),
            }
        } else {
            p_plus.add_term(idx.clone(), *c);
        }
    }
    if h_new.is_real() {
        hbar_inc = hbar_inc.assert_real();
        p_plus = p_plus.assert_real();
    }
    (e_inc, p01, hbar_inc, p_plus)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Residual ω(ξ) + Σ drift_j(ξ) − ω(ξ₀) driven to zero by the root search.
fn freq_residual_fn(map: &FrequencyMap, drifts: &[ParamFn], xi: &[f64]) -> Vec<f64> {
    let omega0 = map.omega0();
    let mut g = map.eval(xi);
    for d in drifts {
        for (gi, di) in g.iter_mut().zip(d(xi)) {
            *gi += di;
        }
    }
    g.iter_mut().zip(&omega0).for_each(|(gi, &w)| *gi -= w);
    g
}

/// Damped quasi-Newton with a forward-difference Jacobian, falling back to
/// deterministic compass search (required for maps certified only through a
/// modulus lower bound, where no derivative exists to difference).
pub fn root_solve(
    map: &FrequencyMap,
    g: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    start: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, f64, usize)> {
    let n = map.dim();
    let delta = map.ball_radius;
    let center = map.base_point.clone();
    let mut evals = 0usize;
    let mut eval = |xi: &[f64], evals: &mut usize| -> Vec<f64> {
        *evals += 1;
        g(xi)
    };

    let mut x = start.to_vec();
    let mut res = eval(&x, &mut evals);
    let mut r = norm2(&res);
    let mut best = (x.clone(), r);

    let in_ball = |xi: &[f64]| -> bool {
        xi.iter()
            .zip(&center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            < delta
    };

    if map.smooth {
        let h = 1e-7 * delta;
        for _ in 0..60 {
            if r <= tol {
                return Ok((x, r, evals));
            }
            let mut jac = DMatrix::<f64>::zeros(n, n);
            for j in 0..n {
                let mut xp = x.clone();
                xp[j] += h;
                let rp = eval(&xp, &mut evals);
                for i in 0..n {
                    jac[(i, j)] = (rp[i] - res[i]) / h;
                }
            }
            let rhs = DVector::from_iterator(n, res.iter().map(|v| -v));
            let Some(dir) = jac.lu().solve(&rhs) else {
                break; // singular Jacobian: let the pattern search take over
            };
            let mut lambda = 1.0;
            let mut moved = false;
            for _ in 0..25 {
                let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(xi, di)| xi + lambda * di).collect();
                if in_ball(&cand) {
                    let rc = eval(&cand, &mut evals);
                    let rn = norm2(&rc);
                    if rn < r {
                        x = cand;
                        res = rc;
                        r = rn;
                        moved = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if r < best.1 {
                best = (x.clone(), r);
            }
            if !moved {
                break;
            }
        }
        if r <= tol {
            return Ok((x, r, evals));
        }
    }

    // Compass pattern search from the best point found so far.
    let (mut x, mut r) = best.clone();
    let mut res_scale = r.max(tol);
    let mut radius = (res_scale * 2.0).min(0.25 * delta).max(16.0 * tol);
    while radius > 1e-17 && evals < 20_000 {
        if r <= tol {
            return Ok((x, r, evals));
        }
        let mut improved = false;
        for axis in 0..n {
            for sgn in [-1.0, 1.0] {
                let mut cand = x.clone();
                cand[axis] += sgn * radius;
                if !in_ball(&cand) {
                    continue;
                }
                let rc = norm2(&eval(&cand, &mut evals));
                if rc < r {
                    x = cand;
                    r = rc;
                    improved = true;
                }
            }
        }
        if !improved {
            radius *= 0.5;
        } else {
            res_scale = r;
            radius = radius.min(res_scale * 2.0).max(radius * 0.5);
        }
    }
    if r <= tol {
        return Ok((x, r, evals));
    }
    if r < best.1 {
        best = (x, r);
    }
    let boundary_dist = map.ball_radius
        - best
            .0
            .iter()
            .zip(&map.base_point)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    if boundary_dist < 1e-3 * map.ball_radius {
        return Err(Error::BallBoundary {
            dist: map.ball_radius - boundary_dist,
            limit: map.ball_radius,
        });
    }
    Err(Error::TranslationFailed {
        best_residual: best.1,
        evals,
        tol,
    })
}

/// Solve ω(ξ₊) + Σ_j drift_j(ξ₊) = ω(ξ₀) for ξ₊ inside B(ξ₀, δ).
pub fn translate_parameter(
    map: &FrequencyMap,
    drifts: &[ParamFn],
    xi_current: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    let mut g = |xi: &[f64]| freq_residual_fn(map, drifts, xi);
    root_solve(map, &mut g, xi_current, tol).map(|(xi, _, _)| xi)
}

/// Max over sampled phase points of ‖(DΦ)ᵀJ(DΦ) − J‖_F / ‖DΦ‖_F², where Φ is
/// the numerically integrated time-1 flow of F and DΦ a central-difference
/// Jacobian.
pub fn symplectic_defect(f: &FourierTaylorSeries, samples: usize, seed: u64) -> Result<f64> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let n = f.dim();
    let gy = f.gradient_y();
    let gx = f.gradient_x();
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
    let flow = |z0: &[f64]| -> Result<Vec<f64>> { ode::integrate(field, 0.0, z0, 1.0, 1e-12, 1e-14) };

    let mut jmat = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        jmat[(i, n + i)] = -1.0;
        jmat[(n + i, i)] = 1.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut z0: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        z0.extend((0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)));
        let mut dphi = DMatrix::<f64>::zeros(2 * n, 2 * n);
        for j in 0..2 * n {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[j] += h;
            zm[j] -= h;
            let fp = flow(&zp)?;
            let fm = flow(&zm)?;
            for i in 0..2 * n {
                dphi[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let defect = (dphi.transpose() * &jmat * &dphi - &jmat).norm();
        let scale = dphi.norm().powi(2);
        worst = worst.max(defect / scale);
    }
    Ok(worst)
}

/// Geometry of one step: Fourier cutoff, measuring domains, and the scaled
/// action radius used inside the per-mode homological systems.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepGeometry {
    pub k_cut: u64,
    pub dom: AnalyticDomain,
    pub dom_next: AnalyticDomain,
    pub s_solve: f64,
}

/// Problem data: the frequency map, the ξ-indexed perturbation family, and ε.
#[derive(Clone)]
pub struct Problem {
    pub map: FrequencyMap,
    pub perturbation: SeriesFamily,
    pub eps: f64,
}

/// State after ν steps, held at the current parameter value ξ_ν.
#[derive(Clone, Debug)]
pub struct KamState {
    pub nu: usize,
    pub xi: Vec<f64>,
    pub e: f64,
    pub hbar: FourierTaylorSeries,
    pub pert: FourierTaylorSeries,
    pub dom: AnalyticDomain,
}

/// Everything the transformation chain produces at one parameter value.
#[derive(Clone)]
struct Unfolded {
    e: f64,
    /// ω(ξ) + Σ_{j<upto} p₀₁ʲ(ξ).
    lambda: Vec<f64>,
    hbar: FourierTaylorSeries,
    pert: FourierTaylorSeries,
    stages: Vec<StageDiag>,
}

#[derive(Clone)]
struct StageDiag {
    p_before: f64,
    r_norm: f64,
    p_minus_r: f64,
    f_norm: f64,
    homological_residual: f64,
    transform_tail: f64,
    drift: Vec<f64>,
    f: FourierTaylorSeries,
}

/// Replays the whole transformation chain at arbitrary ξ. The drift functions
/// p₀₁ʲ(ξ) required by the frequency-preserving translation are never stored;
/// they are re-derived by unfolding, with per-ξ memoization.
pub struct Pipeline {
    pub problem: Problem,
    pub gamma: f64,
    pub tau: f64,
    pub lie_order: usize,
    pub l_cut: u64,
    pub trans_tol: f64,
    pub defect_samples: usize,
    steps: Vec<StepGeometry>,
    cache: HashMap<(usize, Vec<u64>), Unfolded>,
}

impl Pipeline {
    pub fn new(problem: Problem, gamma: f64, tau: f64, trans_tol: f64) -> Self {
        Self {
            problem,
            gamma,
            tau,
            lie_order: 6,
            l_cut: 8,
            trans_tol,
            defect_samples: 20,
            steps: Vec::new(),
            cache: HashMap::new(),
        }
    }

    pub fn initial_state(&self, dom: AnalyticDomain) -> KamState {
        let n = self.problem.map.dim();
        let xi = self.problem.map.base_point.clone();
        let pert = (self.problem.perturbation)(&xi).scale_re(self.problem.eps);
        KamState {
            nu: 0,
            xi,
            e: 0.0,
            hbar: FourierTaylorSeries::zero(n, 0, 4),
            pert,
            dom,
        }
    }

    pub fn geometry(&self) -> &[StepGeometry] {
        &self.steps
    }

    /// Drop a failed step's geometry and every cache entry computed under it.
    fn rollback(&mut self, nu: usize) {
        self.steps.truncate(nu);
        self.cache.retain(|(upto, _), _| *upto <= nu);
    }

    fn cache_key(upto: usize, xi: &[f64]) -> (usize, Vec<u64>) {
        (upto, xi.iter().map(|v| v.to_bits()).collect())
    }

    fn unfold(&mut self, xi: &[f64], upto: usize) -> Result<Unfolded> {
        debug_assert!(upto <= self.steps.len());
        let key = Self::cache_key(upto, xi);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let mut current = if upto == 0 {
            let n = self.problem.map.dim();
            Unfolded {
                e: 0.0,
                lambda: self.problem.map.eval(xi),
                hbar: FourierTaylorSeries::zero(n, 0, 4),
                pert: (self.problem.perturbation)(xi).scale_re(self.problem.eps),
                stages: Vec::new(),
            }
        } else {
            let prev = self.unfold(xi, upto - 1)?;
            let geo = self.steps[upto - 1];
            self.apply_stage(prev, geo)?
        };
        current.stages.truncate(upto);
        self.cache.insert(key, current.clone());
        Ok(current)
    }

    fn apply_stage(&self, prev: Unfolded, geo: StepGeometry) -> Result<Unfolded> {
        let n = self.problem.map.dim();
        let omega0 = self.problem.map.omega0();
        let p_before = prev.pert.weighted_norm(geo.dom);

        // Truncation R = Σ_{|k|≤K, |l|≤4}.
        let (r, _discard) = prev.pert.truncate(geo.k_cut, 4, geo.dom);
        let r_norm = r.weighted_norm(geo.dom);
        let p_minus_r = prev.pert.sub(&r)?.weighted_norm(geo.dom);

        // Homological solve with the frozen target frequency in the divisors.
        let rhs = r.sub(&r.average())?;
        let nf = NormalForm {
            e: prev.e,
            omega0: omega0.clone(),
            hbar: prev.hbar.clone(),
        };
        let f = solve_homological(&nf, &rhs, self.gamma, self.tau, geo.k_cut, geo.s_solve)?;
        let solve_dom = AnalyticDomain::new(geo.s_solve, geo.dom.r)?;
        // Residual of the solved equation on the degree-<=4 quotient; the
        // action-dependent part of the divisor leaks an O(s^4) degree-5 tail
        // that the transform (not the solve) is responsible for.
        let (resid_kl, _) = nf
            .series()
            .poisson_bracket(&f, geo.k_cut + nf.hbar.k_cutoff(), 8)?
            .add(&rhs)?
            .truncate(geo.k_cut + nf.hbar.k_cutoff(), 4, solve_dom);
        let rhs_norm = rhs.weighted_norm(solve_dom);
        let homological_residual = if rhs_norm > 0.0 {
            resid_kl.weighted_norm(solve_dom) / rhs_norm
        } else {
            0.0
        };
        let f_norm = f.weighted_norm(geo.dom);

        // Full Hamiltonian at this ξ and its time-1 Lie transform.
        let h_full = FourierTaylorSeries::constant(n, Complex64::new(prev.e, 0.0))
            .add(&FourierTaylorSeries::linear_in_y(&prev.lambda))?
            .add(&prev.hbar)?
            .add(&prev.pert)?;
        let k_lie = h_full.support_k_order() + self.lie_order as u64 * f.support_k_order().max(1);
        let (h_new, transform_tail) =
            lie_transform(&h_full, &f, self.lie_order, k_lie, self.l_cut, geo.dom)?;

        let (e_new, lambda_new, hbar_new, pert_new) = split_after_transform(&h_new);
        let drift: Vec<f64> = lambda_new
            .iter()
            .zip(&prev.lambda)
            .map(|(a, b)| a - b)
            .collect();


        let mut stages = prev.stages;
        stages.push(StageDiag {
            p_before,
            r_norm,
            p_minus_r,
            f_norm,
            homological_residual,
            transform_tail,
            drift: drift.clone(),
            f,
        });
        Ok(Unfolded {
            e: e_new,
            lambda: lambda_new,
            hbar: hbar_new,
            pert: pert_new,
            stages,
        })
    }

    /// Total drift Σ_{j<upto} p₀₁ʲ(ξ) — the unfolded linear coefficient minus
    /// the raw frequency map.
    pub fn total_drift(&mut self, xi: &[f64], upto: usize) -> Result<Vec<f64>> {
        let u = self.unfold(xi, upto)?;
        Ok(u.lambda
            .iter()
            .zip(self.problem.map.eval(xi))
            .map(|(l, w)| l - w)
            .collect())
    }

    /// One full step: extend the chain by `geo`, re-solve the frequency
    /// equation ω(ξ₊) + Σ_{j≤ν} p₀₁ʲ(ξ₊) = ω(ξ₀) for the new parameter, and
    /// hand back the state at ξ₊.
    pub fn kam_step(&mut self, state: &KamState, geo: StepGeometry) -> Result<(KamState, StepReport)> {
        let nu = state.nu;
        debug_assert_eq!(self.steps.len(), nu);
        self.steps.push(geo);
        let upto = nu + 1;

        let at_xi = match self.unfold(&state.xi, upto) {
            Ok(u) => u,
            Err(e) => {
                self.rollback(nu);
                return Err(e);
            }
        };
        let stage = at_xi.stages[nu].clone();

        // Frequency-preserving translation; the residual is re-solved from
        // scratch at each step, never propagated.
        let omega0 = self.problem.map.omega0();
        let solve = {
            let map = self.problem.map.clone();
            let trans_tol = self.trans_tol;
            let mut g = |xi: &[f64]| -> Vec<f64> {
                match self.unfold(xi, upto) {
                    Ok(u) => u.lambda.iter().zip(&omega0).map(|(l, w)| l - w).collect(),
                    // An unfold failure off the iterate (e.g. a divisor check
                    // tripping at a probe point) is treated as a bad direction.
                    Err(_) => vec![f64::INFINITY; map.dim()],
                }
            };
            root_solve(&map, &mut g, &state.xi, trans_tol)
        };
        let (xi_next, freq_residual, translation_evals) = match solve {
            Ok(v) => v,
            Err(e) => {
                self.rollback(nu);
                return Err(e);
            }
        };

        let at_next = self.unfold(&xi_next, upto)?;
        let drift_next = at_next.stages[nu].drift.clone();

        // Measured parameter move, floored by the analytic increment bound
        // ϖ₂^{−1}(2|p₀₁^ν(ξ₊)|): when the root is already within tolerance the
        // solver may not move at all, but the drift still certifies a bound.
        let measured = norm2(
            &xi_next
                .iter()
                .zip(&state.xi)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>(),
        );
        let drift_mag = norm2(&drift_next);
        let analytic = if drift_mag > 0.0 {
            self.problem.map.lower_modulus.inverse(2.0 * drift_mag)
        } else {
            0.0
        };
        let xi_increment = measured.max(analytic);

        let symplectic = symplectic_defect(&stage.f, self.defect_samples, 1000 + nu as u64)?;

        let report = StepReport {
            nu,
            xi_next: xi_next.clone(),
            freq_residual,
            xi_increment,
            p_before: stage.p_before,
            r_norm: stage.r_norm,
            p_minus_r: stage.p_minus_r,
            f_norm: stage.f_norm,
            p_after: at_next.pert.weighted_norm(geo.dom_next),
            hbar_norm: at_next.hbar.weighted_norm(geo.dom_next),
            homological_residual: stage.homological_residual,
            symplectic_defect: symplectic,
            transform_tail: stage.transform_tail,
            translation_evals,
            drift: drift_next,
        };
        let new_state = KamState {
            nu: upto,
            xi: xi_next,
            e: at_next.e,
            hbar: at_next.hbar.clone(),
            pert: at_next.pert.clone(),
            dom: geo.dom_next,
        };
        Ok((new_state, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularity::ModulusOfContinuity;
    use approx::assert_abs_diff_eq;

    const PHI: f64 = 1.618033988749895;

    fn dom(s: f64, r: f64) -> AnalyticDomain {
        AnalyticDomain::new(s, r).unwrap()
    }

    #[test]
    fn homological_constant_divisor_closed_form() {
        // N = <omega, y>, R = eps cos(<k0, x>)  =>  F = (eps/<k0,omega>) sin(<k0,x>).
        let omega = vec![1.0, PHI];
        let nf = NormalForm::new(0.0, omega.clone(), FourierTaylorSeries::zero(2, 0, 4));
        let eps = 1e-3;
        let k0 = vec![1i64, 1];
        let r = FourierTaylorSeries::cosine(k0.clone(), eps);
        let rhs = r.sub(&r.average()).unwrap();
        let f = solve_homological(&nf, &rhs, 0.1, 1.2, 5, 0.05).unwrap();
        let expect = FourierTaylorSeries::sine(k0.clone(), eps / (1.0 + PHI));
        for (idx, c) in expect.terms() {
            assert_abs_diff_eq!((f.coefficient(idx) - c).norm(), 0.0, epsilon = 1e-18);
        }
        // Residual zero to rounding.
        let resid = nf
            .series()
            .poisson_bracket(&f, 5, 8)
            .unwrap()
            .add(&rhs)
            .unwrap();
        assert!(resid.weighted_norm(dom(0.05, 0.5)) <= 1e-17);
    }

    #[test]
    fn homological_pure_average_gives_zero() {
        let nf = NormalForm::new(0.0, vec![1.0, PHI], FourierTaylorSeries::zero(2, 0, 4));
        let r = FourierTaylorSeries::constant(2, Complex64::new(0.3, 0.0))
            .add(&FourierTaylorSeries::action(2, 0))
            .unwrap();
        let rhs = r.sub(&r.average()).unwrap();
        let f = solve_homological(&nf, &rhs, 0.1, 1.2, 5, 0.05).unwrap();
        assert!(f.is_zero());
    }

    #[test]
    fn homological_with_action_dependent_divisor() {
        // hbar = y1^2/2 makes the divisor k-and-y dependent; residual still tiny.
        let mut hbar = FourierTaylorSeries::zero(2, 0, 4);
        hbar.add_term(
            MultiIndexPair::new(vec![0, 0], vec![2, 0]),
            Complex64::new(0.5, 0.0),
        );
        let nf = NormalForm::new(0.0, vec![1.0, PHI], hbar);
        let r = FourierTaylorSeries::cosine(vec![1, 0], 1.0)
            .multiply(&FourierTaylorSeries::action(2, 0), 5, 4)
            .unwrap();
        let rhs = r.sub(&r.average()).unwrap();
        let s = 0.02;
        let f = solve_homological(&nf, &rhs, 0.1, 1.2, 5, s).unwrap();
        let d = dom(s, 0.4);
        let resid = nf
            .series()
            .poisson_bracket(&f, 5, 8)
            .unwrap()
            .add(&rhs)
            .unwrap();
        // The solve is exact on the degree-<=4 quotient; the bracket leaks an
        // O(s^4)-small degree-5 tail through <k, dh/dy> * F.
        let (low, tail) = resid.truncate(5, 4, d);
        assert!(low.weighted_norm(d) <= 1e-12 * rhs.weighted_norm(d));
        assert!(tail <= 1e-4 * rhs.weighted_norm(d), "{tail}");
    }

    #[test]
    fn homological_rejects_resonant_divisor() {
        let nf = NormalForm::new(0.0, vec![1.0, 2.0], FourierTaylorSeries::zero(2, 0, 4));
        let r = FourierTaylorSeries::cosine(vec![2, -1], 1.0);
        let rhs = r.sub(&r.average()).unwrap();
        let err = solve_homological(&nf, &rhs, 0.1, 1.2, 5, 0.05).unwrap_err();
        assert!(matches!(err, Error::DivisorBelowFloor { .. }));
    }

    #[test]
    fn lie_transform_identity_for_zero_generator() {
        let h = FourierTaylorSeries::linear_in_y(&[1.0, PHI])
            .add(&FourierTaylorSeries::cosine(vec![1, 0], 0.5))
            .unwrap();
        let f = FourierTaylorSeries::zero(2, 0, 0);
        let (out, tail) = lie_transform(&h, &f, 6, 10, 8, dom(0.5, 0.5)).unwrap();
        assert_eq!(out, h);
        assert_abs_diff_eq!(tail, 0.0);
    }

    #[test]
    fn lie_transform_commuting_pair() {
        let h = FourierTaylorSeries::linear_in_y(&[1.0, 2.0]);
        let f = FourierTaylorSeries::action(2, 0)
            .multiply(&FourierTaylorSeries::action(2, 1), 4, 4)
            .unwrap();
        let (out, tail) = lie_transform(&h, &f, 4, 10, 8, dom(0.5, 0.5)).unwrap();
        assert_eq!(out, h);
        assert_abs_diff_eq!(tail, 0.0);
    }

    #[test]
    fn lie_transform_matches_integrated_flow() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let h = FourierTaylorSeries::linear_in_y(&[1.0, PHI])
            .add(&FourierTaylorSeries::cosine(vec![1, 1], 0.3))
            .unwrap();
        // Small random real generator.
        let mut f = FourierTaylorSeries::zero(2, 2, 1);
        for (k, l) in [(vec![1i64, 0], vec![0u32, 0]), (vec![1, -1], vec![1, 0])] {
            let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 5e-4;
            let idx = MultiIndexPair::new(k.clone(), l.clone());
            let neg = MultiIndexPair::new(k.iter().map(|v| -v).collect(), l);
            f.add_term(idx, c);
            f.add_term(neg, c.conj());
        }
        let f = f.assert_real();
        let (hf, _) = lie_transform(&h, &f, 6, 20, 8, dom(0.3, 0.3)).unwrap();

        let gy = f.gradient_y();
        let gx = f.gradient_x();
        let field = |_: f64, z: &[f64]| -> Vec<f64> {
            let (y, x) = z.split_at(2);
            vec![
                -gx[0].evaluate_re(y, x).unwrap(),
                -gx[1].evaluate_re(y, x).unwrap(),
                gy[0].evaluate_re(y, x).unwrap(),
                gy[1].evaluate_re(y, x).unwrap(),
            ]
        };
        for _ in 0..50 {
            let z0: Vec<f64> = vec![
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ];
            let z1 = ode::integrate(field, 0.0, &z0, 1.0, 1e-12, 1e-14).unwrap();
            let lhs = hf.evaluate_re(&z0[..2], &z0[2..]).unwrap();
            let rhs = h.evaluate_re(&z1[..2], &z1[2..]).unwrap();
            assert!((lhs - rhs).abs() <= 1e-8, "defect {}", (lhs - rhs).abs());
        }
    }

    #[test]
    fn split_sorts_terms() {
        let h = FourierTaylorSeries::constant(2, Complex64::new(3.0, 0.0))
            .add(&FourierTaylorSeries::linear_in_y(&[2.0, 0.0]))
            .unwrap()
            .add(
                &FourierTaylorSeries::action(2, 0)
                    .multiply(&FourierTaylorSeries::action(2, 0), 4, 4)
                    .unwrap(),
            )
            .unwrap()
            .add(
                &FourierTaylorSeries::cosine(vec![1, 0], 1.0)
                    .multiply(&FourierTaylorSeries::action(2, 1), 4, 4)
                    .unwrap(),
            )
            .unwrap();
        let (e, p01, hbar, p) = split_after_transform(&h);
        assert_abs_diff_eq!(e, 3.0);
        assert_eq!(p01, vec![2.0, 0.0]);
        assert_eq!(hbar.num_terms(), 1);
        assert_eq!(p.num_terms(), 2);
        // Recombination is exact.
        let back = FourierTaylorSeries::constant(2, Complex64::new(e, 0.0))
            .add(&FourierTaylorSeries::linear_in_y(&p01))
            .unwrap()
            .add(&hbar)
            .unwrap()
            .add(&p)
            .unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn split_zero_average_is_pure_perturbation() {
        let h = FourierTaylorSeries::cosine(vec![1, 0], 0.7);
        let (e, p01, hbar, p) = split_after_transform(&h);
        assert_abs_diff_eq!(e, 0.0);
        assert_eq!(p01, vec![0.0, 0.0]);
        assert!(hbar.is_zero());
        assert_eq!(p, h);
    }

    #[test]
    fn translate_linear_map_with_constant_drift() {
        let map = FrequencyMap::identity(vec![1.0, PHI], 0.5).unwrap();
        let c = vec![1e-3, -2e-3];
        let drift: ParamFn = {
            let c = c.clone();
            Arc::new(move |_: &[f64]| c.clone())
        };
        let xi = translate_parameter(&map, &[drift], &[1.0, PHI], 1e-13).unwrap();
        assert_abs_diff_eq!(xi[0], 1.0 - c[0], epsilon = 1e-12);
        assert_abs_diff_eq!(xi[1], PHI - c[1], epsilon = 1e-12);
    }

    #[test]
    fn translate_empty_drift_stays_at_base() {
        let map = FrequencyMap::identity(vec![1.0, PHI], 0.5).unwrap();
        let xi = translate_parameter(&map, &[], &[1.0, PHI], 1e-13).unwrap();
        assert_abs_diff_eq!(xi[0], 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(xi[1], PHI, epsilon = 1e-13);
    }

    #[test]
    fn translate_nonlinear_map_matches_grid_search() {
        // omega(xi) = xi + 0.1 * xi∘xi componentwise, constant drift 1e-4.
        let base = vec![0.5, 0.5];
        let map = FrequencyMap::new(
            |xi: &[f64]| xi.iter().map(|v| v + 0.1 * v * v).collect(),
            base.clone(),
            0.3,
            ModulusOfContinuity::lipschitz(),
            "quadratic",
        )
        .unwrap();
        let drift: ParamFn = Arc::new(|_: &[f64]| vec![1e-4, 1e-4]);
        let xi = translate_parameter(&map, &[drift], &base, 1e-12).unwrap();
        // Componentwise closed form: solve v + 0.1 v^2 = w0 - 1e-4.
        let target: f64 = 0.5 + 0.1 * 0.25 - 1e-4;
        let root = (-1.0 + (1.0 + 0.4 * target).sqrt()) / 0.2;
        assert_abs_diff_eq!(xi[0], root, epsilon = 1e-10);
        assert_abs_diff_eq!(xi[1], root, epsilon = 1e-10);
    }

    #[test]
    fn translate_non_smooth_falls_back_to_pattern_search() {
        let base = vec![0.5, 0.5];
        let map = FrequencyMap::new(
            |xi: &[f64]| xi.iter().map(|v| v + 0.01 * (v - 0.5).abs()).collect(),
            base.clone(),
            0.3,
            ModulusOfContinuity::lipschitz(),
            "kinked",
        )
        .unwrap()
        .non_smooth();
        let drift: ParamFn = Arc::new(|_: &[f64]| vec![2e-4, -3e-4]);
        let xi = translate_parameter(&map, &[drift], &base, 1e-11).unwrap();
        let res = {
            let w = map.eval(&xi);
            let w0 = map.omega0();
            ((w[0] + 2e-4 - w0[0]).powi(2) + (w[1] - 3e-4 - w0[1]).powi(2)).sqrt()
        };
        assert!(res <= 1e-11);
    }

    #[test]
    fn translate_reports_failure_outside_ball() {
        // Drift too large for a tiny ball: no root inside.
        let map = FrequencyMap::identity(vec![1.0, PHI], 1e-4).unwrap();
        let drift: ParamFn = Arc::new(|_: &[f64]| vec![0.3, 0.0]);
        let err = translate_parameter(&map, &[drift], &[1.0, PHI], 1e-12).unwrap_err();
        assert!(matches!(
            err,
            Error::TranslationFailed { .. } | Error::BallBoundary { .. }
        ));
    }

    #[test]
    fn symplectic_defect_small_for_small_generator() {
        let f = FourierTaylorSeries::sine(vec![1, 0], 1e-3);
        let defect = symplectic_defect(&f, 5, 7).unwrap();
        assert!(defect <= 1e-6, "defect {defect}");
    }

    fn benchmark_pipeline(eps: f64) -> (Pipeline, KamState, StepGeometry) {
        let map = FrequencyMap::identity(vec![1.0, PHI], 0.5).unwrap();
        let pert: SeriesFamily = Arc::new(|xi: &[f64]| {
            FourierTaylorSeries::cosine(vec![1, 0], 1.0)
                .add(&FourierTaylorSeries::cosine(vec![1, 1], 1.0))
                .unwrap()
                .add(&FourierTaylorSeries::linear_in_y(&[xi[0], 0.0]))
                .unwrap()
        });
        let problem = Problem {
            map,
            perturbation: pert,
            eps,
        };
        let gamma = 0.05;
        let pipeline = Pipeline::new(problem, gamma, 1.2, 1e-12);
        let dom0 = dom(0.01, 0.5);
        let state = pipeline.initial_state(dom0);
        let geo = StepGeometry {
            k_cut: 4,
            dom: dom0,
            dom_next: dom(0.005, 0.45),
            s_solve: 0.002,
        };
        (pipeline, state, geo)
    }

    #[test]
    fn kam_step_zero_perturbation_is_inert() {
        let map = FrequencyMap::identity(vec![1.0, PHI], 0.5).unwrap();
        let pert: SeriesFamily = Arc::new(|_: &[f64]| FourierTaylorSeries::zero(2, 0, 0));
        let problem = Problem {
            map,
            perturbation: pert,
            eps: 1e-6,
        };
        let mut pipeline = Pipeline::new(problem, 0.05, 1.2, 1e-12);
        let dom0 = dom(0.01, 0.5);
        let state = pipeline.initial_state(dom0);
        let geo = StepGeometry {
            k_cut: 4,
            dom: dom0,
            dom_next: dom(0.005, 0.45),
            s_solve: 0.002,
        };
        let (next, report) = pipeline.kam_step(&state, geo).unwrap();
        assert_eq!(next.nu, 1);
        assert_eq!(next.xi, vec![1.0, PHI]);
        assert_abs_diff_eq!(report.p_before, 0.0);
        assert_abs_diff_eq!(report.p_after, 0.0);
        assert_abs_diff_eq!(report.f_norm, 0.0);
    }

    #[test]
    fn kam_step_contracts_quadratically() {
        let (mut pipeline, state, geo) = benchmark_pipeline(1e-6);
        let (next, report) = pipeline.kam_step(&state, geo).unwrap();
        assert!(report.p_before > 0.0);
        // Quadratic smallness: one step shrinks P by roughly its own size.
        assert!(
            report.p_after <= 1e3 * report.p_before * report.p_before,
            "before {} after {}",
            report.p_before,
            report.p_after
        );
        assert!(report.freq_residual <= 1e-12);
        assert!(report.homological_residual <= 1e-12);
        assert!(pipeline.problem.map.contains(&next.xi));
    }
}
