//! Adaptive explicit Runge–Kutta integration (Dormand–Prince 5(4)) for the
//! short-horizon Hamiltonian flows used in verification: time-1 flows of the
//! generating Hamiltonian and torus-invariance runs.

use crate::error::{Error, Result};

/// Butcher tableau of the Dormand–Prince 5(4) pair.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
/// 5th-order weights (same as the last A row — FSAL pair).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Embedded 4th-order weights.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MAX_STEPS: usize = 20_000_000;

/// Integrate ẏ = f(t, y) from (t0, y0) to t1, invoking `observe` at every
/// accepted step (including the initial and final states).
pub fn integrate_observe<F, O>(
    f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    rtol: f64,
    atol: f64,
    mut observe: O,
) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
    O: FnMut(f64, &[f64]),
{
    let dim = y0.len();
    let mut t = t0;
    let mut y = y0.to_vec();
    observe(t, &y);
    if t1 == t0 {
        return Ok(y);
    }
    let dir = (t1 - t0).signum();
    let mut h = (t1 - t0).abs().min(1e-2) * dir;
    let mut k = vec![vec![0.0; dim]; 7];
    k[0] = f(t, &y);
    let mut steps = 0usize;

    while (t1 - t) * dir > 0.0 {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(Error::Integrator(format!(
                "step budget exhausted at t = {t} (h = {h:.3e})"
            )));
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }

        for stage in 0..6 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(stage + 1) {
                let a = A[stage][j];
                if a != 0.0 {
                    for (yi, ki) in ys.iter_mut().zip(kj) {
                        *yi += h * a * ki;
                    }
                }
            }
            k[stage + 1] = f(t + C[stage] * h, &ys);
        }

        let mut y5 = y.clone();
        let mut err: f64 = 0.0;
        for i in 0..dim {
            let mut d5 = 0.0;
            let mut d4 = 0.0;
            for (j, kj) in k.iter().enumerate() {
                d5 += B5[j] * kj[i];
                d4 += B4[j] * kj[i];
            }
            y5[i] += h * d5;
            let scale = atol + rtol * y[i].abs().max(y5[i].abs());
            err = err.max((h * (d5 - d4)).abs() / scale);
        }

        if err <= 1.0 {
            t += h;
            y = y5;
            // FSAL: the 7th stage of an accepted step is f at the new state.
            k[0] = k[6].clone();
            observe(t, &y);
        } else {
            k[0] = f(t, &y);
        }
        let factor = if err > 0.0 {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h *= factor;
        if h.abs() < 1e-15 * (1.0 + t.abs()) {
            return Err(Error::Integrator(format!(
                "step size underflow at t = {t} (stiffness)"
            )));
        }
    }
    Ok(y)
}

/// Integrate without observation; returns the final state.
pub fn integrate<F>(f: F, t0: f64, y0: &[f64], t1: f64, rtol: f64, atol: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    integrate_observe(f, t0, y0, t1, rtol, atol, |_, _| {})
}
