#![allow(dead_code)]

use afctl::model::ModelParams;

/// Drift written out directly from the model equations, independent of the
/// crate's implementation.
pub fn oracle_drift(p: &ModelParams, x: f64, y: f64) -> [f64; 2] {
    let w = p.omega * x * x + 1.0;
    let d = (1.0 + p.alpha * p.xi) * w + x;
    let logistic = if p.gamma.is_infinite() { 1.0 } else { 1.0 - x / p.gamma };
    [p.r * x * logistic - x * y / d, y * (p.e * (x + p.xi * w) / d - p.m1 - p.m2 * y)]
}

pub fn rk4_step<F: Fn(f64, [f64; 2]) -> [f64; 2]>(f: &F, t: f64, s: [f64; 2], h: f64) -> [f64; 2] {
    let add = |a: [f64; 2], b: [f64; 2], c: f64| [a[0] + c * b[0], a[1] + c * b[1]];
    let k1 = f(t, s);
    let k2 = f(t + h / 2.0, add(s, k1, h / 2.0));
    let k3 = f(t + h / 2.0, add(s, k2, h / 2.0));
    let k4 = f(t + h, add(s, k3, h));
    [
        s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// Step-doubling adaptive RK4 from `t0` through every time in `outputs`
/// (increasing, or decreasing for backward integration).
pub fn adaptive_rk4<F: Fn(f64, [f64; 2]) -> [f64; 2]>(
    f: F,
    t0: f64,
    s0: [f64; 2],
    outputs: &[f64],
    rtol: f64,
) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(outputs.len());
    let mut t = t0;
    let mut s = s0;
    let mut h: f64 = if outputs.len() > 1 { (outputs[1] - outputs[0]).abs() } else { 1e-3 };
    if h == 0.0 {
        h = 1e-3;
    }
    for &target in outputs {
        let dir = if target >= t { 1.0 } else { -1.0 };
        while (target - t) * dir > 1e-14 * target.abs().max(1.0) {
            let step = h.min((target - t).abs()) * dir;
            let full = rk4_step(&f, t, s, step);
            let half = rk4_step(&f, t, s, step / 2.0);
            let two = rk4_step(&f, t + step / 2.0, half, step / 2.0);
            let scale = two[0].abs().max(two[1].abs()).max(1e-12);
            let err = (two[0] - full[0]).abs().max((two[1] - full[1]).abs()) / 15.0;
            if err <= rtol * scale {
                t += step;
                // Richardson extrapolation of the two estimates
                s = [two[0] + (two[0] - full[0]) / 15.0, two[1] + (two[1] - full[1]) / 15.0];
                if err < rtol * scale / 64.0 {
                    h *= 2.0;
                }
            } else {
                h /= 2.0;
                assert!(h > 1e-14, "step size underflow at t = {t}");
            }
        }
        out.push(s);
    }
    out
}

/// Max over grid points of the max-norm error relative to the max-norm of
/// the reference state.
pub fn max_relative_error(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| {
            let e = (u[0] - v[0]).abs().max((u[1] - v[1]).abs());
            e / v[0].abs().max(v[1].abs())
        })
        .fold(0.0, f64::max)
}
