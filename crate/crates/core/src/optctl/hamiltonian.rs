//! Hamiltonian of the time-optimal problem and the pointwise control
//! choice derived from it.
//!
//! With a single jump mark of intensity `lambda` the Hamiltonian is
//!
//! ```text
//! H = 1 + fx p1 + fy p2 + sigma1 x q1 + sigma2 y q4 + lambda (jump1 x r1 + jump2 y r2)
//! ```
//!
//! where `(fx, fy)` is the deterministic drift. Both controls enter only
//! through `D = (1 + alpha xi) W + x`, and
//!
//! ```text
//! dH/dalpha = y xi W (x p1 - e N p2) / D^2
//! dH/dxi    = y W (alpha x p1 + e p2 (W + x (1 - alpha))) / D^2
//! ```
//!
//! The brackets do not depend on the control being varied, so `H` is
//! monotone in each control and its minimiser over `[lo, hi]` is an
//! endpoint, except on singular arcs where the bracket vanishes. The
//! closed-form expressions below are the roots of the *other* control's
//! bracket: the quality formula zeroes `dH/dxi`, the quantity formula
//! zeroes `dH/dalpha`. They are used to pick a value on singular arcs,
//! where every admissible value is stationary.

use crate::error::{ensure_finite, Error, Result};
use crate::model::{control_sensitivity, drift_unchecked, jacobian, ModelParams, State, Terms};
use crate::noise::NoiseParams;

use super::{AdjointState, Bounds, ControlMode};

/// Threshold on `|x (e p2 - p1)|` and `|e p2|` below which a closed form is
/// treated as undefined.
const DEGENERATE_DENOM: f64 = 1e-12;
/// A switching bracket is treated as zero when it is this small relative to
/// the magnitude of its terms.
const SINGULAR_REL_TOL: f64 = 1e-10;

fn check_inputs(s: State, adj: &AdjointState) -> Result<()> {
    ensure_finite("x", s.x)?;
    ensure_finite("y", s.y)?;
    if !adj.is_finite() {
        return Err(Error::invalid("adjoint state is not finite"));
    }
    Ok(())
}

#[inline]
pub(crate) fn hamiltonian_unchecked(s: State, mp: &ModelParams, np: &NoiseParams, adj: &AdjointState) -> f64 {
    let (fx, fy) = drift_unchecked(s, mp);
    1.0 + fx * adj.p1
        + fy * adj.p2
        + np.sigma1 * s.x * adj.q1
        + np.sigma2 * s.y * adj.q4
        + np.lambda * (np.jump1 * s.x * adj.r1 + np.jump2 * s.y * adj.r2)
}

/// Hamiltonian at state `s` under controls `ctrl = (alpha, xi)`.
pub fn hamiltonian(s: State, ctrl: (f64, f64), adj: &AdjointState, mp: &ModelParams, np: &NoiseParams) -> Result<f64> {
    check_inputs(s, adj)?;
    let mp = mp.with_controls(ctrl.0, ctrl.1);
    let h = hamiltonian_unchecked(s, &mp, np, adj);
    ensure_finite("hamiltonian", h)?;
    Ok(h)
}

/// `-dH/d(x, y)` without input checks.
///
/// The printed costate equation for `p1` carries
/// `-(2 omega (1 + alpha xi) x + 1) / D^2` as its `p1` coefficient; the
/// derivative of the Hamiltonian gives `+y (1 + alpha xi)(1 - omega x^2) / D^2`
/// instead, which is what is used here. The `p2` equation and the `p2` term
/// of the `p1` equation agree with the derivative.
#[inline]
pub(crate) fn adjoint_drift_unchecked(s: State, mp: &ModelParams, np: &NoiseParams, adj: &AdjointState) -> (f64, f64) {
    let j = jacobian(s, mp);
    let dh_dx = j[0][0] * adj.p1 + j[1][0] * adj.p2 + np.sigma1 * adj.q1 + np.lambda * np.jump1 * adj.r1;
    let dh_dy = j[0][1] * adj.p1 + j[1][1] * adj.p2 + np.sigma2 * adj.q4 + np.lambda * np.jump2 * adj.r2;
    (-dh_dx, -dh_dy)
}

/// Costate drift `(dp1/dt, dp2/dt) = -grad_(x,y) H`.
pub fn adjoint_drift(
    s: State,
    ctrl: (f64, f64),
    adj: &AdjointState,
    mp: &ModelParams,
    np: &NoiseParams,
) -> Result<(f64, f64)> {
    check_inputs(s, adj)?;
    let mp = mp.with_controls(ctrl.0, ctrl.1);
    let (a, b) = adjoint_drift_unchecked(s, &mp, np, adj);
    ensure_finite("dp1/dt", a)?;
    ensure_finite("dp2/dt", b)?;
    Ok((a, b))
}

/// `dH/du` for the controlled parameter, at the control values in `mp`.
pub fn switching(mode: ControlMode, s: State, adj: &AdjointState, mp: &ModelParams) -> f64 {
    let sens = control_sensitivity(s, mp);
    let (a, b) = match mode {
        ControlMode::Quality => sens.d_alpha,
        ControlMode::Quantity => sens.d_xi,
    };
    a * adj.p1 + b * adj.p2
}

/// Bracket of `dH/dalpha` together with the magnitude of its terms.
fn quality_bracket(s: State, adj: &AdjointState, mp: &ModelParams) -> (f64, f64) {
    let t = Terms::at(s.x, mp);
    let a = s.x * adj.p1;
    let b = mp.e * t.n * adj.p2;
    (a - b, a.abs() + b.abs())
}

/// Bracket of `dH/dxi` together with the magnitude of its terms.
fn quantity_bracket(s: State, adj: &AdjointState, mp: &ModelParams) -> (f64, f64) {
    let w = mp.omega * s.x * s.x + 1.0;
    let a = mp.alpha * s.x * adj.p1;
    let b = mp.e * adj.p2 * (w + s.x * (1.0 - mp.alpha));
    (a + b, a.abs() + b.abs())
}

/// Left minus right side of `x p1 = e p2 (x + xi (omega x^2 + 1))`, the
/// stationarity condition in `alpha`.
pub fn arrow_residual_quality(s: State, adj: &AdjointState, mp: &ModelParams) -> f64 {
    quality_bracket(s, adj, mp).0
}

/// Left side of `alpha x p1 + e p2 (1 + omega x^2 + x (1 - alpha)) = 0`,
/// the stationarity condition in `xi`.
pub fn arrow_residual_quantity(s: State, adj: &AdjointState, mp: &ModelParams) -> f64 {
    quantity_bracket(s, adj, mp).0
}

/// `e p2 (1 + x + omega x^2) / (x (e p2 - p1))`, or `None` when the
/// denominator is degenerate.
pub fn quality_closed_form(x: f64, adj: &AdjointState, mp: &ModelParams) -> Option<f64> {
    let denom = x * (mp.e * adj.p2 - adj.p1);
    if denom.abs() < DEGENERATE_DENOM || !denom.is_finite() {
        return None;
    }
    Some(mp.e * adj.p2 * (1.0 + x + mp.omega * x * x) / denom)
}

/// `x (p1 - e p2) / (e p2 (1 + omega x^2))`, or `None` when `|e p2|` is
/// degenerate.
pub fn quantity_closed_form(x: f64, adj: &AdjointState, mp: &ModelParams) -> Option<f64> {
    let ep2 = mp.e * adj.p2;
    if ep2.abs() < DEGENERATE_DENOM || !ep2.is_finite() {
        return None;
    }
    Some(x * (adj.p1 - ep2) / (ep2 * (1.0 + mp.omega * x * x)))
}

/// How a control value was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Singular arc; the closed form landed strictly inside the bounds.
    Interior,
    /// Endpoint with the smaller Hamiltonian, or a clamped closed form.
    Endpoint,
    /// The Hamiltonian does not depend on the control here (or the closed
    /// form is undefined on a singular arc); the current value is kept.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlUpdate {
    pub value: f64,
    pub branch: Branch,
}

fn from_closed_form(raw: Option<f64>, current: f64, bounds: Bounds) -> ControlUpdate {
    match raw {
        Some(v) if v > bounds.lo && v < bounds.hi => ControlUpdate { value: v, branch: Branch::Interior },
        Some(v) => ControlUpdate { value: bounds.clamp(v), branch: Branch::Endpoint },
        None => ControlUpdate { value: bounds.clamp(current), branch: Branch::Degenerate },
    }
}

fn endpoint_by_hamiltonian(mode: ControlMode, s: State, adj: &AdjointState, mp: &ModelParams, bounds: Bounds) -> ControlUpdate {
    let np = NoiseParams::NONE;
    let mut at = *mp;
    mode.set(&mut at, bounds.lo);
    let h_lo = hamiltonian_unchecked(s, &at, &np, adj);
    mode.set(&mut at, bounds.hi);
    let h_hi = hamiltonian_unchecked(s, &at, &np, adj);
    let current = bounds.clamp(mode.current(mp));
    if h_lo < h_hi {
        ControlUpdate { value: bounds.lo, branch: Branch::Endpoint }
    } else if h_hi < h_lo {
        ControlUpdate { value: bounds.hi, branch: Branch::Endpoint }
    } else {
        ControlUpdate { value: current, branch: Branch::Degenerate }
    }
}

fn update(mode: ControlMode, s: State, adj: &AdjointState, mp: &ModelParams, bounds: Bounds) -> Result<ControlUpdate> {
    check_inputs(s, adj)?;
    if !(s.x > 0.0) {
        return Err(Error::invalid(format!("prey density must be positive, got {}", s.x)));
    }
    bounds.validate()?;
    let current = mode.current(mp);
    let (bracket, scale, flat) = match mode {
        ControlMode::Quality => {
            let (b, sc) = quality_bracket(s, adj, mp);
            (b, sc, s.y == 0.0 || mp.xi == 0.0)
        }
        ControlMode::Quantity => {
            let (b, sc) = quantity_bracket(s, adj, mp);
            (b, sc, s.y == 0.0)
        }
    };
    if flat || scale == 0.0 {
        return Ok(ControlUpdate { value: bounds.clamp(current), branch: Branch::Degenerate });
    }
    if bracket.abs() <= SINGULAR_REL_TOL * scale {
        let raw = match mode {
            ControlMode::Quality => quality_closed_form(s.x, adj, mp),
            ControlMode::Quantity => quantity_closed_form(s.x, adj, mp),
        };
        return Ok(from_closed_form(raw, current, bounds));
    }
    Ok(endpoint_by_hamiltonian(mode, s, adj, mp, bounds))
}

/// Quality value minimising the Hamiltonian over `bounds`, with `xi` held
/// at `mp.xi`. Ties keep `mp.alpha`.
pub fn control_update_quality(s: State, adj: &AdjointState, mp: &ModelParams, bounds: Bounds) -> Result<ControlUpdate> {
    update(ControlMode::Quality, s, adj, mp, bounds)
}

/// Quantity value minimising the Hamiltonian over `bounds`, with `alpha`
/// held at `mp.alpha`. Ties keep `mp.xi`.
pub fn control_update_quantity(s: State, adj: &AdjointState, mp: &ModelParams, bounds: Bounds) -> Result<ControlUpdate> {
    update(ControlMode::Quantity, s, adj, mp, bounds)
}

pub fn control_update(
    mode: ControlMode,
    s: State,
    adj: &AdjointState,
    mp: &ModelParams,
    bounds: Bounds,
) -> Result<ControlUpdate> {
    update(mode, s, adj, mp, bounds)
}
