//! Deterministic coefficients of the additional-food prey-predator system
//! with Holling type IV (group defence) response.
//!
//! Non-dimensional drift:
//!
//! ```text
//! dx/dt = r x (1 - x/gamma) - x y / D
//! dy/dt = y [ e (x + xi W) / D - m1 - m2 y ]
//! W = omega x^2 + 1,  D = (1 + alpha xi) W + x
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Parameters of the dimensional system, in the units of the original
/// biomass model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionalParams {
    pub r: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub c: f64,
    pub e: f64,
    pub m1: f64,
    pub delta: f64,
    #[serde(rename = "A")]
    pub a_food: f64,
    pub b: f64,
    pub a: f64,
    pub eta: f64,
    pub alpha: f64,
}

impl DimensionalParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("r", self.r),
            ("K", self.k),
            ("c", self.c),
            ("e", self.e),
            ("m1", self.m1),
            ("delta", self.delta),
            ("A", self.a_food),
            ("b", self.b),
            ("a", self.a),
            ("eta", self.eta),
            ("alpha", self.alpha),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::constraint(name, "must be finite"));
            }
        }
        for (name, v) in [("r", self.r), ("K", self.k), ("c", self.c), ("e", self.e), ("a", self.a)] {
            if v <= 0.0 {
                return Err(Error::constraint(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("m1", self.m1),
            ("delta", self.delta),
            ("A", self.a_food),
            ("b", self.b),
            ("eta", self.eta),
            ("alpha", self.alpha),
        ] {
            if v < 0.0 {
                return Err(Error::constraint(name, "must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Drift of the dimensional system in prey biomass `n` and predator
    /// biomass `p`, including intraspecific predator competition.
    pub fn drift(&self, n: f64, p: f64) -> (f64, f64) {
        let w = self.b * n * n + 1.0;
        let d = (self.a_food * self.eta * self.alpha + self.a) * w + n;
        let dn = self.r * n * (1.0 - n / self.k) - self.c * n / d * p;
        let dp = self.e * (n + self.eta * self.a_food * w) / d * p - self.m1 * p - self.delta * p * p;
        (dn, dp)
    }
}

/// Non-dimensional parameter set. `alpha` and `xi` are the current values
/// of the additional-food quality and quantity; control code overrides
/// them per time step.
///
/// `gamma` may be `f64::INFINITY`, in which case the logistic term vanishes
/// and the prey equation becomes linear in the absence of predators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub r: f64,
    pub gamma: f64,
    pub omega: f64,
    pub e: f64,
    pub m1: f64,
    pub m2: f64,
    pub alpha: f64,
    pub xi: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::baseline(1.0, 1.0)
    }
}

impl ModelParams {
    /// Reference ecological parameters `r = 1.5`, `gamma = 12`, `omega = 15`,
    /// `e = 0.4`, `m1 = 0.15`, `m2 = 0.01` with the given control values.
    pub fn baseline(alpha: f64, xi: f64) -> Self {
        ModelParams { r: 1.5, gamma: 12.0, omega: 15.0, e: 0.4, m1: 0.15, m2: 0.01, alpha, xi }
    }

    pub fn with_controls(mut self, alpha: f64, xi: f64) -> Self {
        self.alpha = alpha;
        self.xi = xi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("r", self.r),
            ("omega", self.omega),
            ("e", self.e),
            ("m1", self.m1),
            ("m2", self.m2),
            ("alpha", self.alpha),
            ("xi", self.xi),
        ] {
            if !v.is_finite() {
                return Err(Error::constraint(name, "must be finite"));
            }
        }
        if self.gamma.is_nan() || self.gamma == f64::NEG_INFINITY {
            return Err(Error::constraint("gamma", "must be a positive number or inf"));
        }
        for (name, v) in [("r", self.r), ("gamma", self.gamma), ("e", self.e)] {
            if v <= 0.0 {
                return Err(Error::constraint(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("omega", self.omega),
            ("m1", self.m1),
            ("m2", self.m2),
            ("alpha", self.alpha),
            ("xi", self.xi),
        ] {
            if v < 0.0 {
                return Err(Error::constraint(name, "must be nonnegative"));
            }
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn inv_gamma(&self) -> f64 {
        if self.gamma.is_infinite() {
            0.0
        } else {
            1.0 / self.gamma
        }
    }
}

/// Non-dimensional prey and predator densities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct State {
    pub x: f64,
    pub y: f64,
}

impl State {
    pub const fn new(x: f64, y: f64) -> Self {
        State { x, y }
    }

    pub fn max_dist(&self, other: &State) -> f64 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EquilibriumKind {
    Trivial,
    AxialPrey,
    AxialPredator,
    Interior,
}

impl EquilibriumKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EquilibriumKind::Trivial => "trivial",
            EquilibriumKind::AxialPrey => "axial-prey",
            EquilibriumKind::AxialPredator => "axial-predator",
            EquilibriumKind::Interior => "interior",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibrium {
    pub state: State,
    pub kind: EquilibriumKind,
    pub drift_residual: f64,
    /// Both Jacobian eigenvalues have negative real part.
    pub stable: bool,
}

/// Shared subexpressions of the response terms at prey density `x`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Terms {
    /// omega x^2 + 1
    pub w: f64,
    /// (1 + alpha xi) W + x
    pub d: f64,
    /// x + xi W
    pub n: f64,
}

impl Terms {
    #[inline]
    pub(crate) fn at(x: f64, p: &ModelParams) -> Self {
        let w = p.omega * x * x + 1.0;
        let d = (1.0 + p.alpha * p.xi) * w + x;
        let n = x + p.xi * w;
        Terms { w, d, n }
    }
}

/// Per-predator predation rate `x / D`.
pub fn functional_response(x: f64, p: &ModelParams) -> Result<f64> {
    ensure_finite("x", x)?;
    if x < 0.0 {
        return Err(Error::invalid(format!("prey density must be nonnegative, got {x}")));
    }
    let t = Terms::at(x, p);
    ensure_finite("response denominator", t.d)?;
    Ok(x / t.d)
}

#[inline]
pub(crate) fn drift_unchecked(s: State, p: &ModelParams) -> (f64, f64) {
    let t = Terms::at(s.x, p);
    let dx = p.r * s.x * (1.0 - s.x * p.inv_gamma()) - s.x * s.y / t.d;
    let dy = s.y * (p.e * t.n / t.d - p.m1 - p.m2 * s.y);
    (dx, dy)
}

/// Deterministic drift `(dx/dt, dy/dt)`.
pub fn drift(s: State, p: &ModelParams) -> Result<(f64, f64)> {
    ensure_finite("x", s.x)?;
    ensure_finite("y", s.y)?;
    let (dx, dy) = drift_unchecked(s, p);
    ensure_finite("dx/dt", dx)?;
    ensure_finite("dy/dt", dy)?;
    Ok((dx, dy))
}

/// Jacobian of the drift with respect to `(x, y)`, row-major:
/// `[[dfx/dx, dfx/dy], [dfy/dx, dfy/dy]]`.
pub fn jacobian(s: State, p: &ModelParams) -> [[f64; 2]; 2] {
    let State { x, y } = s;
    let Terms { d, n, .. } = Terms::at(x, p);
    let a = 1.0 + p.alpha * p.xi;
    let d2 = d * d;
    // d/dx (x/D) = (D - x D') / D^2 = a (1 - omega x^2) / D^2
    let dfx_dx = p.r - 2.0 * p.r * x * p.inv_gamma() - y * a * (1.0 - p.omega * x * x) / d2;
    let dfx_dy = -x / d;
    // N' D - N D' = (a - xi)(1 - omega x^2)
    let dfy_dx = p.e * y * (a - p.xi) * (1.0 - p.omega * x * x) / d2;
    let dfy_dy = p.e * n / d - p.m1 - 2.0 * p.m2 * y;
    [[dfx_dx, dfx_dy], [dfy_dx, dfy_dy]]
}

/// Partial derivatives of the drift with respect to the two controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSensitivity {
    /// `(dfx/dalpha, dfy/dalpha)`
    pub d_alpha: (f64, f64),
    /// `(dfx/dxi, dfy/dxi)`
    pub d_xi: (f64, f64),
}

pub fn control_sensitivity(s: State, p: &ModelParams) -> ControlSensitivity {
    let State { x, y } = s;
    let Terms { w, d, n } = Terms::at(x, p);
    let d2 = d * d;
    // dD/dalpha = xi W, dD/dxi = alpha W, dN/dxi = W
    let d_alpha = (x * y * p.xi * w / d2, -p.e * y * n * p.xi * w / d2);
    let d_xi = (x * y * p.alpha * w / d2, p.e * y * w * (d - p.alpha * n) / d2);
    ControlSensitivity { d_alpha, d_xi }
}

/// Maps the dimensional parameter set onto the non-dimensional one with
/// `N = a x`, `P = a y / c`.
pub fn nondimensionalize(d: &DimensionalParams) -> Result<ModelParams> {
    if d.a == 0.0 {
        return Err(Error::DivisionByZero("a"));
    }
    if d.c == 0.0 {
        return Err(Error::DivisionByZero("c"));
    }
    d.validate()?;
    let mp = ModelParams {
        r: d.r,
        gamma: d.k / d.a,
        omega: d.b * d.a * d.a,
        e: d.e,
        m1: d.m1,
        // substituting P = a y / c into the delta P^2 term leaves delta a / c
        m2: d.delta * d.a / d.c,
        alpha: d.alpha,
        xi: d.eta * d.a_food / d.a,
    };
    mp.validate()?;
    Ok(mp)
}

const EQ_GRID_CELLS: usize = 400;
const EQ_RESIDUAL_TOL: f64 = 1e-9;
const EQ_MERGE_TOL: f64 = 1e-6;
/// Upper end of the prey scan when the carrying capacity is infinite.
const EQ_UNBOUNDED_X: f64 = 1e3;

fn residual(s: State, p: &ModelParams) -> f64 {
    let (dx, dy) = drift_unchecked(s, p);
    dx.abs().max(dy.abs())
}

fn is_stable(s: State, p: &ModelParams) -> bool {
    let j = jacobian(s, p);
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    tr < 0.0 && det > 0.0
}

/// Newton iteration on the full two-dimensional drift.
fn polish(mut s: State, p: &ModelParams) -> State {
    let mut best = s;
    let mut best_res = residual(s, p);
    for _ in 0..50 {
        if best_res <= 1e-14 {
            break;
        }
        let (fx, fy) = drift_unchecked(s, p);
        let j = jacobian(s, p);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let dx = (j[1][1] * fx - j[0][1] * fy) / det;
        let dy = (-j[1][0] * fx + j[0][0] * fy) / det;
        s = State::new(s.x - dx, s.y - dy);
        if !s.is_finite() {
            break;
        }
        let res = residual(s, p);
        if res < best_res {
            best = s;
            best_res = res;
        }
    }
    best
}

/// All nonnegative equilibria found on the scan box. The trivial and
/// axial-prey states are exact; interior roots are located on the prey
/// nullcline by sign scanning and bisection, then Newton-polished.
pub fn equilibria(p: &ModelParams) -> Vec<Equilibrium> {
    let mut found: Vec<(State, EquilibriumKind)> = vec![(State::new(0.0, 0.0), EquilibriumKind::Trivial)];
    if p.gamma.is_finite() {
        found.push((State::new(p.gamma, 0.0), EquilibriumKind::AxialPrey));
    }
    if p.m2 > 0.0 {
        let y = (p.e * p.xi / (1.0 + p.alpha * p.xi) - p.m1) / p.m2;
        if y > 0.0 {
            found.push((State::new(0.0, y), EquilibriumKind::AxialPredator));
        }
    }

    // m2 y = e N / D - m1 and N / D <= max(1, xi / (1 + alpha xi))
    let y_cap = if p.m2 > 0.0 {
        let ratio = (p.xi / (1.0 + p.alpha * p.xi)).max(1.0);
        2.0 * p.e * ratio / p.m2 + 1.0
    } else {
        f64::INFINITY
    };
    let x_hi = if p.gamma.is_finite() { 2.0 * p.gamma } else { EQ_UNBOUNDED_X };
    // interior roots lie on the prey nullcline y = r (1 - x/gamma) D(x)
    let nullcline_y = |x: f64| p.r * (1.0 - x * p.inv_gamma()) * Terms::at(x, p).d;
    let h = |x: f64| {
        let t = Terms::at(x, p);
        p.e * t.n / t.d - p.m1 - p.m2 * nullcline_y(x)
    };
    let cell = x_hi / EQ_GRID_CELLS as f64;
    let mut prev_x = 0.0;
    let mut prev_h = h(0.0);
    for i in 1..=EQ_GRID_CELLS {
        let x = cell * i as f64;
        let hx = h(x);
        let crossing = if hx == 0.0 {
            Some(x)
        } else if prev_h != 0.0 && (prev_h < 0.0) != (hx < 0.0) {
            let (mut lo, mut hi, mut hlo) = (prev_x, x, prev_h);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let hm = h(mid);
                if (hm < 0.0) == (hlo < 0.0) {
                    lo = mid;
                    hlo = hm;
                } else {
                    hi = mid;
                }
            }
            Some(0.5 * (lo + hi))
        } else {
            None
        };
        if let Some(xr) = crossing {
            let yr = nullcline_y(xr);
            if xr > 0.0 && yr > 0.0 && yr <= y_cap {
                found.push((polish(State::new(xr, yr), p), EquilibriumKind::Interior));
            }
        }
        prev_x = x;
        prev_h = hx;
    }

    let mut out: Vec<Equilibrium> = Vec::new();
    for (state, kind) in found {
        if state.x < 0.0 || state.y < 0.0 || !state.is_finite() {
            continue;
        }
        let drift_residual = residual(state, p);
        if drift_residual > EQ_RESIDUAL_TOL {
            continue;
        }
        if out.iter().any(|e| e.state.max_dist(&state) < EQ_MERGE_TOL) {
            continue;
        }
        out.push(Equilibrium { state, kind, drift_residual, stable: is_stable(state, p) });
    }
    out.sort_by(|a, b| a.kind.cmp(&b.kind).then(a.state.x.total_cmp(&b.state.x)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline() -> ModelParams {
        ModelParams::baseline(1.0, 1.0)
    }

    #[test]
    fn response_examples() {
        let p = baseline();
        assert_eq!(functional_response(0.0, &p).unwrap(), 0.0);
        let plain = ModelParams { omega: 0.0, alpha: 0.0, xi: 0.0, ..p };
        assert_eq!(functional_response(1.0, &plain).unwrap(), 0.5);
        let p2 = ModelParams { omega: 15.0, alpha: 2.0, xi: 0.5, ..p };
        // D = 2 * 16 + 1 = 33
        assert!((functional_response(1.0, &p2).unwrap() - 1.0 / 33.0).abs() < 1e-16);
        assert!(functional_response(f64::NAN, &p).is_err());
        assert!(functional_response(f64::INFINITY, &p).is_err());
    }

    #[test]
    fn response_decays_with_group_defence() {
        let p = baseline();
        assert!(functional_response(1e6, &p).unwrap() < 1e-4);
    }

    #[test]
    fn drift_trivial_points() {
        let p = baseline();
        assert_eq!(drift(State::new(0.0, 0.0), &p).unwrap(), (0.0, 0.0));
        let (dx, dy) = drift(State::new(p.gamma, 0.0), &p).unwrap();
        assert_eq!(dx, 0.0);
        assert_eq!(dy, 0.0);
        assert!(drift(State::new(f64::NAN, 1.0), &p).is_err());
    }

    #[test]
    fn drift_without_predator_is_logistic() {
        let p = baseline();
        for i in 0..50 {
            let x = i as f64 * 0.37;
            let (dx, _) = drift(State::new(x, 0.0), &p).unwrap();
            let expected = p.r * x * (1.0 - x / p.gamma);
            assert!((dx - expected).abs() <= 1e-14 * expected.abs().max(1.0));
        }
    }

    /// Drift of the dimensional system in `(N, P)`.
    fn dimensional_drift(d: &DimensionalParams, n: f64, p: f64) -> (f64, f64) {
        let den = (d.a_food * d.eta * d.alpha + d.a) * (d.b * n * n + 1.0) + n;
        let dn = d.r * n * (1.0 - n / d.k) - d.c * n / den * p;
        let dp = d.e * (n + d.eta * d.a_food * (d.b * n * n + 1.0)) / den * p - d.m1 * p - d.delta * p * p;
        (dn, dp)
    }

    #[test]
    fn nondimensional_drift_matches_rescaled_dimensional_drift() {
        let mut rng = crate::noise::derive_stream(31, 0);
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
        for _ in 0..500 {
            let d = DimensionalParams {
                r: u(0.1, 3.0),
                k: u(1.0, 50.0),
                c: u(0.1, 5.0),
                e: u(0.05, 1.0),
                m1: u(0.0, 0.5),
                delta: u(0.0, 0.1),
                a_food: u(0.0, 10.0),
                b: u(0.0, 20.0),
                a: u(0.2, 5.0),
                eta: u(0.0, 3.0),
                alpha: u(0.0, 5.0),
            };
            let mp = nondimensionalize(&d).unwrap();
            let (x, y) = (u(0.01, 20.0), u(0.01, 100.0));
            let (fx, fy) = drift(State::new(x, y), &mp).unwrap();
            let (dn, dp) = dimensional_drift(&d, d.a * x, d.a * y / d.c);
            let (gx, gy) = (dn / d.a, dp * d.c / d.a);
            // compare on the scale of the largest term so cancellation near
            // a nullcline does not inflate the relative error
            let sx = mp.r * x * (1.0 + x / mp.gamma) + x * y;
            let sy = y * (mp.e * (1.0 + mp.xi) + mp.m1 + mp.m2 * y) + y;
            assert!((fx - gx).abs() <= 1e-12 * sx, "{fx} vs {gx}");
            assert!((fy - gy).abs() <= 1e-12 * sy, "{fy} vs {gy}");
        }
    }

    #[test]
    fn nondimensionalize_examples() {
        let base = DimensionalParams {
            r: 1.5,
            k: 24.0,
            c: 1.0,
            e: 0.4,
            m1: 0.15,
            delta: 0.01,
            a_food: 0.0,
            b: 15.0,
            a: 2.0,
            eta: 1.0,
            alpha: 1.0,
        };
        assert_eq!(nondimensionalize(&base).unwrap().gamma, 12.0);
        assert_eq!(nondimensionalize(&base).unwrap().xi, 0.0);
        let unit = DimensionalParams { a: 1.0, ..base };
        assert_eq!(nondimensionalize(&unit).unwrap().omega, 15.0);
        assert!(matches!(
            nondimensionalize(&DimensionalParams { a: 0.0, ..base }),
            Err(Error::DivisionByZero("a"))
        ));
    }

    #[test]
    fn equilibria_contain_axial_points() {
        let p = baseline();
        let eqs = equilibria(&p);
        assert!(eqs.iter().any(|e| e.state == State::new(0.0, 0.0)));
        assert!(eqs.iter().any(|e| e.state == State::new(12.0, 0.0)));
        let pred = eqs.iter().find(|e| e.kind == EquilibriumKind::AxialPredator).unwrap();
        // (0.4 * 1 / 2 - 0.15) / 0.01
        assert!((pred.state.y - 5.0).abs() < 1e-12);
        for e in &eqs {
            let (dx, dy) = drift(e.state, &p).unwrap();
            assert!(dx.abs().max(dy.abs()) <= 1e-9, "{e:?}");
        }
    }

    #[test]
    fn no_axial_predator_without_food() {
        let p = ModelParams::baseline(1.0, 0.0);
        assert!(equilibria(&p).iter().all(|e| e.kind != EquilibriumKind::AxialPredator));
    }

    #[test]
    fn interior_equilibria_found() {
        // bistable regime: a low-prey saddle and a high-prey attractor
        let p = baseline();
        let interior: Vec<_> = equilibria(&p).into_iter().filter(|e| e.kind == EquilibriumKind::Interior).collect();
        assert_eq!(interior.len(), 2, "{interior:?}");
        assert!(!interior[0].stable);
        assert!(interior[1].stable);
        assert!(interior[1].state.x > 11.0);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let p = ModelParams { alpha: 0.7, xi: 2.3, ..baseline() };
        let s = State::new(1.3, 4.2);
        let j = jacobian(s, &p);
        let h = 1e-6;
        let fd = |dx: f64, dy: f64| drift_unchecked(State::new(s.x + dx, s.y + dy), &p);
        let (ax, ay) = fd(h, 0.0);
        let (bx, by) = fd(-h, 0.0);
        let (cx, cy) = fd(0.0, h);
        let (ex, ey) = fd(0.0, -h);
        let num = [[(ax - bx) / (2.0 * h), (cx - ex) / (2.0 * h)], [(ay - by) / (2.0 * h), (cy - ey) / (2.0 * h)]];
        for i in 0..2 {
            for k in 0..2 {
                assert!((num[i][k] - j[i][k]).abs() < 1e-7 * (1.0 + j[i][k].abs()), "{i}{k}");
            }
        }
    }
}
