//! Stochastic maximum principle machinery: Hamiltonian, costate
//! integration, control updates and the forward-backward sweep.

mod adjoint;
mod hamiltonian;
mod sweep;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub use adjoint::{backward_pass, entry_costate};
pub use hamiltonian::{
    adjoint_drift, arrow_residual_quality, arrow_residual_quantity, control_update, control_update_quality,
    control_update_quantity, hamiltonian, quality_closed_form, quantity_closed_form, switching, Branch, ControlUpdate,
};
pub use sweep::{forward_backward_sweep, HistoryEntry, StreamSet, SweepResult};

/// Which additional-food parameter is being optimised; the other one stays
/// at its value in [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    Quality,
    Quantity,
}

impl ControlMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlMode::Quality => "quality",
            ControlMode::Quantity => "quantity",
        }
    }

    /// Current value of the controlled parameter.
    pub fn current(&self, mp: &ModelParams) -> f64 {
        match self {
            ControlMode::Quality => mp.alpha,
            ControlMode::Quantity => mp.xi,
        }
    }

    #[inline]
    pub fn set(&self, mp: &mut ModelParams, value: f64) {
        match self {
            ControlMode::Quality => mp.alpha = value,
            ControlMode::Quantity => mp.xi = value,
        }
    }
}

/// Admissible interval `[lo, hi]` with `lo >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Bounds { lo, hi }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::constraint("bounds", "must be finite"));
        }
        if self.lo < 0.0 {
            return Err(Error::constraint("bounds", "lower bound must be nonnegative"));
        }
        if self.lo > self.hi {
            return Err(Error::constraint("bounds", "lower bound exceeds upper bound"));
        }
        Ok(())
    }

    #[inline]
    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Open-loop control values on the simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    pub values: Vec<f64>,
    pub mode: ControlMode,
    pub bounds: Bounds,
}

impl ControlSchedule {
    pub fn constant(mode: ControlMode, value: f64, n_points: usize, bounds: Bounds) -> Self {
        ControlSchedule { values: vec![bounds.clamp(value); n_points], mode, bounds }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if let Some((k, v)) = self.values.iter().enumerate().find(|(_, v)| !self.bounds.contains(**v)) {
            return Err(Error::invalid(format!(
                "control value {v} at grid point {k} outside [{}, {}]",
                self.bounds.lo, self.bounds.hi
            )));
        }
        Ok(())
    }

    /// Writes the value for grid point `k` into `mp`.
    #[inline]
    pub fn apply(&self, k: usize, mp: &mut ModelParams) {
        self.mode.set(mp, self.values[k]);
    }

    /// `(alpha, xi)` in effect at grid point `k`.
    pub fn controls_at(&self, k: usize, mp: &ModelParams) -> (f64, f64) {
        let mut local = *mp;
        self.apply(k, &mut local);
        (local.alpha, local.xi)
    }

    pub fn sup_distance(&self, other: &ControlSchedule) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Mean over the grid points.
    pub fn time_average(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// CSV with header `t,u`.
    pub fn to_csv(&self, dt: f64) -> String {
        let mut out = String::from("t,u\n");
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{:.16e},{:.16e}", k as f64 * dt, v);
        }
        out
    }
}

/// Costates of the adjoint system: `p` pairs with the drift, the 2x2 `q`
/// (row-major) with the Brownian terms, `r` with the jump terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdjointState {
    pub p1: f64,
    pub p2: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
    pub r1: f64,
    pub r2: f64,
}

impl AdjointState {
    pub const ZERO: AdjointState = AdjointState { p1: 0.0, p2: 0.0, q1: 0.0, q2: 0.0, q3: 0.0, q4: 0.0, r1: 0.0, r2: 0.0 };

    pub fn from_p(p1: f64, p2: f64) -> Self {
        AdjointState { p1, p2, ..AdjointState::ZERO }
    }

    pub fn is_finite(&self) -> bool {
        [self.p1, self.p2, self.q1, self.q2, self.q3, self.q4, self.r1, self.r2].iter().all(|v| v.is_finite())
    }
}

/// CSV with header `t,p1,p2,q1,q2,q3,q4,r1,r2`.
pub fn adjoint_csv(adjoint: &[AdjointState], dt: f64) -> String {
    let mut out = String::from("t,p1,p2,q1,q2,q3,q4,r1,r2\n");
    for (k, a) in adjoint.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            k as f64 * dt,
            a.p1,
            a.p2,
            a.q1,
            a.q2,
            a.q3,
            a.q4,
            a.r1,
            a.r2
        );
    }
    out
}

/// How the martingale costates `q` and `r` are estimated in the backward
/// pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QMode {
    /// `q = r = 0`; each path's costate is integrated on its own.
    PathwiseZero,
    /// Cross-sectional least squares of `p_{k+1}` on the step's Brownian
    /// and compensated jump increments.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub max_iters: usize,
    /// Initial relaxation weight of each update; halved on failed steps.
    pub relaxation: f64,
    pub tol: f64,
    pub q_mode: QMode,
    /// Halvings of the relaxation weight tried before the sweep declares the
    /// current schedule stationary.
    pub max_backtracks: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { max_iters: 200, relaxation: 0.5, tol: 1e-4, q_mode: QMode::PathwiseZero, max_backtracks: 10 }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::constraint("max_iters", "must be at least 1"));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::constraint("relaxation", "must lie in (0, 1]"));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::constraint("tol", "must be positive"));
        }
        if self.max_backtracks > 60 {
            return Err(Error::constraint("max_backtracks", "must be at most 60"));
        }
        Ok(())
    }
}
