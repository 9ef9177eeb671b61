//! Euler-Maruyama integration of the jump-diffusion system.
//!
//! One step of length `dt` with increment `(dW1, dW2, dN)`:
//!
//! ```text
//! x' = x + fx dt + sigma1 x dW1 + jump1 x (dN - lambda dt)
//! y' = y + fy dt + sigma2 y dW2 + jump2 y (dN - lambda dt)
//! ```
//!
//! A strictly positive component that would leave `[floor, inf)` is clamped
//! to `floor` and counted. Extinct components (exactly zero) stay at zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{drift_unchecked, ModelParams, State};
use crate::noise::{draw_increment, NoiseIncrement, NoiseParams, RandomStream};
use crate::optctl::ControlSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub positivity_floor: f64,
    pub record_noise: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { dt: 1e-3, horizon: 50.0, positivity_floor: 1e-12, record_noise: true }
    }
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64) -> Self {
        SimConfig { dt, horizon, ..SimConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::constraint("dt", "must be positive and finite"));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(Error::constraint("horizon", "must be nonnegative and finite"));
        }
        if self.horizon > 0.0 && self.dt > self.horizon {
            return Err(Error::constraint("dt", "must not exceed the horizon"));
        }
        if !(self.positivity_floor > 0.0 && self.positivity_floor <= 1e-8) {
            return Err(Error::constraint("positivity_floor", "must lie in (0, 1e-8]"));
        }
        if self.n_steps() > u32::MAX as usize {
            return Err(Error::constraint("dt", "grid has too many steps"));
        }
        Ok(())
    }

    /// Number of steps; the grid is `t_k = k dt` for `k = 0..=n_steps`.
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn n_points(&self) -> usize {
        self.n_steps() + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Last grid time, `n_steps * dt`.
    pub fn effective_horizon(&self) -> f64 {
        self.time(self.n_steps())
    }
}

/// One simulated trajectory with the controls and noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    /// `(alpha, xi)` in effect from each grid point to the next.
    pub controls: Vec<(f64, f64)>,
    /// Increment used for step `k -> k+1`, when recorded.
    pub noise: Option<Vec<NoiseIncrement>>,
    pub clamp_events: u64,
}

impl Path {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn terminal(&self) -> State {
        *self.states.last().expect("path has at least one point")
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() >= 2 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    /// Checks the length relations between the columns.
    pub fn check_consistent(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 || self.times.len() != n || self.controls.len() != n {
            return Err(Error::invalid("path columns have inconsistent lengths"));
        }
        if let Some(noise) = &self.noise {
            if noise.len() + 1 != n {
                return Err(Error::invalid("noise record must have one entry per step"));
            }
        }
        Ok(())
    }

    /// CSV with header `t,x,y,alpha,xi,dW1,dW2,dN1,dN2`. Floats carry 17
    /// significant digits; the noise columns of the last row (and of every
    /// row when noise was not recorded) are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 160);
        out.push_str("t,x,y,alpha,xi,dW1,dW2,dN1,dN2\n");
        for k in 0..self.len() {
            let s = self.states[k];
            let (a, xi) = self.controls[k];
            let _ = write!(out, "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", self.times[k], s.x, s.y, a, xi);
            match self.noise.as_ref().and_then(|n| n.get(k)) {
                Some(inc) => {
                    let _ = writeln!(out, ",{:.16e},{:.16e},{},{}", inc.dw1, inc.dw2, inc.dn1, inc.dn2);
                }
                None => out.push_str(",,,,\n"),
            }
        }
        out
    }

    /// Inverse of [`Path::to_csv`]. `clamp_events` is not stored in the CSV
    /// and comes back as zero.
    pub fn from_csv(text: &str) -> Result<Path> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "t,x,y,alpha,xi,dW1,dW2,dN1,dN2" => {}
            Some((i, _)) => return Err(Error::Parse { line: i + 1, message: "unexpected header".into() }),
            None => return Err(Error::Parse { line: 1, message: "empty input".into() }),
        }
        let mut path = Path { times: vec![], states: vec![], controls: vec![], noise: None, clamp_events: 0 };
        let mut noise: Vec<NoiseIncrement> = Vec::new();
        let mut noise_rows = 0usize;
        let mut rows = 0usize;
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(Error::Parse { line: line_no, message: format!("expected 9 fields, found {}", fields.len()) });
            }
            let num = |j: usize| -> Result<f64> {
                fields[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse { line: line_no, message: format!("field {}: {e}", j + 1) })
            };
            path.times.push(num(0)?);
            path.states.push(State::new(num(1)?, num(2)?));
            path.controls.push((num(3)?, num(4)?));
            let blank = fields[5..].iter().all(|f| f.trim().is_empty());
            if !blank {
                let count = |j: usize| -> Result<u32> {
                    fields[j]
                        .trim()
                        .parse::<u32>()
                        .map_err(|e| Error::Parse { line: line_no, message: format!("field {}: {e}", j + 1) })
                };
                if noise_rows != rows {
                    return Err(Error::Parse { line: line_no, message: "noise columns resume after a gap".into() });
                }
                noise.push(NoiseIncrement { dw1: num(5)?, dw2: num(6)?, dn1: count(7)?, dn2: count(8)? });
                noise_rows += 1;
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Parse { line: 2, message: "no data rows".into() });
        }
        if noise_rows > 0 {
            if noise_rows + 1 != rows {
                return Err(Error::Parse { line: rows + 1, message: "noise must cover every step".into() });
            }
            path.noise = Some(noise);
        }
        path.check_consistent()?;
        Ok(path)
    }
}

#[inline]
fn apply_floor(old: f64, new: f64, floor: f64, clamps: &mut u32) -> f64 {
    if old == 0.0 {
        0.0
    } else if new < floor {
        *clamps += 1;
        floor
    } else {
        new
    }
}

#[inline]
pub(crate) fn step_unchecked(
    s: State,
    mp: &ModelParams,
    np: &NoiseParams,
    inc: &NoiseIncrement,
    dt: f64,
    floor: f64,
) -> (State, u32) {
    let (fx, fy) = drift_unchecked(s, mp);
    let x = s.x + fx * dt + np.sigma1 * s.x * inc.dw1 + np.jump1 * s.x * (inc.dn1 as f64 - np.lambda * dt);
    let y = s.y + fy * dt + np.sigma2 * s.y * inc.dw2 + np.jump2 * s.y * (inc.dn2 as f64 - np.lambda * dt);
    let mut clamps = 0;
    let x = apply_floor(s.x, x, floor, &mut clamps);
    let y = apply_floor(s.y, y, floor, &mut clamps);
    (State::new(x, y), clamps)
}

/// One Euler-Maruyama step under controls `(alpha, xi)`. Returns the new
/// state and the number of components clamped at the positivity floor.
pub fn step(
    s: State,
    ctrl: (f64, f64),
    mp: &ModelParams,
    np: &NoiseParams,
    inc: &NoiseIncrement,
    dt: f64,
    floor: f64,
) -> Result<(State, u32)> {
    if !s.is_finite() || s.x < 0.0 || s.y < 0.0 {
        return Err(Error::invalid(format!("state must be finite and nonnegative, got ({}, {})", s.x, s.y)));
    }
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time step must be nonnegative, got {dt}")));
    }
    let mp = mp.with_controls(ctrl.0, ctrl.1);
    let (next, clamps) = step_unchecked(s, &mp, np, inc, dt, floor);
    if !next.is_finite() {
        return Err(Error::NumericalOverflow { step: 0, detail: format!("state became ({}, {})", next.x, next.y) });
    }
    Ok((next, clamps))
}

fn check_initial(x0: f64, y0: f64) -> Result<()> {
    if !(x0 >= 0.0 && y0 >= 0.0) || !x0.is_finite() || !y0.is_finite() {
        return Err(Error::invalid(format!("initial state must be finite and nonnegative, got ({x0}, {y0})")));
    }
    Ok(())
}

/// Low-level driver shared by path recording and streaming ensembles.
/// `visit(k, state_k, inc_k)` is called before every step and may stop the
/// integration early by returning `false`; it is called once more with the
/// terminal state and `None`. Returns the clamp count.
pub(crate) fn integrate<N, V>(
    start: State,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SimConfig,
    mut next_noise: N,
    mut visit: V,
) -> Result<u64>
where
    N: FnMut(usize) -> NoiseIncrement,
    V: FnMut(usize, State, Option<&NoiseIncrement>) -> bool,
{
    let n = cfg.n_steps();
    let mut s = start;
    let mut clamps = 0u64;
    let mut local = *mp;
    for k in 0..n {
        let inc = next_noise(k);
        if !visit(k, s, Some(&inc)) {
            return Ok(clamps);
        }
        schedule.apply(k, &mut local);
        let (next, c) = step_unchecked(s, &local, np, &inc, cfg.dt, cfg.positivity_floor);
        if !next.is_finite() {
            return Err(Error::NumericalOverflow {
                step: k,
                detail: format!("state became ({}, {}) from ({}, {})", next.x, next.y, s.x, s.y),
            });
        }
        clamps += c as u64;
        s = next;
    }
    visit(n, s, None);
    Ok(clamps)
}

fn check_inputs(schedule: &ControlSchedule, mp: &ModelParams, np: &NoiseParams, cfg: &SimConfig) -> Result<()> {
    cfg.validate()?;
    mp.validate()?;
    np.validate()?;
    schedule.validate()?;
    if schedule.len() != cfg.n_points() {
        return Err(Error::Config(format!(
            "control schedule has {} points but the grid has {}",
            schedule.len(),
            cfg.n_points()
        )));
    }
    Ok(())
}

fn record(
    start: State,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SimConfig,
    next_noise: impl FnMut(usize) -> NoiseIncrement,
    keep_noise: bool,
) -> Result<Path> {
    let n = cfg.n_points();
    let mut states = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(if keep_noise { n - 1 } else { 0 });
    let clamp_events = integrate(start, schedule, mp, np, cfg, next_noise, |_, s, inc| {
        states.push(s);
        if keep_noise {
            if let Some(inc) = inc {
                noise.push(*inc);
            }
        }
        true
    })?;
    let times = (0..n).map(|k| cfg.time(k)).collect();
    let controls = (0..n).map(|k| schedule.controls_at(k, mp)).collect();
    Ok(Path { times, states, controls, noise: keep_noise.then_some(noise), clamp_events })
}

/// Simulates one path on the grid of `cfg`, drawing noise from `stream`.
pub fn simulate_path(
    x0: f64,
    y0: f64,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SimConfig,
    stream: &mut RandomStream,
) -> Result<Path> {
    check_initial(x0, y0)?;
    check_inputs(schedule, mp, np, cfg)?;
    let dt = cfg.dt;
    record(State::new(x0, y0), schedule, mp, np, cfg, |_| draw_increment(stream, np, dt), cfg.record_noise)
}

/// Re-runs a path on prescribed increments, e.g. a stored noise record or
/// a coarsened Brownian refinement.
pub fn simulate_with_noise(
    x0: f64,
    y0: f64,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SimConfig,
    increments: &[NoiseIncrement],
) -> Result<Path> {
    check_initial(x0, y0)?;
    check_inputs(schedule, mp, np, cfg)?;
    if increments.len() != cfg.n_steps() {
        return Err(Error::Config(format!(
            "{} increments supplied for {} steps",
            increments.len(),
            cfg.n_steps()
        )));
    }
    record(State::new(x0, y0), schedule, mp, np, cfg, |k| increments[k], cfg.record_noise)
}
