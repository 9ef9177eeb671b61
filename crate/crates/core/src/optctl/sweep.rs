//! Forward-backward sweep for the time-optimal control problem.
//!
//! Each iteration simulates the ensemble under the current schedule, runs
//! the backward pass, picks at every grid point the control value that
//! minimises the ensemble Hamiltonian and moves the schedule a fraction
//! `theta` toward it. The step is accepted only when the estimated objective
//! strictly decreases on the same random streams; otherwise `theta` is
//! halved, up to `max_backtracks` times. When no step is accepted the
//! schedule is stationary for the sweep and the run stops as converged with
//! a recorded change of zero.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{drift_unchecked, ModelParams, State};
use crate::montecarlo::{hitting_times, objective_from_times, Objective, TargetSpec, CHUNK};
use crate::noise::{derive_stream, draw_increment, NoiseParams, RandomStream};
use crate::sim::{integrate, simulate_path, Path, SimConfig};

use super::adjoint::{backward_pass, pathwise};
use super::hamiltonian::control_update;
use super::{AdjointState, Bounds, ControlMode, ControlSchedule, QMode, SweepConfig};

/// The ensemble of random streams shared by every sweep iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSet {
    pub master_seed: u64,
    pub n_paths: usize,
}

impl StreamSet {
    pub fn new(master_seed: u64, n_paths: usize) -> Self {
        StreamSet { master_seed, n_paths }
    }

    pub fn stream(&self, i: usize) -> RandomStream {
        derive_stream(self.master_seed, i as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub iter: usize,
    pub sup_change: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub schedule: ControlSchedule,
    /// Full-horizon path of stream 0 under the final schedule.
    pub state_path: Path,
    /// Pathwise costate along `state_path`.
    pub adjoint_path: Vec<AdjointState>,
    pub objective: Objective,
    pub initial_objective: Objective,
    pub history: Vec<HistoryEntry>,
    pub converged: bool,
    pub iterations: usize,
    /// Paths actually used; one when the noise is deterministic.
    pub n_paths: usize,
}

impl SweepResult {
    /// CSV with header `iter,sup_change,objective`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("iter,sup_change,objective\n");
        for h in &self.history {
            let _ = writeln!(out, "{},{:.16e},{:.16e}", h.iter, h.sup_change, h.objective);
        }
        out
    }
}

struct Problem<'a> {
    start: State,
    mode: ControlMode,
    mp: &'a ModelParams,
    np: &'a NoiseParams,
    sim: &'a SimConfig,
    cfg: &'a SweepConfig,
    bounds: Bounds,
    streams: StreamSet,
    target: &'a TargetSpec,
}

/// Records a path up to and including its first grid point inside `target`.
fn simulate_until(
    start: State,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    sim: &SimConfig,
    stream: &mut RandomStream,
    target: &TargetSpec,
) -> Result<Path> {
    let mut states = Vec::new();
    let mut noise = Vec::new();
    let dt = sim.dt;
    let clamp_events = integrate(
        start,
        schedule,
        mp,
        np,
        sim,
        |_| draw_increment(stream, np, dt),
        |_, s, inc| {
            states.push(s);
            if target.contains(s) {
                return false;
            }
            if let Some(inc) = inc {
                noise.push(*inc);
            }
            true
        },
    )?;
    let n = states.len();
    let times = (0..n).map(|k| sim.time(k)).collect();
    let controls = (0..n).map(|k| schedule.controls_at(k, mp)).collect();
    Ok(Path { times, states, controls, noise: Some(noise), clamp_events })
}

/// Sum over paths of `H(u = lo) - H(u = hi)` at every grid point.
fn add_endpoint_gap(
    acc: &mut [f64],
    path: &Path,
    adj: &[AdjointState],
    mode: ControlMode,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    bounds: Bounds,
) {
    let mut lo = *mp;
    let mut hi = *mp;
    for (k, s) in path.states.iter().enumerate() {
        let a = adj[k];
        if a.p1 == 0.0 && a.p2 == 0.0 {
            continue;
        }
        schedule.apply(k, &mut lo);
        schedule.apply(k, &mut hi);
        mode.set(&mut lo, bounds.lo);
        mode.set(&mut hi, bounds.hi);
        let (fx_lo, fy_lo) = drift_unchecked(*s, &lo);
        let (fx_hi, fy_hi) = drift_unchecked(*s, &hi);
        acc[k] += (fx_lo - fx_hi) * a.p1 + (fy_lo - fy_hi) * a.p2;
    }
}

impl Problem<'_> {
    fn n_paths(&self) -> usize {
        if self.np.is_deterministic() {
            1
        } else {
            self.streams.n_paths
        }
    }

    fn objective(&self, schedule: &ControlSchedule) -> Result<Objective> {
        let times = hitting_times(
            self.n_paths(),
            self.start,
            schedule,
            self.mp,
            self.np,
            self.sim,
            self.streams.master_seed,
            self.target,
        )?;
        Ok(objective_from_times(&times, self.sim.effective_horizon()))
    }

    fn path(&self, i: usize, schedule: &ControlSchedule) -> Result<Path> {
        let mut stream = self.streams.stream(i);
        simulate_until(self.start, schedule, self.mp, self.np, self.sim, &mut stream, self.target)
            .map_err(|e| Error::InPath { path: i, source: Box::new(e) })
    }

    /// Pointwise control values the sweep moves toward.
    fn targets(&self, schedule: &ControlSchedule) -> Result<Vec<f64>> {
        let n = self.n_paths();
        let n_points = schedule.len();
        if n == 1 {
            let path = self.path(0, schedule)?;
            let adj = backward_pass(std::slice::from_ref(&path), schedule, self.mp, self.np, self.cfg, Some(self.target))?
                .pop()
                .expect("one path in, one costate out");
            return self.single_path_targets(schedule, &path, &adj);
        }
        let mut gap = vec![0.0; n_points];
        match self.cfg.q_mode {
            QMode::PathwiseZero => {
                let n_chunks = n.div_ceil(CHUNK);
                let parts: Vec<Result<Vec<f64>>> = (0..n_chunks)
                    .into_par_iter()
                    .map(|c| {
                        let mut acc = vec![0.0; n_points];
                        let mut adj = vec![AdjointState::ZERO; n_points];
                        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                            let path = self.path(i, schedule)?;
                            let Some(k0) = self.target.first_entry(&path.states).and_then(|k| k.checked_sub(1)) else {
                                continue;
                            };
                            adj.fill(AdjointState::ZERO);
                            pathwise(&path, k0, schedule, self.mp, self.np, self.target, &mut adj)
                                .map_err(|e| Error::InPath { path: i, source: Box::new(e) })?;
                            add_endpoint_gap(&mut acc, &path, &adj, self.mode, schedule, self.mp, self.bounds);
                        }
                        Ok(acc)
                    })
                    .collect();
                for part in parts {
                    for (g, v) in gap.iter_mut().zip(part?) {
                        *g += v;
                    }
                }
            }
            QMode::Regression => {
                let paths: Vec<Path> =
                    (0..n).into_par_iter().map(|i| self.path(i, schedule)).collect::<Result<Vec<_>>>()?;
                let adj = backward_pass(&paths, schedule, self.mp, self.np, self.cfg, Some(self.target))?;
                for (path, a) in paths.iter().zip(&adj) {
                    add_endpoint_gap(&mut gap, path, a, self.mode, schedule, self.mp, self.bounds);
                }
            }
        }
        Ok(schedule
            .values
            .iter()
            .zip(&gap)
            .map(|(u, g)| {
                if *g > 0.0 {
                    self.bounds.hi
                } else if *g < 0.0 {
                    self.bounds.lo
                } else {
                    self.bounds.clamp(*u)
                }
            })
            .collect())
    }

    fn single_path_targets(&self, schedule: &ControlSchedule, path: &Path, adj: &[AdjointState]) -> Result<Vec<f64>> {
        let mut local = *self.mp;
        let mut out = Vec::with_capacity(schedule.len());
        for (k, u) in schedule.values.iter().enumerate() {
            let value = match path.states.get(k) {
                Some(s) if s.x > 0.0 => {
                    schedule.apply(k, &mut local);
                    control_update(self.mode, *s, &adj[k], &local, self.bounds)?.value
                }
                _ => self.bounds.clamp(*u),
            };
            out.push(value);
        }
        Ok(out)
    }

    fn run(&self) -> Result<SweepResult> {
        let n_points = self.sim.n_points();
        let mut schedule = ControlSchedule::constant(self.mode, self.mode.current(self.mp), n_points, self.bounds);
        let initial_objective = self.objective(&schedule)?;
        let mut objective = initial_objective;
        let mut history = Vec::new();
        let mut converged = false;
        let mut iterations = 0;

        for iter in 1..=self.cfg.max_iters {
            iterations = iter;
            let step = self.iterate(&schedule, objective).map_err(|e| Error::InIteration { iteration: iter, source: Box::new(e) })?;
            match step {
                Some((next, obj)) => {
                    let change = next.sup_distance(&schedule);
                    schedule = next;
                    objective = obj;
                    history.push(HistoryEntry { iter, sup_change: change, objective: obj.value });
                    if change <= self.cfg.tol {
                        converged = true;
                        break;
                    }
                }
                None => {
                    history.push(HistoryEntry { iter, sup_change: 0.0, objective: objective.value });
                    converged = true;
                    break;
                }
            }
        }

        let mut stream = self.streams.stream(0);
        let full = SimConfig { record_noise: true, ..*self.sim };
        let state_path = simulate_path(self.start.x, self.start.y, &schedule, self.mp, self.np, &full, &mut stream)?;
        let pathwise_cfg = SweepConfig { q_mode: QMode::PathwiseZero, ..*self.cfg };
        let adjoint_path = backward_pass(std::slice::from_ref(&state_path), &schedule, self.mp, self.np, &pathwise_cfg, Some(self.target))?
            .pop()
            .expect("one path in, one costate out");

        Ok(SweepResult {
            schedule,
            state_path,
            adjoint_path,
            objective,
            initial_objective,
            history,
            converged,
            iterations,
            n_paths: self.n_paths(),
        })
    }

    /// One sweep step; `None` when no relaxation weight improves the
    /// objective.
    fn iterate(&self, schedule: &ControlSchedule, current: Objective) -> Result<Option<(ControlSchedule, Objective)>> {
        let targets = self.targets(schedule)?;
        let mut theta = self.cfg.relaxation;
        for _ in 0..=self.cfg.max_backtracks {
            let values: Vec<f64> = schedule
                .values
                .iter()
                .zip(&targets)
                .map(|(u, t)| self.bounds.clamp((1.0 - theta) * u + theta * t))
                .collect();
            let trial = ControlSchedule { values, ..schedule.clone() };
            if trial.sup_distance(schedule) == 0.0 {
                return Ok(None);
            }
            let obj = self.objective(&trial)?;
            if obj.value < current.value {
                return Ok(Some((trial, obj)));
            }
            theta *= 0.5;
        }
        Ok(None)
    }
}

/// Optimises the control named by `mode` over `bounds`, starting from the
/// constant schedule at its current value in `mp`, for the expected
/// hitting time of `target` censored at the horizon.
#[allow(clippy::too_many_arguments)]
pub fn forward_backward_sweep(
    x0: f64,
    y0: f64,
    mode: ControlMode,
    mp: &ModelParams,
    np: &NoiseParams,
    sim: &SimConfig,
    cfg: &SweepConfig,
    bounds: Bounds,
    streams: StreamSet,
    target: &TargetSpec,
) -> Result<SweepResult> {
    if !(x0 > 0.0 && y0 > 0.0) || !x0.is_finite() || !y0.is_finite() {
        return Err(Error::invalid(format!("initial state must be positive and finite, got ({x0}, {y0})")));
    }
    if streams.n_paths < 1 {
        return Err(Error::constraint("paths", "must be at least 1"));
    }
    mp.validate()?;
    np.validate()?;
    sim.validate()?;
    cfg.validate()?;
    bounds.validate()?;
    target.validate()?;
    Problem { start: State::new(x0, y0), mode, mp, np, sim, cfg, bounds, streams, target }.run()
}
