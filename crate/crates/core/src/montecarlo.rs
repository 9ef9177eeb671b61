//! Ensembles of paths, pointwise moments and hitting-time estimates.
//!
//! Paths are processed in fixed chunks of [`CHUNK`] consecutive indices.
//! Each chunk is reduced sequentially and chunk results are merged in index
//! order, so every statistic is bit-identical for any number of workers.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, State};
use crate::noise::{derive_stream, draw_increment, NoiseParams};
use crate::optctl::ControlSchedule;
use crate::sim::{integrate, Path, SimConfig};

/// Paths per sequential reduction unit.
pub const CHUNK: usize = 32;
/// Chunks evaluated per parallel batch; bounds the memory held by partial
/// moment vectors.
const BATCH: usize = 16;

/// Max-norm ball around a target state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub target: State,
    pub epsilon: f64,
}

impl TargetSpec {
    pub const DEFAULT_EPSILON: f64 = 0.5;

    pub fn new(x: f64, y: f64, epsilon: f64) -> Self {
        TargetSpec { target: State::new(x, y), epsilon }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::constraint("epsilon", "must be positive and finite"));
        }
        if !self.target.is_finite() || self.target.x < 0.0 || self.target.y < 0.0 {
            return Err(Error::constraint("target", "must be finite and nonnegative"));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, s: State) -> bool {
        s.max_dist(&self.target) <= self.epsilon
    }

    /// Index of the first state inside the ball.
    pub fn first_entry(&self, states: &[State]) -> Option<usize> {
        states.iter().position(|s| self.contains(*s))
    }
}

/// First grid entry into a target, or censoring at the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HittingTime {
    Hit { index: usize, time: f64 },
    Censored,
}

impl HittingTime {
    pub fn is_censored(&self) -> bool {
        matches!(self, HittingTime::Censored)
    }

    /// Hitting time with censored paths mapped to `horizon`.
    pub fn capped(&self, horizon: f64) -> f64 {
        match *self {
            HittingTime::Hit { time, .. } => time,
            HittingTime::Censored => horizon,
        }
    }

    pub fn index(&self) -> Option<usize> {
        match *self {
            HittingTime::Hit { index, .. } => Some(index),
            HittingTime::Censored => None,
        }
    }
}

pub fn hitting_time(path: &Path, target: &TargetSpec) -> HittingTime {
    match target.first_entry(&path.states) {
        Some(index) => HittingTime::Hit { index, time: path.times[index] },
        None => HittingTime::Censored,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub n_paths: usize,
    pub times: Vec<f64>,
    pub mean: Vec<State>,
    /// Sample standard deviation (divisor `n - 1`; zero for one path).
    pub std: Vec<State>,
    /// Empty when no target was given.
    pub hitting_times: Vec<HittingTime>,
    /// Mean over uncensored paths; NaN when every path is censored.
    pub mean_hitting_time: f64,
    /// Standard error of `mean_hitting_time`; NaN below two uncensored paths.
    pub hitting_time_se: f64,
    pub censored_fraction: f64,
    pub clamp_events: u64,
    pub horizon: f64,
}

impl EnsembleStats {
    pub fn terminal_mean(&self) -> State {
        *self.mean.last().expect("ensemble has at least one grid point")
    }

    /// Mean of the mean path over grid points with `t >= from`.
    pub fn window_mean(&self, from: f64) -> State {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for (t, m) in self.times.iter().zip(&self.mean) {
            if *t >= from {
                sx += m.x;
                sy += m.y;
                n += 1;
            }
        }
        State::new(sx / n as f64, sy / n as f64)
    }

    /// Smallest mean-path component over grid points with `t >= from`.
    pub fn window_min(&self, from: f64) -> State {
        let mut out = State::new(f64::INFINITY, f64::INFINITY);
        for (t, m) in self.times.iter().zip(&self.mean) {
            if *t >= from {
                out.x = out.x.min(m.x);
                out.y = out.y.min(m.y);
            }
        }
        out
    }

    /// CSV with header `t,mean_x,mean_y,std_x,std_y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean_x,mean_y,std_x,std_y\n");
        for k in 0..self.times.len() {
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.times[k], self.mean[k].x, self.mean[k].y, self.std[k].x, self.std[k].y
            );
        }
        out
    }

    /// CSV with header `path_index,tau,censored`; censored rows carry the
    /// horizon as `tau`.
    pub fn hitting_times_csv(&self) -> String {
        let mut out = String::from("path_index,tau,censored\n");
        for (i, h) in self.hitting_times.iter().enumerate() {
            let _ = writeln!(out, "{},{:.16e},{}", i, h.capped(self.horizon), u8::from(h.is_censored()));
        }
        out
    }
}

/// Time-optimal objective `E[tau ^ T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub std_error: f64,
    pub censored_fraction: f64,
}

/// Mean and standard error of capped hitting times.
pub fn objective_from_times(times: &[HittingTime], horizon: f64) -> Objective {
    let n = times.len();
    if n == 0 {
        return Objective { value: horizon, std_error: 0.0, censored_fraction: 1.0 };
    }
    let mut w = Welford::default();
    let mut censored = 0usize;
    for h in times {
        w.push(h.capped(horizon));
        censored += usize::from(h.is_censored());
    }
    // guard against rounding above the horizon
    let value = w.mean.clamp(0.0, horizon);
    Objective { value, std_error: w.std_error(), censored_fraction: censored as f64 / n as f64 }
}

pub fn estimate_objective(stats: &EnsembleStats, horizon: f64) -> Objective {
    objective_from_times(&stats.hitting_times, horizon)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    #[inline]
    fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    #[inline]
    fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * (other.n as f64 / n as f64);
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64 / n as f64);
        self.n = n;
    }

    fn sample_std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2.max(0.0) / (self.n - 1) as f64).sqrt()
        }
    }

    fn std_error(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.sample_std() / (self.n as f64).sqrt()
        }
    }
}

struct ChunkMoments {
    x: Vec<Welford>,
    y: Vec<Welford>,
    hits: Vec<HittingTime>,
    clamps: u64,
}

impl ChunkMoments {
    fn new(n_points: usize) -> Self {
        ChunkMoments {
            x: vec![Welford::default(); n_points],
            y: vec![Welford::default(); n_points],
            hits: Vec::new(),
            clamps: 0,
        }
    }

    fn merge(&mut self, other: ChunkMoments) {
        for (a, b) in self.x.iter_mut().zip(&other.x) {
            a.merge(b);
        }
        for (a, b) in self.y.iter_mut().zip(&other.y) {
            a.merge(b);
        }
        self.hits.extend(other.hits);
        self.clamps += other.clamps;
    }
}

struct EnsembleJob<'a> {
    start: State,
    schedule: &'a ControlSchedule,
    mp: &'a ModelParams,
    np: &'a NoiseParams,
    cfg: &'a SimConfig,
    seed: u64,
    target: Option<&'a TargetSpec>,
}

impl EnsembleJob<'_> {
    fn chunk(&self, lo: usize, hi: usize) -> Result<ChunkMoments> {
        let n_points = self.cfg.n_points();
        let mut acc = ChunkMoments::new(n_points);
        for i in lo..hi {
            let mut stream = derive_stream(self.seed, i as u64);
            let mut hit = None;
            let dt = self.cfg.dt;
            let clamps = integrate(
                self.start,
                self.schedule,
                self.mp,
                self.np,
                self.cfg,
                |_| draw_increment(&mut stream, self.np, dt),
                |k, s, _| {
                    acc.x[k].push(s.x);
                    acc.y[k].push(s.y);
                    if hit.is_none() && self.target.is_some_and(|t| t.contains(s)) {
                        hit = Some(k);
                    }
                    true
                },
            )
            .map_err(|e| Error::InPath { path: i, source: Box::new(e) })?;
            acc.clamps += clamps;
            if self.target.is_some() {
                acc.hits.push(match hit {
                    Some(index) => HittingTime::Hit { index, time: self.cfg.time(index) },
                    None => HittingTime::Censored,
                });
            }
        }
        Ok(acc)
    }

    fn run(&self, n: usize) -> Result<EnsembleStats> {
        let n_points = self.cfg.n_points();
        let n_chunks = n.div_ceil(CHUNK);
        let mut total = ChunkMoments::new(n_points);
        let mut c0 = 0;
        while c0 < n_chunks {
            let c1 = (c0 + BATCH).min(n_chunks);
            let parts: Vec<Result<ChunkMoments>> =
                (c0..c1).into_par_iter().map(|c| self.chunk(c * CHUNK, ((c + 1) * CHUNK).min(n))).collect();
            for part in parts {
                total.merge(part?);
            }
            c0 = c1;
        }

        let horizon = self.cfg.effective_horizon();
        let mut hit_stats = Welford::default();
        let mut censored = 0usize;
        for h in &total.hits {
            match h {
                HittingTime::Hit { time, .. } => hit_stats.push(*time),
                HittingTime::Censored => censored += 1,
            }
        }
        let (mean_hitting_time, hitting_time_se) = match hit_stats.n {
            0 => (f64::NAN, f64::NAN),
            1 => (hit_stats.mean, f64::NAN),
            _ => (hit_stats.mean, hit_stats.std_error()),
        };
        let censored_fraction = if total.hits.is_empty() { 0.0 } else { censored as f64 / total.hits.len() as f64 };
        Ok(EnsembleStats {
            n_paths: n,
            times: (0..n_points).map(|k| self.cfg.time(k)).collect(),
            mean: total.x.iter().zip(&total.y).map(|(x, y)| State::new(x.mean, y.mean)).collect(),
            std: total.x.iter().zip(&total.y).map(|(x, y)| State::new(x.sample_std(), y.sample_std())).collect(),
            hitting_times: total.hits,
            mean_hitting_time,
            hitting_time_se,
            censored_fraction,
            clamp_events: total.clamps,
            horizon,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn check_ensemble(
    n: usize,
    x0: f64,
    y0: f64,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SimConfig,
    target: Option<&TargetSpec>,
) -> Result<()> {
    if n < 1 {
        return Err(Error::constraint("paths", "must be at least 1"));
    }
    if !(x0 >= 0.0 && y0 >= 0.0) || !x0.is_finite() || !y0.is_finite() {
        return Err(Error::invalid(format!("initial state must be finite and nonnegative, got ({x0}, {y0})")));
    }
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
    if let Some(t) = target {
        t.validate()?;
    }
    Ok(())
}

/// Simulates paths `0..n` with streams `derive_stream(seed, i)` and reduces
/// them to pointwise moments and, when `target` is given, hitting times.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    n: usize,
    x0: f64,
    y0: f64,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SimConfig,
    seed: u64,
    target: Option<&TargetSpec>,
) -> Result<EnsembleStats> {
    check_ensemble(n, x0, y0, schedule, mp, np, cfg, target)?;
    EnsembleJob { start: State::new(x0, y0), schedule, mp, np, cfg, seed, target }.run(n)
}

/// [`run_ensemble`] on a dedicated pool of `workers` threads.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble_with_workers(
    workers: usize,
    n: usize,
    x0: f64,
    y0: f64,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SimConfig,
    seed: u64,
    target: Option<&TargetSpec>,
) -> Result<EnsembleStats> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_ensemble(n, x0, y0, schedule, mp, np, cfg, seed, target))
}

/// Hitting times of paths `0..n`, each integrated only up to its first
/// entry into `target`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn hitting_times(
    n: usize,
    start: State,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SimConfig,
    seed: u64,
    target: &TargetSpec,
) -> Result<Vec<HittingTime>> {
    let n_chunks = n.div_ceil(CHUNK);
    let parts: Vec<Result<Vec<HittingTime>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut out = Vec::with_capacity(CHUNK);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let mut stream = derive_stream(seed, i as u64);
                let mut hit = None;
                let dt = cfg.dt;
                integrate(
                    start,
                    schedule,
                    mp,
                    np,
                    cfg,
                    |_| draw_increment(&mut stream, np, dt),
                    |k, s, _| {
                        if target.contains(s) {
                            hit = Some(k);
                            false
                        } else {
                            true
                        }
                    },
                )
                .map_err(|e| Error::InPath { path: i, source: Box::new(e) })?;
                out.push(match hit {
                    Some(index) => HittingTime::Hit { index, time: cfg.time(index) },
                    None => HittingTime::Censored,
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(n);
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

/// `E[tau ^ T]` over `n` paths seeded with `seed`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    n: usize,
    x0: f64,
    y0: f64,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SimConfig,
    seed: u64,
    target: &TargetSpec,
) -> Result<Objective> {
    check_ensemble(n, x0, y0, schedule, mp, np, cfg, Some(target))?;
    let times = hitting_times(n, State::new(x0, y0), schedule, mp, np, cfg, seed, target)?;
    Ok(objective_from_times(&times, cfg.effective_horizon()))
}
