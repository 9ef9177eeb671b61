//! Pipelines behind the subcommands and the files they write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{equilibria, State};
use crate::montecarlo::{estimate_objective, run_ensemble, EnsembleStats};
use crate::noise::derive_stream;
use crate::optctl::{adjoint_csv, forward_backward_sweep, Bounds, ControlMode, ControlSchedule, StreamSet, SweepResult};
use crate::sim::{simulate_path, Path};

use super::config::{resolve_layered, Resolved, RunConfig, RunMode};

pub const CONSERVATION: &str = include_str!("../../configs/conservation.toml");
pub const PEST: &str = include_str!("../../configs/pest.toml");

/// Preset text for a named scenario.
pub fn preset(name: &str) -> Result<&'static str> {
    match name {
        "conservation" => Ok(CONSERVATION),
        "pest" => Ok(PEST),
        other => Err(Error::Config(format!("unknown scenario `{other}`; expected `conservation` or `pest`"))),
    }
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(paths) = self.paths {
            cfg.run.paths = paths;
        }
        if let Some(dt) = self.dt {
            cfg.sim.dt = dt;
        }
        if let Some(h) = self.horizon {
            cfg.sim.horizon = h;
        }
        cfg.validate()
    }
}

/// What a run produced, for callers that inspect results directly.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub mode: RunMode,
    pub sweep: Option<SweepResult>,
    pub stats: Option<EnsembleStats>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    /// False only for a sweep that hit `max_iters`.
    pub fn converged(&self) -> bool {
        self.sweep.as_ref().is_none_or(|s| s.converged)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    mode: &'static str,
    scenario: Option<&'a str>,
    seed: u64,
    config_file: &'static str,
    config_sha256: String,
    defaulted: &'a [String],
    rerun: String,
}

#[derive(Serialize, Default)]
struct Summary {
    objective: Option<f64>,
    objective_se: Option<f64>,
    censored_fraction: Option<f64>,
    /// `E[integral of 1 dt over [0, T]]`, which is always `T`.
    fixed_horizon_objective: Option<f64>,
    mean_hitting_time: Option<f64>,
    hitting_time_se: Option<f64>,
    terminal_mean_x: Option<f64>,
    terminal_mean_y: Option<f64>,
    clamp_events: Option<u64>,
    initial_objective: Option<f64>,
    control_time_average: Option<f64>,
    sweep_converged: Option<bool>,
    sweep_iterations: Option<usize>,
    sweep_paths_used: Option<usize>,
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &FsPath) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Writer { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn put(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

fn phase_csv(states: &[State]) -> String {
    let mut out = String::from("x,y\n");
    for s in states {
        let _ = writeln!(out, "{:.16e},{:.16e}", s.x, s.y);
    }
    out
}

fn equilibria_csv(cfg: &RunConfig) -> String {
    let mut out = String::from("x,y,kind,stable,residual\n");
    for e in equilibria(&cfg.model) {
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{},{},{:.3e}",
            e.state.x,
            e.state.y,
            e.kind.as_str(),
            u8::from(e.stable),
            e.drift_residual
        );
    }
    out
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn constant_schedule(cfg: &RunConfig) -> ControlSchedule {
    let a = cfg.model.alpha;
    ControlSchedule::constant(ControlMode::Quality, a, cfg.sim.n_points(), Bounds::new(a, a))
}

fn ensemble(cfg: &RunConfig, schedule: &ControlSchedule) -> Result<EnsembleStats> {
    run_ensemble(
        cfg.run.paths,
        cfg.initial.x,
        cfg.initial.y,
        schedule,
        &cfg.model,
        &cfg.noise,
        &cfg.sim,
        cfg.run.seed,
        Some(&cfg.target),
    )
}

fn summarize(summary: &mut Summary, stats: &EnsembleStats) {
    let obj = estimate_objective(stats, stats.horizon);
    summary.objective = Some(obj.value);
    summary.objective_se = Some(obj.std_error);
    summary.censored_fraction = Some(obj.censored_fraction);
    summary.fixed_horizon_objective = Some(stats.horizon);
    summary.mean_hitting_time = Some(stats.mean_hitting_time);
    summary.hitting_time_se = Some(stats.hitting_time_se);
    let m = stats.terminal_mean();
    summary.terminal_mean_x = Some(m.x);
    summary.terminal_mean_y = Some(m.y);
    summary.clamp_events = Some(stats.clamp_events);
}

fn write_stats(w: &mut Writer, stats: &EnsembleStats) -> Result<()> {
    w.put("stats.csv", &stats.to_csv())?;
    w.put("hitting_times.csv", &stats.hitting_times_csv())
}

fn write_path(w: &mut Writer, path: &Path) -> Result<()> {
    w.put("trajectory.csv", &path.to_csv())?;
    w.put("phase.csv", &phase_csv(&path.states))
}

/// Runs `cfg.run.mode` and writes its artifacts, the resolved
/// configuration and the manifest into `cfg.out`.
pub fn execute(resolved: &Resolved, scenario: Option<&str>) -> Result<Outcome> {
    let cfg = &resolved.config;
    cfg.validate()?;
    let mut w = Writer::new(&cfg.out)?;
    let mut summary = Summary::default();
    let mut outcome = Outcome { mode: cfg.run.mode, sweep: None, stats: None, files: Vec::new() };

    match cfg.run.mode {
        RunMode::Equilibria => w.put("equilibria.csv", &equilibria_csv(cfg))?,
        RunMode::Simulate => {
            let mut stream = derive_stream(cfg.run.seed, 0);
            let path = simulate_path(
                cfg.initial.x,
                cfg.initial.y,
                &constant_schedule(cfg),
                &cfg.model,
                &cfg.noise,
                &cfg.sim,
                &mut stream,
            )?;
            write_path(&mut w, &path)?;
        }
        RunMode::Ensemble => {
            let stats = ensemble(cfg, &constant_schedule(cfg))?;
            write_stats(&mut w, &stats)?;
            w.put("phase.csv", &phase_csv(&stats.mean))?;
            summarize(&mut summary, &stats);
            outcome.stats = Some(stats);
        }
        RunMode::OptimizeQuality | RunMode::OptimizeQuantity => {
            let mode = cfg.run.mode.control_mode().expect("optimising mode");
            let sweep = forward_backward_sweep(
                cfg.initial.x,
                cfg.initial.y,
                mode,
                &cfg.model,
                &cfg.noise,
                &cfg.sim,
                &cfg.sweep,
                cfg.bounds.for_mode(mode),
                StreamSet::new(cfg.run.seed, cfg.run.sweep_paths),
                &cfg.target,
            )?;
            w.put("control.csv", &sweep.schedule.to_csv(cfg.sim.dt))?;
            w.put("adjoint.csv", &adjoint_csv(&sweep.adjoint_path, cfg.sim.dt))?;
            w.put("history.csv", &sweep.history_csv())?;
            write_path(&mut w, &sweep.state_path)?;
            let stats = ensemble(cfg, &sweep.schedule)?;
            write_stats(&mut w, &stats)?;
            summarize(&mut summary, &stats);
            summary.initial_objective = Some(sweep.initial_objective.value);
            summary.control_time_average = Some(sweep.schedule.time_average());
            summary.sweep_converged = Some(sweep.converged);
            summary.sweep_iterations = Some(sweep.iterations);
            summary.sweep_paths_used = Some(sweep.n_paths);
            outcome.stats = Some(stats);
            outcome.sweep = Some(sweep);
        }
    }

    if cfg.run.mode != RunMode::Equilibria && cfg.run.mode != RunMode::Simulate {
        let text = toml::to_string(&summary).map_err(|e| Error::Config(format!("cannot serialise summary: {e}")))?;
        w.put("summary.toml", &text)?;
    }

    let config_text = cfg.to_toml()?;
    w.put("resolved_config.toml", &config_text)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        mode: cfg.run.mode.as_str(),
        scenario,
        seed: cfg.run.seed,
        config_file: "resolved_config.toml",
        config_sha256: sha256_hex(&config_text),
        defaulted: &resolved.defaulted,
        rerun: format!("afctl {} --config resolved_config.toml", cfg.run.mode.as_str()),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("cannot serialise manifest: {e}")))?;
    w.put("manifest.toml", &text)?;
    outcome.files = w.files;
    Ok(outcome)
}

/// Resolves a scenario preset with optional TOML overrides layered on top.
pub fn scenario_config(name: &str, overrides: Option<&str>) -> Result<Resolved> {
    resolve_layered(preset(name)?, overrides.unwrap_or(""))
}

/// Runs a named scenario end to end.
pub fn run_scenario(name: &str, overrides: Option<&str>, cli: &Overrides) -> Result<Outcome> {
    let mut resolved = scenario_config(name, overrides)?;
    cli.apply(&mut resolved.config)?;
    execute(&resolved, Some(name))
}
