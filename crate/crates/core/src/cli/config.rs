//! TOML run configuration.
//!
//! ```toml
//! [model]        # r, gamma, omega, e, m1, m2, alpha, xi  (gamma may be inf)
//! [dimensional]  # r, K, c, e, m1, delta, A, b, a, eta, alpha; replaces [model]
//! [noise]        # sigma1, sigma2, lambda, jump1, jump2
//! [sim]          # dt, horizon, positivity_floor, record_noise
//! [sweep]        # max_iters, relaxation, tol, q_mode, max_backtracks
//! [bounds]       # alpha = { lo, hi }, xi = { lo, hi }
//! [target]       # x, y, epsilon, kind = "stable-interior" | "prey-free"
//! [initial]      # x, y
//! [run]          # mode, seed, paths, sweep_paths, out
//! ```
//!
//! Every key is optional. Missing keys take the values of [`RunConfig::default`];
//! unknown keys are errors.

use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{equilibria, nondimensionalize, DimensionalParams, EquilibriumKind, ModelParams, State};
use crate::montecarlo::TargetSpec;
use crate::noise::NoiseParams;
use crate::optctl::{Bounds, ControlMode, SweepConfig};
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Simulate,
    OptimizeQuality,
    OptimizeQuantity,
    Ensemble,
    Equilibria,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Simulate => "simulate",
            RunMode::OptimizeQuality => "optimize-quality",
            RunMode::OptimizeQuantity => "optimize-quantity",
            RunMode::Ensemble => "ensemble",
            RunMode::Equilibria => "equilibria",
        }
    }

    pub fn control_mode(&self) -> Option<ControlMode> {
        match self {
            RunMode::OptimizeQuality => Some(ControlMode::Quality),
            RunMode::OptimizeQuantity => Some(ControlMode::Quantity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlBounds {
    pub alpha: Bounds,
    pub xi: Bounds,
}

impl Default for ControlBounds {
    fn default() -> Self {
        ControlBounds { alpha: Bounds::new(0.0, 10.0), xi: Bounds::new(0.0, 10.0) }
    }
}

impl ControlBounds {
    pub fn for_mode(&self, mode: ControlMode) -> Bounds {
        match mode {
            ControlMode::Quality => self.alpha,
            ControlMode::Quantity => self.xi,
        }
    }
}

/// How a target is derived when `[target]` gives no explicit centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// Stable interior equilibrium with the largest prey density.
    #[default]
    StableInterior,
    /// Prey inside `[0, 2 epsilon]` with the predator at its prey-free
    /// equilibrium.
    PreyFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: RunMode,
    pub seed: u64,
    pub paths: usize,
    pub sweep_paths: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { mode: RunMode::OptimizeQuality, seed: 42, paths: 10_000, sweep_paths: 1_000 }
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelParams,
    pub noise: NoiseParams,
    pub sim: SimConfig,
    pub sweep: SweepConfig,
    pub bounds: ControlBounds,
    pub target: TargetSpec,
    pub initial: State,
    pub run: RunSection,
    pub out: PathBuf,
}

/// A resolved configuration plus the keys that fell back to defaults the
/// model gives no value for.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub defaulted: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TargetSection {
    x: Option<f64>,
    y: Option<f64>,
    epsilon: Option<f64>,
    kind: Option<TargetKind>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InitialSection {
    x: f64,
    y: f64,
}

impl Default for InitialSection {
    fn default() -> Self {
        InitialSection { x: 2.0, y: 8.0 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunFileSection {
    mode: Option<RunMode>,
    seed: Option<u64>,
    paths: Option<usize>,
    sweep_paths: Option<usize>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BoundsSection {
    alpha: Option<Bounds>,
    xi: Option<Bounds>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelParams>,
    dimensional: Option<DimensionalParams>,
    noise: NoiseParams,
    sim: SimConfig,
    sweep: SweepConfig,
    bounds: BoundsSection,
    target: TargetSection,
    initial: InitialSection,
    run: RunFileSection,
}

#[derive(Serialize)]
struct EchoTarget {
    x: f64,
    y: f64,
    epsilon: f64,
}

#[derive(Serialize)]
struct EchoInitial {
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct EchoRun<'a> {
    mode: RunMode,
    seed: u64,
    paths: usize,
    sweep_paths: usize,
    out: &'a FsPath,
}

#[derive(Serialize)]
struct Echo<'a> {
    model: &'a ModelParams,
    noise: &'a NoiseParams,
    sim: &'a SimConfig,
    sweep: &'a SweepConfig,
    bounds: &'a ControlBounds,
    target: EchoTarget,
    initial: EchoInitial,
    run: EchoRun<'a>,
}

impl Default for RunConfig {
    fn default() -> Self {
        resolve(FileConfig::default()).expect("defaults are valid").config
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.noise.validate()?;
        self.sim.validate()?;
        self.sweep.validate()?;
        self.bounds.alpha.validate().map_err(|_| Error::constraint("bounds.alpha", "need 0 <= lo <= hi, finite"))?;
        self.bounds.xi.validate().map_err(|_| Error::constraint("bounds.xi", "need 0 <= lo <= hi, finite"))?;
        self.target.validate()?;
        if !(self.initial.x > 0.0 && self.initial.y > 0.0) || !self.initial.is_finite() {
            return Err(Error::constraint("initial", "must be positive and finite"));
        }
        if self.run.paths < 1 {
            return Err(Error::constraint("paths", "must be at least 1"));
        }
        if self.run.sweep_paths < 1 {
            return Err(Error::constraint("sweep_paths", "must be at least 1"));
        }
        if self.run.seed > i64::MAX as u64 {
            return Err(Error::constraint("seed", "must not exceed 9223372036854775807"));
        }
        Ok(())
    }

    /// TOML text that parses back to `self`.
    pub fn to_toml(&self) -> Result<String> {
        let echo = Echo {
            model: &self.model,
            noise: &self.noise,
            sim: &self.sim,
            sweep: &self.sweep,
            bounds: &self.bounds,
            target: EchoTarget { x: self.target.target.x, y: self.target.target.y, epsilon: self.target.epsilon },
            initial: EchoInitial { x: self.initial.x, y: self.initial.y },
            run: EchoRun {
                mode: self.run.mode,
                seed: self.run.seed,
                paths: self.run.paths,
                sweep_paths: self.run.sweep_paths,
                out: &self.out,
            },
        };
        toml::to_string(&echo).map_err(|e| Error::Config(format!("cannot serialise configuration: {e}")))
    }
}

/// Derives a target centre from the equilibria of `mp`.
pub fn derive_target(mp: &ModelParams, kind: TargetKind, epsilon: f64) -> Result<TargetSpec> {
    let eq = equilibria(mp);
    match kind {
        TargetKind::StableInterior => eq
            .iter()
            .filter(|e| e.kind == EquilibriumKind::Interior && e.stable)
            .max_by(|a, b| a.state.x.total_cmp(&b.state.x))
            .map(|e| TargetSpec { target: e.state, epsilon })
            .ok_or_else(|| Error::constraint("target", "no stable interior equilibrium; give target.x and target.y")),
        TargetKind::PreyFree => eq
            .iter()
            .find(|e| e.kind == EquilibriumKind::AxialPredator)
            .map(|e| TargetSpec::new(epsilon, e.state.y, epsilon))
            .ok_or_else(|| Error::constraint("target", "no prey-free predator equilibrium; give target.x and target.y")),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(1);
    Error::Parse { line, message: e.message().to_string() }
}

fn resolve(file: FileConfig) -> Result<Resolved> {
    let mut defaulted = Vec::new();
    let model = match (file.model, file.dimensional) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either [model] or [dimensional], not both".into()));
        }
        (Some(m), None) => m,
        (None, Some(d)) => nondimensionalize(&d)?,
        (None, None) => ModelParams::default(),
    };
    model.validate()?;

    let bounds = ControlBounds {
        alpha: file.bounds.alpha.unwrap_or_else(|| {
            defaulted.push("bounds.alpha".to_string());
            ControlBounds::default().alpha
        }),
        xi: file.bounds.xi.unwrap_or_else(|| {
            defaulted.push("bounds.xi".to_string());
            ControlBounds::default().xi
        }),
    };

    let epsilon = file.target.epsilon.unwrap_or_else(|| {
        defaulted.push("target.epsilon".to_string());
        TargetSpec::DEFAULT_EPSILON
    });
    let target = match (file.target.x, file.target.y) {
        (Some(x), Some(y)) => {
            if file.target.kind.is_some() {
                return Err(Error::Config("target.kind cannot be combined with target.x and target.y".into()));
            }
            TargetSpec::new(x, y, epsilon)
        }
        (None, None) => {
            let kind = file.target.kind.unwrap_or_default();
            defaulted.push(format!("target.center ({})", kind_name(kind)));
            derive_target(&model, kind, epsilon)?
        }
        _ => return Err(Error::Config("target.x and target.y must be given together".into())),
    };

    let d = RunSection::default();
    let config = RunConfig {
        model,
        noise: file.noise,
        sim: file.sim,
        sweep: file.sweep,
        bounds,
        target,
        initial: State::new(file.initial.x, file.initial.y),
        run: RunSection {
            mode: file.run.mode.unwrap_or(d.mode),
            seed: file.run.seed.unwrap_or(d.seed),
            paths: file.run.paths.unwrap_or(d.paths),
            sweep_paths: file.run.sweep_paths.unwrap_or(d.sweep_paths),
        },
        out: file.run.out.unwrap_or_else(|| PathBuf::from("out")),
    };
    config.validate()?;
    Ok(Resolved { config, defaulted })
}

fn kind_name(kind: TargetKind) -> &'static str {
    match kind {
        TargetKind::StableInterior => "stable-interior",
        TargetKind::PreyFree => "prey-free",
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| parse_error(text, &e))
}

fn from_table(table: toml::Table, text: &str) -> Result<Resolved> {
    let file: FileConfig = table.try_into().map_err(|e: toml::de::Error| match e.span() {
        Some(_) => parse_error(text, &e),
        None => locate(text, e.message()),
    })?;
    resolve(file)
}

/// Best-effort line for errors raised after the text was turned into a
/// table, which carries no spans: the first line mentioning a quoted key.
fn locate(text: &str, message: &str) -> Error {
    let key = message.split('`').nth(1).unwrap_or("");
    let line = if key.is_empty() {
        1
    } else {
        text.lines()
            .position(|l| l.trim_start().starts_with(key) && l[l.find(key).unwrap_or(0) + key.len()..].trim_start().starts_with('='))
            .map_or(1, |i| i + 1)
    };
    Error::Parse { line, message: message.to_string() }
}

/// Parses configuration text, resolving defaults and derived targets.
pub fn resolve_str(text: &str) -> Result<Resolved> {
    let file: FileConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    resolve(file)
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    Ok(resolve_str(text)?.config)
}

pub fn parse_config(path: &FsPath) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text)
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves `overrides` layered on top of `base`. Errors in the overrides
/// report lines of the override text.
pub fn resolve_layered(base: &str, overrides: &str) -> Result<Resolved> {
    let mut table = parse_table(base)?;
    let top = parse_table(overrides)?;
    // a centre given in the overrides replaces a derived or explicit one
    if let (Some(toml::Value::Table(t)), Some(toml::Value::Table(b))) = (top.get("target"), table.get_mut("target")) {
        if t.contains_key("x") || t.contains_key("y") {
            b.remove("kind");
        }
        if t.contains_key("kind") {
            b.remove("x");
            b.remove("y");
        }
    }
    if top.contains_key("dimensional") {
        table.remove("model");
    }
    merge(&mut table, top);
    from_table(table, overrides)
}
