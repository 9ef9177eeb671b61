//! Command-line front end: configuration, scenario presets and dispatch.

mod config;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use config::{
    derive_target, parse_config, parse_str, resolve_layered, resolve_str, ControlBounds, Resolved, RunConfig, RunMode,
    RunSection, TargetKind,
};
pub use run::{execute, preset, run_scenario, scenario_config, Outcome, Overrides, CONSERVATION, PEST};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "afctl", version, about = "Simulate and optimise additional food in a stochastic prey-predator model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One path under the configured constant controls.
    Simulate(Common),
    /// Optimise the food quality schedule.
    OptimizeQuality(Common),
    /// Optimise the food quantity schedule.
    OptimizeQuantity(Common),
    /// Ensemble statistics and hitting times under constant controls.
    Ensemble(Common),
    /// Equilibria of the deterministic system.
    Equilibria(Common),
    /// Run a preset: `conservation` or `pest`. `--config` overrides preset keys.
    Scenario {
        name: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (default 42)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default `out`)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of ensemble paths
    #[arg(long)]
    pub paths: Option<usize>,
    /// Time step
    #[arg(long)]
    pub dt: Option<f64>,
    /// Terminal time
    #[arg(long)]
    pub horizon: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, out: self.out.clone(), paths: self.paths, dt: self.dt, horizon: self.horizon }
    }

    fn config_text(&self) -> Result<Option<String>, Error> {
        match &self.config {
            Some(p) => std::fs::read_to_string(p).map(Some).map_err(|e| Error::io(p, e)),
            None => Ok(None),
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

fn dispatch(cli: Cli) -> Result<Outcome, Error> {
    let (mode, common) = match cli.command {
        Command::Scenario { name, common } => {
            let text = common.config_text()?;
            return run_scenario(&name, text.as_deref(), &common.overrides());
        }
        Command::Simulate(c) => (RunMode::Simulate, c),
        Command::OptimizeQuality(c) => (RunMode::OptimizeQuality, c),
        Command::OptimizeQuantity(c) => (RunMode::OptimizeQuantity, c),
        Command::Ensemble(c) => (RunMode::Ensemble, c),
        Command::Equilibria(c) => (RunMode::Equilibria, c),
    };
    let text = common.config_text()?.unwrap_or_default();
    let mut resolved = resolve_str(&text)?;
    resolved.config.run.mode = mode;
    common.overrides().apply(&mut resolved.config)?;
    execute(&resolved, None)
}

/// Runs the command line and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.converged() {
                EXIT_OK
            } else {
                eprintln!("afctl: sweep did not converge within max_iters");
                EXIT_NOT_CONVERGED
            }
        }
        Err(e) => {
            eprintln!("afctl: {e}");
            exit_code(&e)
        }
    }
}
