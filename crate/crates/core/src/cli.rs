//! `sim` command-line interface.
//!
//! ```text
//! sim run --config scenario.toml --mode advisory --out out/
//! sim compare --config scenario.toml --out out/
//! sim validate --config scenario.toml
//! ```
//!
//! Exit codes: 0 success, 1 output failure, 2 unreadable or invalid
//! config, 3 collision. Log verbosity comes from `ECOPLATOON_LOG`
//! (`error`, `warn`, `info`, `debug`, `trace`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::engine::{run, ConfigError, EngineError, Mode, RunOutput, ScenarioConfig};
use crate::report::{write_comparison, write_run, Comparison, ReportError};

pub const LOG_ENV: &str = "ECOPLATOON_LOG";

#[derive(Debug, Parser)]
#[command(name = "sim", version, about = "Eco-platooning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Advisory,
    Baseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Advisory => Mode::Advisory,
            ModeArg::Baseline => Mode::Baseline,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write trajectory, summary and events.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "advisory")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run advisory and baseline with the same config and compare fuel.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(EngineError),
    #[error(transparent)]
    Output(#[from] ReportError),
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(c) => CliError::Config(c),
            other => CliError::Engine(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Read { .. } | CliError::Config(_) => 2,
            CliError::Engine(EngineError::Collision(_)) => 3,
            CliError::Engine(_) | CliError::Output(_) => 1,
        }
    }
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let config = ScenarioConfig::from_toml(&text)?;
    config.validate()?;
    Ok(config)
}

pub fn run_command(config_path: &Path, mode: Mode, out: &Path) -> Result<RunOutput, CliError> {
    let mut config = load_config(config_path)?;
    config.mode = mode;
    let output = run(&config)?;
    write_run(out, &output)?;
    Ok(output)
}

/// Both runs share the config apart from the mode and execute in parallel.
pub fn compare_command(config_path: &Path, out: &Path) -> Result<Comparison, CliError> {
    let config = load_config(config_path)?;
    let with_mode = |mode| ScenarioConfig { mode, ..config.clone() };
    let (advisory_cfg, baseline_cfg) = (with_mode(Mode::Advisory), with_mode(Mode::Baseline));
    let (advisory, baseline) = std::thread::scope(|s| {
        let a = s.spawn(|| run(&advisory_cfg));
        let b = s.spawn(|| run(&baseline_cfg));
        (
            a.join().expect("advisory run panicked"),
            b.join().expect("baseline run panicked"),
        )
    });
    let (advisory, baseline) = (advisory?, baseline?);
    write_run(&out.join("advisory"), &advisory)?;
    write_run(&out.join("baseline"), &baseline)?;
    let comparison = Comparison::new(&baseline.summary, &advisory.summary);
    write_comparison(out, &comparison)?;
    Ok(comparison)
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run { config, mode, out } => run_command(&config, mode.into(), &out).map(|o| {
            let s = &o.summary;
            println!(
                "{} run: {:.1} s, leader fuel {:.4} L, platoon fuel {:.4} L, leader stops {}, splits {}",
                s.mode.as_str(),
                s.travel_time,
                s.leader_fuel,
                s.total_fuel,
                s.leader_stops,
                s.split_count
            );
        }),
        Command::Compare { config, out } => compare_command(&config, &out).map(|c| print!("{}", c.table())),
        Command::Validate { config } => load_config(&config).map(|_| println!("{}: ok", config.display())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            if let CliError::Engine(EngineError::Collision(report)) = &e {
                eprintln!("{}", serde_json::to_string(report).unwrap_or_default());
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
