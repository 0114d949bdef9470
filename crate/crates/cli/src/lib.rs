//! File-based pipelines around the `raymap` library: synthesize scenes,
//! cluster rays, train sensor parameters and evaluate predictions. Every run
//! writes a `manifest.json` that `replay` re-executes.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::args::{Cli, Command, ReplayArgs};
use crate::error::CliError;
use crate::formats::{pretty, read_json, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    /// Base for the relative paths in `args`.
    pub cwd: PathBuf,
    /// Effective configuration with defaults filled in.
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub code_version: String,
    pub wall_clock_s: f64,
    pub exit_status: u8,
}

/// Parse and run; returns the process exit status.
pub fn run<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once("raymap".to_string()).chain(args.clone())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    let cwd = std::env::current_dir().unwrap_or_default();
    match execute(cli.command, args, cwd, None) {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_status()
        }
    }
}

/// Run one command and write its manifest. `snapshot` replaces the
/// configuration file when replaying.
pub fn execute(
    command: Command,
    args: Vec<String>,
    cwd: PathBuf,
    snapshot: Option<&Value>,
) -> Result<u8, CliError> {
    let started = Instant::now();
    let record = match &command {
        Command::Cluster(a) => commands::cluster(a, snapshot)?,
        Command::Train(a) => commands::train_cmd(a, snapshot)?,
        Command::Eval(a) => commands::eval_cmd(a)?,
        Command::Synth(a) => commands::synth_cmd(a, snapshot)?,
        Command::Replay(a) => return replay(a),
    };
    let manifest = RunManifest {
        command: command.name().to_string(),
        args,
        cwd,
        config: record.config,
        seed: record.seed,
        inputs: record.inputs,
        outputs: record.outputs,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_s: started.elapsed().as_secs_f64(),
        exit_status: record.status,
    };
    write_atomic(&record.out_dir.join(MANIFEST_FILE), &pretty(&manifest))?;
    Ok(record.status)
}

fn replay(a: &ReplayArgs) -> Result<u8, CliError> {
    let manifest: RunManifest = read_json(&a.manifest)?;
    let parsed = Cli::try_parse_from(std::iter::once("raymap".to_string()).chain(manifest.args.clone()))
        .map_err(|e| CliError::input(&a.manifest, format!("recorded arguments: {e}")))?;
    let mut command = parsed.command;
    if matches!(command, Command::Replay(_)) {
        return Err(CliError::input(&a.manifest, "a replay manifest cannot be replayed"));
    }
    command.absolutize(&manifest.cwd);
    if let (Some(out), Some(dir)) = (&a.out, command.out_dir_mut()) {
        *dir = out.clone();
    }
    let snapshot = (!manifest.config.is_null()).then_some(&manifest.config);
    execute(command, manifest.args.clone(), manifest.cwd.clone(), snapshot)
}
