//! `braidsim` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use braidsim::experiment::{load_config, run_experiment, PresetLibrary};
use braidsim::Error;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "braidsim",
    version,
    about = "Braiding and charge experiments on Hofstadter lattices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        /// Config file; `{"preset": "fig5"}` runs a named preset.
        config: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra directory of `<name>.json` presets.
        #[arg(long)]
        preset_dir: Option<PathBuf>,
    },
    /// List the available presets.
    ListPresets {
        #[arg(long)]
        preset_dir: Option<PathBuf>,
    },
}

fn library(dir: Option<&Path>) -> Result<PresetLibrary, Error> {
    match dir {
        Some(d) => PresetLibrary::with_dir(d),
        None => Ok(PresetLibrary::builtin()),
    }
}

fn run(config: &Path, jobs: Option<usize>, out: Option<PathBuf>, preset_dir: Option<&Path>) -> Result<(), Error> {
    let presets = library(preset_dir)?;
    let text =
        std::fs::read_to_string(config).map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let cfg = load_config(&text, &presets)?;
    if jobs == Some(0) {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment_id()));
    log::info!("running `{}` into {}", cfg.experiment_id(), dir.display());
    let output = braidsim::parallel::with_threads(jobs, || run_experiment(&cfg)).map_err(Error::Config)??;
    for path in output.write(&dir)? {
        println!("{}", path.display());
    }
    let d = &output.diagnostics;
    if d.unreliable_rows > 0 {
        log::warn!("{} rows have a step phase beyond π/2", d.unreliable_rows);
    }
    if d.exchange_outside_tolerance > 0 {
        log::warn!(
            "{} exchange phases are outside the tolerance around π",
            d.exchange_outside_tolerance
        );
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_tracking_failure() {
        3
    } else if matches!(err.root(), Error::Config(_)) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            jobs,
            out,
            preset_dir,
        } => run(&config, jobs, out, preset_dir.as_deref()),
        Command::ListPresets { preset_dir } => library(preset_dir.as_deref()).map(|lib| {
            for (name, source, description) in lib.listing() {
                println!("{name:<8} {description} [{source}]");
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if let Some(step) = err.step() {
                eprintln!("tracking failed at step {step}; more path steps or a stronger pin may help");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
