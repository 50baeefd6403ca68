use std::path::{Path, PathBuf};
use std::process::ExitCode;

use circtat_cli::commands::{self, Level};
use circtat_cli::config::ExperimentConfig;
use circtat_cli::CliError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "circtat", version, about = "Thermoacoustic tomography with circular integrating detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (defaults to all cores); results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed, overriding `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ring-averaged data and write the sinogram.
    Forward(Common),
    /// Reconstruct the initial pressure from a sinogram.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Sinogram written by `forward`.
        #[arg(long)]
        sinogram: PathBuf,
    },
    /// Classify the phantom's edge covectors as visible, masked or outside the aperture.
    Visibility(Common),
    /// Cylinder-equation residual study under grid refinement.
    Sweep(Common),
    /// Built-in consistency checks.
    Selftest {
        #[arg(long, value_enum, default_value = "quick")]
        level: LevelArg,
        #[arg(long, hide = true)]
        break_adjoint: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Quick,
    Full,
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf, u64), CliError> {
    let cfg = ExperimentConfig::load(&c.config)?;
    let out = c.out.clone().unwrap_or_else(|| resolve(&c.config, &cfg.output));
    let seed = c.seed.unwrap_or(cfg.seed);
    Ok((cfg, out, seed))
}

/// Relative output paths in a config are taken relative to the config file.
fn resolve(config: &Path, out: &Path) -> PathBuf {
    match config.parent() {
        Some(dir) if out.is_relative() => dir.join(out),
        _ => out.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::Forward(c) => {
            let (cfg, out, seed) = load(&c)?;
            commands::forward(&cfg, &out, seed)
        }
        Command::Reconstruct { common, sinogram } => {
            let (cfg, out, seed) = load(&common)?;
            commands::reconstruct(&cfg, &sinogram, &out, seed)
        }
        Command::Visibility(c) => {
            let (cfg, out, _) = load(&c)?;
            commands::visibility(&cfg, &out)
        }
        Command::Sweep(c) => {
            let (cfg, out, _) = load(&c)?;
            commands::sweep(&cfg, &out)
        }
        Command::Selftest { level, break_adjoint } => {
            let level = match level {
                LevelArg::Quick => Level::Quick,
                LevelArg::Full => Level::Full,
            };
            let results = commands::selftest(level, break_adjoint);
            let failed = results.iter().filter(|r| !r.pass).count();
            for r in &results {
                println!("{r}");
            }
            if failed > 0 {
                return Err(CliError::Check(format!("{failed} of {} checks failed", results.len())));
            }
            Ok(vec![format!("all {} checks passed", results.len())])
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(lines) => {
            lines.iter().for_each(|l| println!("{l}"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
