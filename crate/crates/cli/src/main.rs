use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use confed::experiment::{self, ExperimentConfig, ExperimentError, Preset};

#[derive(Parser, Debug)]
#[command(name = "confed", version, about = "Confederated learning simulations on a synthetic claims cohort")]
struct Cli {
    /// TOML experiment config. Keys left out take the desk defaults.
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Run seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    PaperScale,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic cohort and its summary statistics.
    Generate,
    /// Train and evaluate the configured methods on every disease.
    Run,
    /// Repeat the central-only and confederated runs for each sweep region.
    Sweep,
    /// Consolidate a finished run directory into one report.
    Report {
        /// Run directory (default: --out or the config's output_dir).
        dir: Option<PathBuf>,
    },
}

const EXIT_AUDIT: u8 = 3;

fn resolve(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(PresetArg::PaperScale)) => Preset::PaperScale.config(),
        (None, _) => Preset::Desk.config(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<ExitCode, ExperimentError> {
    match &cli.command {
        Command::Report { dir } => {
            let dir = match (dir, &cli.out) {
                (Some(d), _) | (None, Some(d)) => d.clone(),
                (None, None) => resolve(cli)?.output_dir,
            };
            let outcome = experiment::cmd_report(&dir)?;
            print!("{}", outcome.text);
            if !outcome.passed() {
                eprintln!("isolation audit failed: rule {}", outcome.audit_failures.join(", rule "));
                return Ok(ExitCode::from(EXIT_AUDIT));
            }
        }
        Command::Generate => {
            let cfg = resolve(cli)?;
            let outcome = experiment::cmd_generate(&cfg, &cfg.output_dir)?;
            print!("{}", outcome.summary);
            eprintln!("wrote {}", cfg.output_dir.display());
        }
        Command::Run => {
            let cfg = resolve(cli)?;
            let result = experiment::cmd_run(&cfg, &cfg.output_dir)?;
            print!("{}", result.summary());
            print!("{}", result.audit.to_text());
            eprintln!("wrote {}", cfg.output_dir.display());
        }
        Command::Sweep => {
            let cfg = resolve(cli)?;
            let result = experiment::cmd_sweep(&cfg, &cfg.output_dir)?;
            print!("{}", experiment::sweep_csv(&result.rows));
            for s in &result.skipped {
                eprintln!("skipped region {}: {}", s.region, s.reason);
            }
            eprintln!("wrote {}", cfg.output_dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
