use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iia_cli::config::{load_config, ExperimentConfig, SweepConfig};
use iia_cli::{cmd_eval, cmd_gen, cmd_plot, cmd_sweep, cmd_train, out_root, CliError};

#[derive(Parser)]
#[command(name = "iia", version, about = "Independent innovation analysis workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set method=gcl --set N=16384`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate dataset bundles (x.csv, s.csv, u.csv, truth.json).
    Gen(ConfigArgs),
    /// Train a method on a bundle (`--set data=DIR`).
    Train(ConfigArgs),
    /// Score a model on a bundle and append to results.csv.
    Eval(ConfigArgs),
    /// Run a grid of experiments and chart mean MCC against N.
    Sweep(ConfigArgs),
    /// Redraw charts from a results.csv.
    Plot {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let root = out_root();
    match cli.command {
        Command::Gen(a) => {
            let cfg: ExperimentConfig = load_config(a.config.as_deref(), &a.sets)?;
            for (dir, v) in cmd_gen(&cfg, &root)? {
                println!(
                    "{}: variability rank {}/{} (smallest singular value {:.3e}) {}",
                    dir.display(),
                    v.rank,
                    v.l_matrix.rows(),
                    v.smallest_singular_value,
                    if v.pass { "pass" } else { "FAIL" }
                );
            }
        }
        Command::Train(a) => {
            let cfg: ExperimentConfig = load_config(a.config.as_deref(), &a.sets)?;
            for dir in cmd_train(&cfg, &root)? {
                println!("{}", dir.display());
            }
        }
        Command::Eval(a) => {
            let cfg: ExperimentConfig = load_config(a.config.as_deref(), &a.sets)?;
            let row = cmd_eval(&cfg, &root)?;
            match row.mcc {
                Some(m) => println!("{} mcc={m:.4}", row.method),
                None => println!("{} mcc= (no true innovations)", row.method),
            }
        }
        Command::Sweep(a) => {
            let cfg: SweepConfig = load_config(a.config.as_deref(), &a.sets)?;
            let (dir, rows) = cmd_sweep(&cfg, &root)?;
            let failed = rows.iter().filter(|r| !r.is_ok()).count();
            println!("{} runs ({failed} failed) -> {}", rows.len(), dir.display());
        }
        Command::Plot { results, out } => {
            let results = results.unwrap_or_else(|| root.join("results.csv"));
            let out = out.unwrap_or_else(|| root.clone());
            for p in cmd_plot(&results, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
