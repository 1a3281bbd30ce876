use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hjb_split::harness::{run_experiment, ExperimentConfig, ExperimentId, RunOptions};

/// Operator-splitting and PI-λ experiments for viscous Hamilton–Jacobi–Bellman equations.
///
/// Any configuration leaf can be overridden with `--section.key=value`,
/// e.g. `--pi_lambda.adam_steps=200` or `--sweep.mu=[0.4]`.
#[derive(Parser, Debug)]
#[command(name = "hjb-split", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        /// table1, table2, table3, pi-convergence, splitting-rate-1d,
        /// splitting-rate-l1-torus or oracle-suite.
        experiment: String,
        #[command(flatten)]
        common: Common,
        /// Also write SVG plots.
        #[arg(long)]
        plots: bool,
    },
    /// Run the closed-form and brute-force oracle checks.
    OracleSuite {
        #[command(flatten)]
        common: Common,
    },
    /// Resolve and validate a configuration, then print the snapshot.
    ValidateConfig {
        /// Experiment to resolve when the file does not name one.
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// List the experiment ids.
    List,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML configuration file merged over the experiment preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `output` from the config, else `runs/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweep cells (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
}

/// Splits `--section.key=value` arguments off before clap sees them.
fn split_overrides(args: impl Iterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(body) if body.split('=').next().is_some_and(|k| k.contains('.')) && body.contains('=') => overrides.push(body.to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn resolve(experiment: Option<&str>, file: Option<&PathBuf>, seed: Option<u64>, mut overrides: Vec<String>) -> Result<ExperimentConfig> {
    let id = experiment.map(str::parse::<ExperimentId>).transpose()?;
    let text = file
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(ExperimentConfig::resolve(id, text.as_deref(), &overrides)?)
}

fn execute(cfg: ExperimentConfig, common: &Common, plots: bool) -> Result<ExitCode> {
    let out_dir = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.experiment.name()));
    let opts = RunOptions {
        out_dir: out_dir.clone(),
        plots,
        workers: common.workers,
    };
    match run_experiment(&cfg, &opts) {
        Ok(report) => {
            for line in report.summary_lines() {
                println!("{line}");
            }
            println!("artifacts in {}", out_dir.display());
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Err(e) => {
            std::fs::create_dir_all(&out_dir).ok();
            let bundle = format!("experiment {}\nerror: {e}\n{e:?}\n", cfg.experiment);
            let path = out_dir.join("error.txt");
            std::fs::write(&path, bundle).ok();
            eprintln!("error: {e} (details in {})", path.display());
            Ok(ExitCode::from(2))
        }
    }
}

fn main() -> Result<ExitCode> {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    match cli.command {
        Command::Run { experiment, common, plots } => {
            let cfg = resolve(Some(&experiment), common.config.as_ref(), common.seed, overrides)?;
            execute(cfg, &common, plots)
        }
        Command::OracleSuite { common } => {
            let cfg = resolve(
                Some(ExperimentId::OracleSuite.name()),
                common.config.as_ref(),
                common.seed,
                overrides,
            )?;
            execute(cfg, &common, false)
        }
        Command::ValidateConfig { experiment, config } => {
            let cfg = resolve(experiment.as_deref(), config.as_ref(), None, overrides)?;
            print!("{}", cfg.snapshot()?);
            Ok(ExitCode::SUCCESS)
        }
        Command::List => {
            for id in ExperimentId::ALL {
                println!("{id}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split_from_flags() {
        let args = [
            "hjb-split",
            "run",
            "table2",
            "--pi_lambda.mu=0.3",
            "--seed",
            "4",
            "--out=x",
            "--sweep.n=[12]",
        ];
        let (rest, o) = split_overrides(args.iter().map(|s| s.to_string()));
        assert_eq!(rest, vec!["hjb-split", "run", "table2", "--seed", "4", "--out=x"]);
        assert_eq!(o, vec!["pi_lambda.mu=0.3", "sweep.n=[12]"]);
    }

    #[test]
    fn cli_parses() {
        Cli::try_parse_from(["hjb-split", "run", "table2", "--plots", "--seed", "3"]).unwrap();
        Cli::try_parse_from(["hjb-split", "validate-config", "--config", "a.toml"]).unwrap();
        Cli::try_parse_from(["hjb-split", "oracle-suite", "--out", "o"]).unwrap();
    }
}
