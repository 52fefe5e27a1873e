//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedmrl::config::{parse_config, Algo};
use fedmrl::report;
use fedmrl::Error;

#[derive(Parser)]
#[command(name = "fedmrl", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, summary.json and manifest.json.
    Run {
        /// TOML config file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        algo: Option<Algo>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write the two-client fairness landscape as CSV.
    Landscape {
        #[arg(long)]
        total: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "landscape.csv")]
        out: PathBuf,
    },
    /// Run several algorithms over several seeds and tabulate the results.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "fedavg,fedprox,fednova,fedmrl")]
        algos: Vec<Algo>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            algo,
            seed,
            out,
            mut set,
        } => {
            // Dedicated flags are shorthands for overrides and win over --set.
            set.extend(algo.map(|a| format!("algo={a}")));
            set.extend(seed.map(|s| format!("seed={s}")));
            let cfg = parse_config(config.as_deref(), &set)?;
            let run = report::run_to_dir(&cfg, &out)?;
            let last = run.records.last().expect("at least one round");
            println!(
                "{} seed {}: {} rounds, ACC {:.4}, F1 {:.4}, client loss variance {:.6}",
                cfg.algo,
                cfg.seed,
                run.records.len(),
                last.global_acc,
                last.f1(),
                last.loss_variance
            );
            println!("wrote {}", out.display());
        }
        Command::Landscape { total, n, out } => {
            report::emit_landscape(total, n, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            algos,
            seeds,
            config,
            out,
            set,
        } => {
            let base = parse_config(config.as_deref(), &set)?;
            let rows = report::sweep(&base, &algos, seeds, &out)?;
            print!("{}", report::comparison_table(&rows));
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
