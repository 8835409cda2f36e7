use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use efn::cli::{self, CommonArgs};
use efn::Result;

/// Exponential family networks: train, look up, compare and decide.
#[derive(Parser)]
#[command(name = "efn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an EFN or a single-η NF run.
    Train(Common),
    /// Sample a trained EFN at one η without optimization.
    Lookup(Common),
    /// Evaluate an EFN against per-η NF runs.
    Compare(Common),
    /// Break-even dataset counts from EFN and NF training logs.
    Decide(Common),
    /// Write a synthetic spike-train corpus.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Run directory, overriding paths.run_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run(command: Command) -> Result<()> {
    let (Command::Train(c) | Command::Lookup(c) | Command::Compare(c) | Command::Decide(c) | Command::Simulate(c)) =
        &command;
    let cfg = cli::load_config(&CommonArgs {
        config: c.config.clone(),
        out: c.out.clone(),
        seed: c.seed,
    })?;
    match command {
        Command::Train(_) => {
            let out = cli::cmd_train(&cfg)?;
            println!("stopped: {:?}", out.stop);
            println!("checkpoint: {}", out.checkpoint.display());
            println!("log: {}", out.log.display());
            println!("metrics: {}", out.metrics.display());
        }
        Command::Lookup(_) => println!("samples: {}", cli::cmd_lookup(&cfg)?.display()),
        Command::Compare(_) => {
            let rows = cli::cmd_compare(&cfg)?;
            println!("compared {} η", rows.len() / 2);
            println!("results: {}", cfg.paths.run_dir.join("compare.csv").display());
        }
        Command::Decide(_) => {
            println!("{:>14} {:>12} {:>12} {:>8} {:>10}", "target", "T_efn_s", "t_nf_mean_s", "nf_frac", "n_star");
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            for r in cli::cmd_decide(&cfg)? {
                println!(
                    "{:>14.4} {:>12} {:>12} {:>8.2} {:>10}",
                    r.target,
                    fmt(r.t_efn_s),
                    fmt(r.t_nf_mean_s),
                    r.nf_reach_frac,
                    r.n_star
                );
            }
        }
        Command::Simulate(_) => {
            let files = cli::cmd_simulate(&cfg)?;
            println!("wrote {} datasets", files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
