use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctdg_cli::{run, Command, Invocation};

#[derive(Parser)]
#[command(name = "ctdg", version, about = "Continuous-time dynamic graph experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen(Common),
    /// Train over one or more seeds.
    Train(Common),
    /// Score saved or freshly initialized parameters.
    Eval(Common),
    /// Check the flow bounds on random trials.
    VerifyBounds(Common),
    /// Hop-bucketed displacement per layer count.
    FlowProfile(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to run (train and eval only).
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("CTDG_FLOW_THREADS") {
        let n = match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: CTDG_FLOW_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let (cmd, c) = match cli.command {
        Cmd::Gen(c) => (Command::Gen, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::VerifyBounds(c) => (Command::VerifyBounds, c),
        Cmd::FlowProfile(c) => (Command::FlowProfile, c),
    };
    let inv = Invocation {
        config: c.config,
        out: c.out,
        seed: c.seed,
        seeds: c.seeds,
    };
    match run(cmd, &inv) {
        Ok(s) => {
            println!("{}: {} ({} files in {})", cmd.as_str(), s.message, s.outputs.len(), s.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
