use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eoslab::harness;

#[derive(Parser)]
#[command(name = "eoslab", version, about = "Empty-output experiments on a toy translation task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test corpora and the length-model table.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a corpus file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
        corpus: PathBuf,
    },
    /// Decode a test corpus and write metrics.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Beam size; repeat for several. Defaults to the config's list.
        #[arg(long = "beam")]
        beams: Vec<usize>,
        /// Also write per-step search traces.
        #[arg(long)]
        trace: bool,
        checkpoint: PathBuf,
        test: PathBuf,
    },
    /// Keep the most frequent target lengths per source length.
    Filter {
        #[arg(long)]
        keep_fraction: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        corpus: PathBuf,
    },
    /// Merge metrics CSVs and print them as a table.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> eoslab::Result<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let o = harness::cmd_gen(&config, out.as_deref())?;
            println!("{}\n{}\n{}", o.train.display(), o.test.display(), o.length_model.display());
        }
        Command::Train {
            config,
            out,
            resume,
            corpus,
        } => {
            let o = harness::cmd_train(&config, &corpus, out.as_deref(), resume.as_deref())?;
            println!("{} (run {})", o.checkpoint.display(), o.info.run_id);
        }
        Command::Eval {
            config,
            out,
            beams,
            trace,
            checkpoint,
            test,
        } => {
            let o = harness::cmd_eval(&config, &checkpoint, &test, &beams, out.as_deref(), trace)?;
            println!("{}", o.metrics_csv.display());
        }
        Command::Filter {
            keep_fraction,
            out,
            corpus,
        } => {
            let path = harness::cmd_filter(&corpus, keep_fraction, out.as_deref())?;
            println!("{}", path.display());
        }
        Command::Report { out, metrics } => {
            print!("{}", harness::cmd_report(&metrics, out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
