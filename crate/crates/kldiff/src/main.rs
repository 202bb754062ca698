use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kldiff::commands::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_sample, cmd_train};
use kldiff::dataset::{ablation_csv, metrics_csv};
use kldiff::Error;
use kldiff_core::trainer::AblationMode;

/// Exit status for command-line usage errors.
const USAGE_CODE: u8 = 2;

#[derive(Parser)]
#[command(name = "kldiff", version, about = "Train, sample and evaluate a text-conditioned diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a captioned-shapes dataset CSV.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch; writes the checkpoint and `<out>.history.csv`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation applied on top of the config: full, no_llm, no_kl or neither.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AblationMode>,
    },
    /// Write `n` samples for one caption as PPM files in the `out` directory.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a dataset and print one metrics CSV row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Number of generated samples (defaults to metrics.n_gen).
        #[arg(long)]
        n: Option<usize>,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score all four ablation modes.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the dataset the config and seed describe.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    AblationMode::parse(s).ok_or_else(|| format!("unknown mode {s:?}; expected full, no_llm, no_kl or neither"))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let n = cmd_gen_data(config.as_deref(), seed, &out)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Train {
            config,
            dataset,
            out,
            seed,
            mode,
        } => {
            let ckpt = cmd_train(config.as_deref(), &dataset, &out, seed, mode)?;
            if let Some(last) = ckpt.state.history.last() {
                println!("epoch {} mean_loss {}", last.epoch, last.mean_loss);
            }
            println!("wrote {}", out.display());
        }
        Command::Sample {
            checkpoint,
            caption,
            n,
            seed,
            out,
        } => {
            for p in cmd_sample(&checkpoint, &caption, n, seed, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            seed,
            n,
            out,
        } => {
            let report = cmd_eval(&checkpoint, &dataset, seed, n)?;
            let csv = metrics_csv(&[report]);
            print!("{csv}");
            if let Some(p) = out {
                std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
            }
        }
        Command::Ablate {
            config,
            dataset,
            seed,
            out,
        } => {
            let reports = cmd_ablate(config.as_deref(), dataset.as_deref(), seed, &out)?;
            print!("{}", ablation_csv(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("error kind=usage code={USAGE_CODE} msg={first:?}");
            return ExitCode::from(USAGE_CODE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report_line());
            ExitCode::from(e.exit_code())
        }
    }
}
