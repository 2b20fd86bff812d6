use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cornet_cli::{commands, CliError};

#[derive(Parser)]
#[command(name = "cornet", version, about = "Co-occurrence relation network for multi-label action localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON run config; writes log.csv and per-epoch checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the validation split with a checkpoint's prediction branch.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write the summed ground-truth co-occurrence matrix as CSV.
    Cooc {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { spec, out } => {
            let manifest = commands::synth(&spec, &out)?;
            println!(
                "wrote {} files ({} train / {} val videos) to {}",
                manifest.files.len(),
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                out.display()
            );
        }
        Command::Train { config, out } => {
            let result = commands::train(&config, &out)?;
            for r in &result.outcome.records {
                let map = r.val_map.map_or_else(|| "n/a".to_string(), |m| format!("{m:.4}"));
                println!(
                    "epoch {:>3}  bce {:.5}  mse {:.3}  total {:.5}  val_map {map}",
                    r.epoch, r.bce, r.mse, r.total
                );
            }
            match result.best_checkpoint {
                Some(path) => println!("best checkpoint: {}", path.display()),
                None => println!("best checkpoint: none (no validation mAP)"),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            report,
        } => {
            let r = commands::eval(&checkpoint, &data, &report)?;
            println!("mAP {:.4} over {} frames; report written to {}", r.map, r.frames, report.display());
        }
        Command::Cooc {
            annotations,
            vocab,
            out,
        } => {
            let m = commands::cooc(&annotations, &vocab, &out)?;
            println!("wrote {0}x{0} matrix to {1}", m.n(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
