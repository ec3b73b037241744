use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use klab::experiments::results::write_records;
use klab::experiments::{run_command, Command, Config, Overrides};

const EXIT_ERROR: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "klab", version, about = "Kernelized attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key=value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Results file, one JSON record per line; `-` writes to standard output.
    #[arg(long, default_value = "-")]
    out: String,
    /// Overrides the config seed and KLAB_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Feature-map estimates against the Gaussian kernel.
    KernelCheck(Common),
    /// Closed-form estimator MSEs against Monte Carlo.
    VerifyMse(Common),
    /// Train on the synthetic sparsity task.
    TrainSynthetic(Common),
    /// Classifier-gradient spread across frequency redraws.
    GradStats(Common),
    /// Time and memory scaling of attention with sequence length.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Eigenvalues of learnt mixture covariances in a checkpoint.
    Eigvals(Common),
}

fn split(cmd: Cmd) -> (Command, Common, Option<Vec<usize>>) {
    match cmd {
        Cmd::KernelCheck(c) => (Command::KernelCheck, c, None),
        Cmd::VerifyMse(c) => (Command::VerifyMse, c, None),
        Cmd::TrainSynthetic(c) => (Command::TrainSynthetic, c, None),
        Cmd::GradStats(c) => (Command::GradStats, c, None),
        Cmd::Bench { common, lengths } => (Command::Bench, common, lengths),
        Cmd::Eigvals(c) => (Command::Eigvals, c, None),
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    let (command, common, lengths) = split(cli.command);
    let cfg = Config::load(&common.config).map_err(|e| e.to_string())?;
    let overrides = Overrides {
        seed: common.seed,
        lengths,
    };
    let output = run_command(command, &cfg, &overrides).map_err(|e| e.to_string())?;
    let mut sink: Box<dyn Write> = if common.out == "-" {
        Box::new(io::stdout().lock())
    } else {
        let file = File::create(&common.out).map_err(|e| format!("{}: {e}", common.out))?;
        Box::new(BufWriter::new(file))
    };
    write_records(&mut sink, &output.records).map_err(|e| e.to_string())?;
    eprintln!("{}", output.summary);
    Ok(output.passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("klab: acceptance checks failed");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(msg) => {
            eprintln!("klab: error: {msg}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
