//! `pseudoheal`: phantom data, training, evaluation, sweeps and rating-study tooling.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pseudoheal::Error;

#[derive(Parser)]
#[command(name = "pseudoheal", version, about = "Pseudo-healthy synthesis by pathology disentanglement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read the experiment document.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Experiment JSON; built-in desk defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the document (phantom, training, evaluation networks).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    Phantom {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Crop a dataset to the configured size, check splits and write histogram checks.
    Prepare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model into a run directory (resumes an interrupted run).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Score a trained model on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Method name in the report; defaults to the run directory name.
        #[arg(long)]
        method: Option<String>,
    },
    /// Train and score one model per ratio of paired samples.
    SweepSemi {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])]
        ratios: Vec<f64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Train and score the proposed model, its ablations and the baselines.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Subset of variants; all when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Render blinded rating panels from trained runs.
    Panels {
        #[arg(long)]
        data: PathBuf,
        /// `method=RUNDIR`, repeated once per method.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Where the blinding map goes; must be outside `--out`.
        #[arg(long)]
        blinding: PathBuf,
        /// Number of panels (test slices with lesions).
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ingest rater scores and write per-method statistics.
    Scores {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        blinding: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional real-versus-fake calls; writes `realness.csv` next to `--out`.
        #[arg(long)]
        realness: Option<PathBuf>,
        /// Source name of the real healthy images in `--realness`.
        #[arg(long, default_value = "real")]
        benchmark: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Join metric reports into one summary table.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status for each error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom { cfg, out } => commands::phantom(&cfg, out),
        Command::Prepare { cfg, data, out } => commands::prepare(&cfg, data, &out),
        Command::Train { cfg, data, out, quiet } => commands::train(&cfg, data, &out, !quiet),
        Command::Eval {
            cfg,
            bundle,
            data,
            report,
            method,
        } => commands::eval(&cfg, &bundle, data, &report, method),
        Command::SweepSemi {
            cfg,
            data,
            out,
            ratios,
            quiet,
        } => commands::sweep_semi(&cfg, data, out, &ratios, !quiet),
        Command::Ablate {
            cfg,
            data,
            out,
            variants,
            quiet,
        } => commands::ablate(&cfg, data, out, &variants, !quiet),
        Command::Panels {
            data,
            runs,
            out,
            blinding,
            count,
            seed,
        } => commands::panels(&data, &runs, &out, &blinding, count, seed),
        Command::Scores {
            scores,
            blinding,
            out,
            realness,
            benchmark,
            seed,
        } => commands::scores(&scores, &blinding, &out, realness.as_deref(), &benchmark, seed),
        Command::Report { inputs, out } => commands::report(&inputs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
