use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gvae::commands::{cmd_ablate, cmd_common, cmd_eval, cmd_joint_train, cmd_sample, cmd_train, EvalOptions};
use gvae::config::TrainArgs;
use gvae::error::EXIT_USAGE;
use gvae::CliError;
use gvae_core::eval::ClassifierConfig;

#[derive(Parser)]
#[command(name = "gvae", version, about = "Train and inspect a conditional VAE that learns categories one at a time")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the labels one after another with self-replay
    Train(TrainArgs),
    /// Train one fixed-width model on all labels at once (baseline)
    JointTrain(TrainArgs),
    /// Report Acc and r-Acc for a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// directory holding the IDX files [default: data/<checkpoint dataset>]
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// metric records file (run id, metric, value per line)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        run_id: String,
        #[command(flatten)]
        metric: MetricArgs,
    },
    /// Write a grid of generated images for one category
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// category index (position in the training order)
        #[arg(long)]
        label: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render common content (zero condition) for one or more checkpoints
    Common {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Acc as replay is withheld for growing label prefixes while training the last label
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// prefix ends x (mask labels 0..=x), `none` for the unmasked run
        #[arg(long, default_value = "none,0,1,2,3,4,5,6,7,8")]
        extents: String,
        #[command(flatten)]
        metric: MetricArgs,
    },
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long, default_value_t = gvae_core::eval::DEFAULT_SAMPLES_PER_LABEL)]
    n_per_label: usize,
    #[arg(long, default_value_t = 0)]
    metric_seed: u64,
    #[arg(long, default_value_t = 10)]
    classifier_epochs: usize,
}

impl MetricArgs {
    fn options(&self, run_id: String, records: Option<PathBuf>) -> EvalOptions {
        EvalOptions {
            n_per_label: self.n_per_label,
            seed: self.metric_seed,
            classifier: ClassifierConfig { epochs: self.classifier_epochs, seed: self.metric_seed, ..Default::default() },
            run_id,
            records,
        }
    }
}

fn parse_extents(s: &str) -> Result<Vec<Option<usize>>, CliError> {
    s.split(',')
        .map(|p| match p.trim() {
            "none" => Ok(None),
            v => v.parse().map(Some).map_err(|_| CliError::usage(format!("bad extent `{v}`"))),
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = io::stdout();
    match cli.command {
        Command::Train(args) => {
            let s = args.resolve()?;
            let summary = cmd_train(&s, &mut out)?;
            println!("wrote {} checkpoints and {}", summary.checkpoints.len(), summary.final_checkpoint.display());
        }
        Command::JointTrain(args) => {
            let path = cmd_joint_train(&args.resolve()?, &mut out)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { checkpoint, data_dir, out: records, run_id, metric } => {
            let data_dir = match data_dir {
                Some(d) => d,
                None => PathBuf::from("data").join(gvae::Checkpoint::load(&checkpoint)?.dataset),
            };
            cmd_eval(&checkpoint, &data_dir, &metric.options(run_id, records), &mut out)?;
        }
        Command::Sample { checkpoint, label, n, seed, out: path } => {
            cmd_sample(&checkpoint, label, n, seed, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Common { checkpoints, n, seed, out: dir } => {
            for p in cmd_common(&checkpoints, n, seed, &dir)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Ablate { train, extents, metric } => {
            let s = train.resolve()?;
            cmd_ablate(&s, &parse_extents(&extents)?, &metric.options("ablate".into(), None), &mut out)?;
            println!("wrote {}", s.out.join("ablation.tsv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
