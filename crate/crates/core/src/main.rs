use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toothscan::harness::config::TrainConfig;
use toothscan::harness::pipeline::{cmd_eval, cmd_filter_labels, cmd_infer, cmd_synth, cmd_train_detect, cmd_train_hena};
use toothscan::Result;

#[derive(Parser)]
#[command(name = "toothscan", version, about = "Tooth detection and per-tooth lesion analysis on synthetic panoramic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the `seed` key of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curate candidate boxes against a reference dataset's box statistics.
    FilterLabels {
        #[command(flatten)]
        common: Common,
        /// Reference dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Candidate boxes (`boxes.jsonl` format with confidences).
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tail probability of the Mahalanobis gate.
        #[arg(long, default_value_t = 0.001)]
        p: f64,
    },
    /// Train the tooth detector.
    TrainDetect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three-stage multi-task protocol on ground-truth tooth crops.
    TrainHena {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// mAP of a prediction box file against a ground-truth box file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Detect, crop, segment and re-align masks for one PGM image.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Detector checkpoint directory.
        #[arg(long)]
        detector: PathBuf,
        /// Multi-task checkpoint directory.
        #[arg(long)]
        hena: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut emit = |line: &str| -> Result<()> {
        let mut out = stdout.lock();
        writeln!(out, "{line}")?;
        out.flush()?;
        Ok(())
    };
    match cli.command {
        Command::Synth { common, out } => cmd_synth(&common.load()?, &out, &mut emit),
        Command::FilterLabels { common, data, candidates, out, p } => {
            common.load()?;
            cmd_filter_labels(&data, &candidates, &out, p, &mut emit)
        }
        Command::TrainDetect { common, data, out } => cmd_train_detect(&common.load()?, &data, &out, &mut emit),
        Command::TrainHena { common, data, out } => cmd_train_hena(&common.load()?, &data, &out, &mut emit),
        Command::Eval { common, pred, gt } => {
            common.load()?;
            cmd_eval(&pred, &gt, &mut emit)
        }
        Command::Infer { common, detector, hena, image, out } => {
            cmd_infer(&common.load()?, &detector, &hena, &image, &out, &mut emit)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 and usage text on unknown flags
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
