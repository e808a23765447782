//! `groundlab`: synthesize data, train, evaluate and report.

mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use groundlab_core::experiment::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "groundlab", version, about = "Synthetic visual-grounding laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the base train and test splits.
    Synth(Common),
    /// Generate the relation-sensitive augmented pool.
    Augment(Common),
    /// Train one model per seed in `train.seeds`.
    Train(Common),
    /// Evaluate every trained run on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also write per-sample IoUs as JSONL.
        #[arg(long)]
        dump_iou: bool,
    },
    /// Run the baseline/+aug/+prior/+both grid over `train.seeds`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Also run the full method for each of these pool sizes
        /// (images per category), first seed only.
        #[arg(long, value_delimiter = ',')]
        sweep_images: Vec<usize>,
    },
    /// Merge ablation and evaluation outputs into tables and plot CSVs.
    Report(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    use_prior: bool,
    #[arg(long)]
    use_aug: bool,
    #[arg(long)]
    images_per_category: Option<usize>,
    #[arg(long)]
    mix_ratio: Option<f64>,
    /// Worker threads for data generation, training and evaluation.
    #[arg(long)]
    jobs: Option<usize>,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1.
    Config(String),
    /// Exit 2.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Resolved settings shared by every command.
pub struct Ctx {
    pub command: &'static str,
    pub config: ExperimentConfig,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Common {
    fn resolve(&self, command: &'static str) -> CliResult<Ctx> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if self.use_prior {
            config.train.use_prior = true;
        }
        if self.use_aug {
            config.train.use_aug = true;
        }
        if let Some(n) = self.images_per_category {
            config.data.augment.images_per_category = n;
        }
        if let Some(r) = self.mix_ratio {
            config.train.mix_ratio = r;
        }
        config
            .validate()
            .map_err(|e| Failure::Config(e.to_string()))?;
        let jobs = match self.jobs {
            Some(0) => return Err(Failure::Config("--jobs must be at least 1".into())),
            Some(j) => j,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(Ctx {
            command,
            config,
            config_path: self.config.clone(),
            out: self.out.clone(),
            jobs,
        })
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(c) => commands::synth(&c.resolve("synth")?),
        Command::Augment(c) => commands::augment(&c.resolve("augment")?),
        Command::Train(c) => commands::train(&c.resolve("train")?),
        Command::Eval { common, dump_iou } => commands::eval(&common.resolve("eval")?, dump_iou),
        Command::Ablate {
            common,
            sweep_images,
        } => commands::ablate(&common.resolve("ablate")?, &sweep_images),
        Command::Report(c) => report::report(&c.resolve("report")?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = one_line(&e.render().to_string());
            eprintln!(
                "{}",
                serde_json::json!({ "error": "config", "message": format!("{msg}: {detail}") })
            );
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("{}", serde_json::json!({ "error": "config", "message": one_line(&m) }));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": "runtime", "message": one_line(&format!("{e:#}")) })
            );
            ExitCode::from(2)
        }
    }
}
