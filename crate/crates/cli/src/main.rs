//! `adaptnet`: run transfer experiments, average learning curves, evaluate
//! checkpoints.

use std::path::PathBuf;
use std::process::ExitCode;

use adaptnet::data::{self, DatasetId};
use adaptnet::harness::{self, CellStatus, ExperimentConfig, Preset, PADDING_NOTE};
use adaptnet::model::load_checkpoint;
use adaptnet::Task;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adaptnet",
    version,
    about = "Representation-transfer experiments with CNNs and convolutional autoencoders"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train source models and every adapted target model, writing curves and checkpoints.
    Run(RunArgs),
    /// Average a per-run metrics CSV over runs.
    Average { input: PathBuf, output: PathBuf },
    /// Evaluate a checkpoint on the test items of its domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: DatasetId,
        /// Dataset directory; defaults to $ADAPTNET_DATA/<dataset>.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// CL or AE; defaults to the checkpoint's own task.
        #[arg(long)]
        task: Option<Task>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetId>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    dropout_p: Option<f64>,
    #[arg(long)]
    l2_lambda: Option<f64>,
    #[arg(long)]
    sparsity_coeff: Option<f64>,
    #[arg(long)]
    sparsity_target: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha_mt: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    prf_lambda: Option<f64>,
    /// Any configuration key, e.g. `--set strategies=RESET,REUSE_CF`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> adaptnet::Result<ExperimentConfig> {
        let mut text = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| {
                adaptnet::Error::Config(format!("cannot read {}: {e}", path.display()))
            })?,
            None => String::new(),
        };
        // Later lines win, so flags override the file.
        if let Some(d) = self.dataset {
            text.push_str(&format!("\ndataset = {d}"));
        }
        if let Some(p) = self.preset {
            text.push_str(&format!("\npreset = {p}"));
        }
        let mut overrides: Vec<(String, String)> = Vec::new();
        let mut add = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        add(
            "data_dir",
            self.data_dir.as_ref().map(|p| p.display().to_string()),
        );
        add("out", self.out.as_ref().map(|p| p.display().to_string()));
        add("runs", self.runs.map(|v| v.to_string()));
        add("seed", self.seed.map(|v| v.to_string()));
        add("learning_rate", self.learning_rate.map(|v| v.to_string()));
        add("momentum", self.momentum.map(|v| v.to_string()));
        add("dropout_p", self.dropout_p.map(|v| v.to_string()));
        add("l2_lambda", self.l2_lambda.map(|v| v.to_string()));
        add("sparsity_coeff", self.sparsity_coeff.map(|v| v.to_string()));
        add(
            "sparsity_target",
            self.sparsity_target.map(|v| v.to_string()),
        );
        add("batch_size", self.batch_size.map(|v| v.to_string()));
        add("alpha_mt", self.alpha_mt.map(|v| v.to_string()));
        add("max_epochs", self.max_epochs.map(|v| v.to_string()));
        add("patience", self.patience.map(|v| v.to_string()));
        add("prf_lambda", self.prf_lambda.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                adaptnet::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`"))
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, v) in overrides {
            text.push_str(&format!("\n{k} = {v}"));
        }
        ExperimentConfig::parse(&text)
    }
}

fn run(cli: Cli) -> adaptnet::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let config = args.config()?;
            let report = harness::run_experiment(&config)?;
            for cell in &report.cells {
                if let CellStatus::Failed(e) = &cell.status {
                    eprintln!("cell {} failed: {e}", cell.name);
                }
            }
            let failed = report.failures().len();
            println!(
                "{} cells ({} failed); results in {}",
                report.cells.len(),
                failed,
                report.out_dir.display()
            );
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Average { input, output } => {
            let records = harness::read_csv_file(&input)?;
            let averaged = harness::average_runs(&records)?;
            let bytes = harness::to_csv_bytes(&averaged, &[PADDING_NOTE])?;
            std::fs::write(&output, bytes).map_err(|e| {
                adaptnet::Error::Config(format!("cannot write {}: {e}", output.display()))
            })?;
            println!(
                "{} averaged records written to {}",
                averaged.len(),
                output.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            dataset,
            data_dir,
            task,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut config = ExperimentConfig::preset(dataset, Preset::Paper);
            config.data_dir = data_dir;
            let ds = data::load(dataset, &config.resolve_data_dir()?)?;
            let task = task.unwrap_or(ckpt.spec.task);
            let m = harness::evaluate_checkpoint(&ckpt, &ds, task)?;
            println!("loss {}", m.loss);
            if let Some(a) = m.accuracy {
                println!("accuracy {a}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
