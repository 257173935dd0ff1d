use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use mtbert::config::RunConfig;
use mtbert::report::MetricsReport;
use mtbert::runner::{self, Split};
use mtbert::task::TaskKind;
use mtbert::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "mtbert",
    version,
    about = "Train and evaluate a small multitask transformer encoder"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint and reports.
    Train(RunArgs),
    /// Score a saved checkpoint on a split.
    Eval(EvalArgs),
    /// Train once per value of one config key.
    Sweep(SweepArgs),
    /// Write a synthetic dataset as TSV.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// baseline, joint, slf or smart_alternating.
    #[arg(long)]
    strategy: Option<String>,
    /// Comma-separated task list, e.g. `sst,para`.
    #[arg(long)]
    tasks: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write traces.csv.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, dev or test.
    #[arg(long, default_value = "dev")]
    split: String,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Config key to vary.
    #[arg(long)]
    key: String,
    /// Comma-separated values of the key.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Destination file; defaults to `synth_{task}.tsv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn split_assignment(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {text:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for text in &self.set {
            let (k, v) = split_assignment(text)?;
            config.set(&k, &v)?;
        }
        let flags = [
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("train.seed", self.seed.map(|v| v.to_string())),
            ("train.batch_size", self.batch_size.map(|v| v.to_string())),
            ("optimizer.lr", self.lr.map(|v| v.to_string())),
            ("train.strategy", self.strategy.clone()),
            ("tasks", self.tasks.clone()),
            ("output.dir", self.out.as_ref().map(|p| p.display().to_string())),
            ("exit.trace", self.trace.then(|| "true".to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        Ok(config)
    }
}

fn summarize(report: &MetricsReport) {
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{}: sst_acc={} para_acc={} sts_r={} dev_score={} saved={} steps={} ({:.1}s)",
        report.split,
        show(report.sst_accuracy),
        show(report.para_accuracy),
        show(report.sts_pearson),
        show(report.dev_score),
        show(report.layers_saved_fraction),
        report.steps,
        report.wall_seconds
    );
    for (task, why) in &report.degenerate_metrics {
        println!("  warning: {task} metric is degenerate: {why}");
    }
    for (task, constant) in &report.constant_predictions {
        if *constant {
            println!("  warning: {task} predictions are constant");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let out = runner::train(&args.resolve()?)?;
            summarize(&out.report);
            println!("wrote {}", out.output_dir.display());
        }
        Command::Eval(args) => {
            let mut overrides = args
                .set
                .iter()
                .map(|s| split_assignment(s))
                .collect::<Result<Vec<_>>>()?;
            if let Some(dir) = &args.out {
                overrides.push(("output.dir".into(), dir.display().to_string()));
            }
            if args.trace {
                overrides.push(("exit.trace".into(), "true".into()));
            }
            let split: Split = args.split.parse()?;
            let out = runner::eval(&args.checkpoint, split, &overrides)?;
            summarize(&out.report);
            println!("wrote {}", out.output_dir.display());
        }
        Command::Sweep(args) => {
            let base = args.run.resolve()?;
            let reports = runner::sweep(&base, &args.key, &args.values)?;
            for (value, report) in args.values.iter().zip(&reports) {
                print!("{}={value} ", args.key);
                summarize(report);
            }
            println!("wrote {}", base.output_dir.join("sweep.csv").display());
        }
        Command::Synth(args) => {
            let task: TaskKind = args.task.parse()?;
            let path = args.out.unwrap_or_else(|| PathBuf::from(format!("synth_{task}.tsv")));
            runner::synth(task, args.n, args.seed, &path)?;
            println!("wrote {} {task} examples to {}", args.n, path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
