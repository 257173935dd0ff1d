//! End-to-end runs behind the command-line subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{build_vocab, load_tsv, synth_task, write_tsv, TaskExample, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Evaluation};
use crate::model::MultitaskModel;
use crate::report::{emit_reports, MetricsReport};
use crate::task::TaskKind;
use crate::training::{TaskSplits, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!(
                "unknown split {s:?} (expected train, dev or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub splits: TaskSplits,
    pub test: BTreeMap<TaskKind, Vec<TaskExample>>,
}

impl Datasets {
    pub fn split(&self, split: Split) -> &BTreeMap<TaskKind, Vec<TaskExample>> {
        match split {
            Split::Train => &self.splits.train,
            Split::Dev => &self.splits.dev,
            Split::Test => &self.test,
        }
    }
}

/// Seed of one synthetic split, distinct per task and split.
fn synth_seed(base: u64, task: TaskKind, split: Split) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add(10 * task.index() as u64 + split as u64)
}

/// Generate or read every enabled task's splits.
pub fn load_datasets(config: &RunConfig) -> Result<Datasets> {
    let mut out = Datasets::default();
    for &task in &config.tasks {
        match config.data_source {
            DataSource::Synth => {
                let make = |n: usize, split| -> Result<Option<Vec<TaskExample>>> {
                    if n == 0 {
                        return Ok(None);
                    }
                    synth_task(task, n, synth_seed(config.data_seed, task, split)).map(Some)
                };
                out.splits.train.insert(
                    task,
                    make(config.synth_train, Split::Train)?
                        .ok_or_else(|| Error::Config("data.synth_train must be positive".into()))?,
                );
                if let Some(dev) = make(config.synth_dev, Split::Dev)? {
                    out.splits.dev.insert(task, dev);
                }
                if let Some(test) = make(config.synth_dev, Split::Test)? {
                    out.test.insert(task, test);
                }
            }
            DataSource::Files => {
                let files = config.files.get(&task).cloned().unwrap_or_default();
                let train = files
                    .train
                    .ok_or_else(|| Error::Config(format!("data.{task}.train is not set")))?;
                out.splits.train.insert(task, load_tsv(&train, task)?);
                if let Some(dev) = files.dev {
                    out.splits.dev.insert(task, load_tsv(&dev, task)?);
                }
                if let Some(test) = files.test {
                    out.test.insert(task, load_tsv(&test, task)?);
                }
            }
        }
    }
    Ok(out)
}

pub fn training_vocab(config: &RunConfig, data: &Datasets) -> Vocab {
    build_vocab(
        data.splits.train.values().flatten().flat_map(|e| e.texts()),
        config.min_count,
    )
}

/// The trained (or loaded) model with its scores on one split.
pub struct RunOutput {
    pub report: MetricsReport,
    pub evaluation: Evaluation,
    pub model: MultitaskModel,
    pub vocab: Vocab,
    pub output_dir: PathBuf,
}

fn evaluate_split(
    config: &RunConfig,
    model: &MultitaskModel,
    vocab: &Vocab,
    data: &Datasets,
    split: Split,
) -> Result<(Evaluation, MetricsReport)> {
    let examples = data.split(split);
    if examples.is_empty() {
        return Err(Error::Config(format!("no {} split is available", split.name())));
    }
    let sets: Vec<(TaskKind, &[TaskExample])> = examples.iter().map(|(t, v)| (*t, v.as_slice())).collect();
    let eval = evaluate(model, vocab, &sets, config.exit_policy(), config.workers)?;
    let report = MetricsReport::from_evaluation(split.name(), &eval, model.num_layers(), &config.entries())?;
    Ok((eval, report))
}

/// Train per `config`, score the dev split (the training split when no dev
/// split exists), then write the checkpoint and reports.
pub fn train(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    let data = load_datasets(config)?;
    let vocab = training_vocab(config, &data);
    let model = MultitaskModel::new(config.model_config(vocab.len()), config.train.seed)?;
    log::info!(
        "training {} ({} layers, vocab {}) on {}",
        config.train.strategy,
        model.num_layers(),
        vocab.len(),
        crate::task::format_task_list(&config.tasks)
    );
    let mut trainer = Trainer::new(model, &vocab, config.train_config())?.with_workers(config.workers);
    let outcome = trainer.run(&data.splits)?;
    let model = trainer.into_model();

    let split = if data.splits.dev.is_empty() {
        Split::Train
    } else {
        Split::Dev
    };
    let (evaluation, mut report) = evaluate_split(config, &model, &vocab, &data, split)?;
    report.stage_log = outcome.stage_log;
    report.dev_history = outcome.dev_history;
    report.steps = outcome.steps;
    report.wall_seconds = started.elapsed().as_secs_f64();

    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Checkpoint::capture(config, &vocab, &model).save(&dir.join(CHECKPOINT_FILE))?;
    emit_reports(&report, &evaluation, &dir, config.trace)?;
    Ok(RunOutput {
        report,
        evaluation,
        model,
        vocab,
        output_dir: dir,
    })
}

/// Keys that change the architecture and so cannot differ from the checkpoint.
fn is_architecture_key(key: &str) -> bool {
    key.starts_with("model.") || key == "pair.packing" || key == "para.head"
}

/// Score a saved model on one split. `overrides` may adjust anything except
/// the architecture, for example the exit policy or the output directory.
pub fn eval(checkpoint: &Path, split: Split, overrides: &[(String, String)]) -> Result<RunOutput> {
    let started = Instant::now();
    let (mut config, vocab, model) = Checkpoint::load(checkpoint)?.restore()?;
    for (key, value) in overrides {
        if is_architecture_key(key) {
            return Err(Error::Config(format!("{key} is fixed by the checkpoint")));
        }
        config.set(key, value)?;
    }
    config.validate()?;
    let data = load_datasets(&config)?;
    let (evaluation, mut report) = evaluate_split(&config, &model, &vocab, &data, split)?;
    report.wall_seconds = started.elapsed().as_secs_f64();
    emit_reports(&report, &evaluation, &config.output_dir, config.trace)?;
    Ok(RunOutput {
        report,
        evaluation,
        model,
        vocab,
        output_dir: config.output_dir,
    })
}

fn sanitize(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Configuration of every grid point: `key` set to each value, the training
/// seed offset by the point index, and a separate output directory.
pub fn sweep_points(base: &RunConfig, key: &str, values: &[String]) -> Result<Vec<RunConfig>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let share = (base.workers / values.len()).max(1);
    values
        .iter()
        .enumerate()
        .map(|(i, value)| {
            let mut c = base.clone();
            c.set(key, value)?;
            if key != "train.seed" {
                c.train.seed = base.train.seed.wrapping_add(i as u64);
            }
            c.output_dir = base
                .output_dir
                .join(format!("{i:02}_{}", sanitize(&format!("{key}={value}"))));
            c.workers = share;
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Train every grid point concurrently and write `sweep.csv` next to the
/// per-point directories.
pub fn sweep(base: &RunConfig, key: &str, values: &[String]) -> Result<Vec<MetricsReport>> {
    let points = sweep_points(base, key, values)?;
    let results: Vec<Result<MetricsReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .iter()
            .map(|c| scope.spawn(move || train(c).map(|out| out.report)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Contract("sweep worker panicked".into())))
            })
            .collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    let dir = &base.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("sweep.csv");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut text =
        format!("{key},dev_score,sst_accuracy,para_accuracy,sts_pearson,layers_saved_fraction,steps,output_dir\n");
    for ((value, report), point) in values.iter().zip(&reports).zip(&points) {
        text.push_str(&format!(
            "{value},{},{},{},{},{},{},{}\n",
            fmt(report.dev_score),
            fmt(report.sst_accuracy),
            fmt(report.para_accuracy),
            fmt(report.sts_pearson),
            fmt(report.layers_saved_fraction),
            report.steps,
            point.output_dir.display()
        ));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(reports)
}

/// Write a synthetic dataset as TSV.
pub fn synth(task: TaskKind, n: usize, seed: u64, path: &Path) -> Result<()> {
    let examples = synth_task(task, n, seed)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_tsv(path, task, &examples)
}
