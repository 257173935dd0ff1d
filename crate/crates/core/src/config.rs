//! Run configuration: a flat `key = value` file, overridable key by key.
//!
//! Every setting has a fixed key; [`RunConfig::set`] parses one and
//! [`RunConfig::entries`] renders the whole configuration back in a stable
//! order, which is what reports and checkpoints store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::early_exit::{ExitPolicy, DEFAULT_TAU, DEFAULT_TAU_U};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PairPacking, ParaHead};
use crate::optim::OptimizerKind;
use crate::task::{format_task_list, parse_task_list, TaskKind};
use crate::training::{FreezeMode, Strategy, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Files,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    None,
    Threshold,
    Lte,
}

/// Paths of one task's splits when reading from files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskFiles {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub workers: usize,
    pub tasks: Vec<TaskKind>,

    pub data_source: DataSource,
    pub synth_train: usize,
    pub synth_dev: usize,
    pub min_count: usize,
    /// Seed of the synthetic generators, kept apart from the training seed.
    pub data_seed: u64,
    pub files: BTreeMap<TaskKind, TaskFiles>,

    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub pair_packing: PairPacking,
    pub para_head: ParaHead,
    pub cosine_margin: f64,

    pub optimizer: String,
    pub gamma: f64,
    pub opt_eps: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub train: TrainConfig,

    pub exit_kind: ExitKind,
    pub tau: f64,
    pub tau_u: f64,
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = EncoderConfig::desk(0);
        Self {
            output_dir: PathBuf::from("out"),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            tasks: TaskKind::ALL.to_vec(),
            data_source: DataSource::Synth,
            synth_train: 600,
            synth_dev: 200,
            min_count: 1,
            data_seed: 7,
            files: BTreeMap::new(),
            layers: desk.num_layers,
            hidden: desk.hidden,
            heads: desk.num_heads,
            ffn: desk.ffn_width,
            dropout: desk.dropout_p,
            max_len: desk.max_len,
            pair_packing: PairPacking::ConcatFirst,
            para_head: ParaHead::Logit,
            cosine_margin: 0.0,
            optimizer: "adamw".into(),
            gamma: 0.9,
            opt_eps: 1e-8,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            train: TrainConfig::default(),
            exit_kind: ExitKind::None,
            tau: DEFAULT_TAU,
            tau_u: DEFAULT_TAU_U,
            trace: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Parse a configuration file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        config.apply_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(config)
    }

    /// Apply `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "output.dir" => self.output_dir = PathBuf::from(value),
            "workers" => self.workers = parse::<usize>(key, value)?.max(1),
            "task.sst" | "task.para" | "task.sts" => {
                let task: TaskKind = key[5..].parse()?;
                let on = parse_bool(key, value)?;
                self.tasks.retain(|&k| k != task);
                if on {
                    self.tasks.push(task);
                    self.tasks.sort();
                }
            }
            "tasks" => self.tasks = parse_task_list(value)?,
            "data.source" => {
                self.data_source = match value {
                    "synth" => DataSource::Synth,
                    "files" => DataSource::Files,
                    _ => return Err(Error::Config(format!("{key}: expected synth or files, got {value:?}"))),
                }
            }
            "data.synth_train" => self.synth_train = parse(key, value)?,
            "data.synth_dev" => self.synth_dev = parse(key, value)?,
            "data.min_count" => self.min_count = parse(key, value)?,
            "data.seed" => self.data_seed = parse(key, value)?,
            "model.layers" => self.layers = parse(key, value)?,
            "model.hidden" => self.hidden = parse(key, value)?,
            "model.heads" => self.heads = parse(key, value)?,
            "model.ffn" => self.ffn = parse(key, value)?,
            "model.dropout" => self.dropout = parse(key, value)?,
            "model.max_len" => self.max_len = parse(key, value)?,
            "pair.packing" => self.pair_packing = value.parse()?,
            "para.head" => self.para_head = value.parse()?,
            "para.margin" => self.cosine_margin = parse(key, value)?,
            "optimizer.kind" => {
                if !["sgd", "rmsprop", "adamw"].contains(&value) {
                    return Err(Error::Config(format!(
                        "{key}: expected sgd, rmsprop or adamw, got {value:?}"
                    )));
                }
                self.optimizer = value.to_string();
            }
            "optimizer.lr" => t.lr = parse(key, value)?,
            "optimizer.gamma" => self.gamma = parse(key, value)?,
            "optimizer.eps" => self.opt_eps = parse(key, value)?,
            "optimizer.betas" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("{key}: expected `beta1,beta2`, got {value:?}")))?;
                self.betas = (parse(key, a.trim())?, parse(key, b.trim())?);
            }
            "optimizer.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.strategy" => t.strategy = value.parse::<Strategy>()?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.freeze_mode" => t.freeze_mode = value.parse::<FreezeMode>()?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.delta_switch" => t.delta_switch = parse(key, value)?,
            "train.clip_norm" => {
                t.clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "smart.lambda_s" => t.smart.lambda = parse(key, value)?,
            "smart.epsilon" => t.smart.epsilon = parse(key, value)?,
            "smart.steps" => t.smart.steps = parse(key, value)?,
            "smart.ascent_lr" => t.smart.ascent_lr = parse(key, value)?,
            "smart.init_sigma" => t.smart.init_sigma = parse(key, value)?,
            "smart.tasks" => {
                t.smart_tasks = if value == "none" || value.is_empty() {
                    Vec::new()
                } else {
                    parse_task_list(value)?
                }
            }
            "exit.kind" => {
                self.exit_kind = match value {
                    "none" => ExitKind::None,
                    "threshold" => ExitKind::Threshold,
                    "lte" => ExitKind::Lte,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected none, threshold or lte, got {value:?}"
                        )))
                    }
                }
            }
            "exit.tau" => self.tau = parse(key, value)?,
            "exit.tau_u" => self.tau_u = parse(key, value)?,
            "exit.lte_enabled" => t.lte_enabled = parse_bool(key, value)?,
            "exit.trace" => self.trace = parse_bool(key, value)?,
            other => {
                let parts: Vec<&str> = other.split('.').collect();
                match parts.as_slice() {
                    ["data", task, split @ ("train" | "dev" | "test")] => {
                        let task: TaskKind = task.parse()?;
                        let files = self.files.entry(task).or_default();
                        let slot = match *split {
                            "train" => &mut files.train,
                            "dev" => &mut files.dev,
                            _ => &mut files.test,
                        };
                        *slot = path_or_none(value);
                    }
                    _ => return Err(Error::Config(format!("unknown config key {other:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("output.dir", self.output_dir.display().to_string());
        put("workers", self.workers.to_string());
        for task in TaskKind::ALL {
            put(&format!("task.{task}"), self.tasks.contains(&task).to_string());
        }
        put(
            "data.source",
            match self.data_source {
                DataSource::Synth => "synth",
                DataSource::Files => "files",
            }
            .into(),
        );
        put("data.synth_train", self.synth_train.to_string());
        put("data.synth_dev", self.synth_dev.to_string());
        put("data.min_count", self.min_count.to_string());
        put("data.seed", self.data_seed.to_string());
        for (task, files) in &self.files {
            put(&format!("data.{task}.train"), show_path(&files.train));
            put(&format!("data.{task}.dev"), show_path(&files.dev));
            put(&format!("data.{task}.test"), show_path(&files.test));
        }
        put("model.layers", self.layers.to_string());
        put("model.hidden", self.hidden.to_string());
        put("model.heads", self.heads.to_string());
        put("model.ffn", self.ffn.to_string());
        put("model.dropout", self.dropout.to_string());
        put("model.max_len", self.max_len.to_string());
        put("pair.packing", self.pair_packing.name().into());
        put("para.head", self.para_head.name().into());
        put("para.margin", self.cosine_margin.to_string());
        put("optimizer.kind", self.optimizer.clone());
        put("optimizer.lr", t.lr.to_string());
        put("optimizer.gamma", self.gamma.to_string());
        put("optimizer.eps", self.opt_eps.to_string());
        put("optimizer.betas", format!("{},{}", self.betas.0, self.betas.1));
        put("optimizer.weight_decay", self.weight_decay.to_string());
        put("train.strategy", t.strategy.name().into());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.freeze_mode", t.freeze_mode.name().into());
        put("train.seed", t.seed.to_string());
        put("train.delta_switch", t.delta_switch.to_string());
        put("train.clip_norm", t.clip_norm.map_or("none".into(), |c| c.to_string()));
        put("smart.lambda_s", t.smart.lambda.to_string());
        put("smart.epsilon", t.smart.epsilon.to_string());
        put("smart.steps", t.smart.steps.to_string());
        put("smart.ascent_lr", t.smart.ascent_lr.to_string());
        put("smart.init_sigma", t.smart.init_sigma.to_string());
        put(
            "smart.tasks",
            if t.smart_tasks.is_empty() {
                "none".into()
            } else {
                format_task_list(&t.smart_tasks)
            },
        );
        put(
            "exit.kind",
            match self.exit_kind {
                ExitKind::None => "none",
                ExitKind::Threshold => "threshold",
                ExitKind::Lte => "lte",
            }
            .into(),
        );
        put("exit.tau", self.tau.to_string());
        put("exit.tau_u", self.tau_u.to_string());
        put("exit.lte_enabled", t.lte_enabled.to_string());
        put("exit.trace", self.trace.to_string());
        out
    }

    /// The configuration as `key = value` lines that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// The optimizer rule with its hyperparameters.
    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "rmsprop" => OptimizerKind::Rmsprop {
                gamma: self.gamma,
                eps: self.opt_eps,
            },
            _ => OptimizerKind::Adamw {
                beta1: self.betas.0,
                beta2: self.betas.1,
                eps: self.opt_eps,
                weight_decay: self.weight_decay,
            },
        }
    }

    /// Training settings with the optimizer resolved.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer_kind(),
            ..self.train.clone()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let encoder = EncoderConfig {
            num_layers: self.layers,
            hidden: self.hidden,
            num_heads: self.heads,
            ffn_width: self.ffn,
            dropout_p: self.dropout,
            vocab_size,
            max_len: self.max_len,
            ..EncoderConfig::desk(vocab_size)
        };
        ModelConfig {
            pair_packing: self.pair_packing,
            para_head: self.para_head,
            cosine_margin: self.cosine_margin,
            ..ModelConfig::new(encoder)
        }
    }

    pub fn exit_policy(&self) -> ExitPolicy {
        match self.exit_kind {
            ExitKind::None => ExitPolicy::None,
            ExitKind::Threshold => ExitPolicy::Threshold { tau: self.tau },
            ExitKind::Lte => ExitPolicy::Lte { tau_u: self.tau_u },
        }
    }

    /// Check everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("no task is enabled".into()));
        }
        self.train_config().validate()?;
        self.model_config(crate::encoder::NUM_RESERVED + 1).validate()?;
        let policy = self.exit_policy();
        for &task in &self.tasks {
            policy.check(task, self.para_head)?;
        }
        if self.exit_kind == ExitKind::Lte && !self.train.lte_enabled {
            log::warn!("exit.kind = lte without exit.lte_enabled: the certainty estimator stays untrained");
        }
        if self.data_source == DataSource::Files {
            for task in &self.tasks {
                let files = self.files.get(task);
                if files.and_then(|f| f.train.as_ref()).is_none() {
                    return Err(Error::Config(format!(
                        "data.{task}.train is required with data.source = files"
                    )));
                }
            }
        }
        Ok(())
    }
}
