//! Multitask epoch loop, parameter freezing and the fine-tuning schedules.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Packer, TaskBatch, TaskExample, Vocab};
use crate::early_exit::{joint_training_loss, layer_loss, ExitPolicy};
use crate::encoder::Pass;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::heads::output_loss;
use crate::model::MultitaskModel;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamGroup;
use crate::smart::{smoothness_regularizer, ReplayPass, SmartConfig};
use crate::task::TaskKind;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Final-layer loss only.
    Baseline,
    /// Summed per-layer loss every epoch, which trains the exit classifiers.
    Joint,
    /// Per-layer focus epochs followed by joint refinement.
    Slf,
    /// Toggles between final-layer and summed losses on dev-score stalls.
    SmartAlternating,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Joint => "joint",
            Self::Slf => "slf",
            Self::SmartAlternating => "smart_alternating",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "joint" => Ok(Self::Joint),
            "slf" => Ok(Self::Slf),
            "smart_alternating" => Ok(Self::SmartAlternating),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected baseline, joint, slf or smart_alternating)"
            ))),
        }
    }
}

/// `Pretrain` trains heads only; `Finetune` trains everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    Pretrain,
    Finetune,
}

impl FreezeMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
        }
    }
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "finetune" => Ok(Self::Finetune),
            other => Err(Error::Config(format!(
                "unknown freeze mode {other:?} (expected pretrain or finetune)"
            ))),
        }
    }
}

/// Which classifier losses a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `L_n` on the last layer.
    FinalOnly,
    /// `Σ L_i`, plus `J_i` when LTE training is on.
    AllLayers,
    /// `L_i` for one zero-based layer, with updates confined to that layer
    /// and its classifier.
    SingleLayer(usize),
}

/// Which parameters a step may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateMask {
    pub freeze: FreezeMode,
    pub focus: Option<usize>,
}

impl UpdateMask {
    pub fn allows(&self, group: ParamGroup) -> bool {
        if let Some(i) = self.focus {
            let in_focus = matches!(group, ParamGroup::Layer(l) if l == i)
                || matches!(group, ParamGroup::Head { layer, .. } if layer == i);
            if !in_focus {
                return false;
            }
        }
        !(self.freeze == FreezeMode::Pretrain && group.is_backbone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_mode: FreezeMode,
    pub seed: u64,
    pub delta_switch: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub lte_enabled: bool,
    pub smart: SmartConfig,
    pub smart_tasks: Vec<TaskKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Baseline,
            epochs: 5,
            batch_size: 16,
            freeze_mode: FreezeMode::Finetune,
            seed: 42,
            delta_switch: 1e-4,
            optimizer: OptimizerKind::DEFAULT_ADAMW,
            lr: 1e-3,
            clip_norm: None,
            lte_enabled: false,
            smart: SmartConfig::default(),
            smart_tasks: vec![TaskKind::Para],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.delta_switch >= 0.0) {
            return Err(Error::Config("train.delta_switch must be >= 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("train.clip_norm must be positive".into()));
            }
        }
        self.optimizer.validate()?;
        self.smart.validate()
    }

    fn smart_applies(&self, task: TaskKind) -> bool {
        self.smart.lambda != 0.0 && self.smart_tasks.contains(&task)
    }
}

/// Training and validation examples keyed by task.
#[derive(Clone, Debug, Default)]
pub struct TaskSplits {
    pub train: BTreeMap<TaskKind, Vec<TaskExample>>,
    pub dev: BTreeMap<TaskKind, Vec<TaskExample>>,
}

impl TaskSplits {
    pub fn dev_sets(&self) -> Vec<(TaskKind, &[TaskExample])> {
        self.dev.iter().map(|(t, v)| (*t, v.as_slice())).collect()
    }
}

/// A schedule stage change, tagged with the one-based epoch it starts at.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub mean_loss: BTreeMap<TaskKind, f64>,
    pub steps: BTreeMap<TaskKind, usize>,
}

impl EpochStats {
    pub fn total_steps(&self) -> usize {
        self.steps.values().sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub stage_log: Vec<StageEntry>,
    /// Dev score after each epoch, when the schedule measured one.
    pub dev_history: Vec<f64>,
    pub best_dev: Option<f64>,
    pub steps: u64,
}

/// Two stages of the alternating schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AltStage {
    FinalLayer,
    AllLayers,
}

impl AltStage {
    fn label(self) -> &'static str {
        match self {
            Self::FinalLayer => "S1",
            Self::AllLayers => "S2",
        }
    }

    fn toggled(self) -> Self {
        match self {
            Self::FinalLayer => Self::AllLayers,
            Self::AllLayers => Self::FinalLayer,
        }
    }

    fn objective(self) -> Objective {
        match self {
            Self::FinalLayer => Objective::FinalOnly,
            Self::AllLayers => Objective::AllLayers,
        }
    }
}

/// Switching rule: after each epoch's dev score, toggle the stage when the
/// improvement over the best score so far is below `delta`.
#[derive(Clone, Debug)]
pub struct AlternatingSchedule {
    pub stage: AltStage,
    best: f64,
    delta: f64,
}

impl AlternatingSchedule {
    pub fn new(delta: f64) -> Self {
        Self {
            stage: AltStage::FinalLayer,
            best: f64::NEG_INFINITY,
            delta,
        }
    }

    /// Record an epoch score; returns whether the stage toggled.
    pub fn observe(&mut self, score: f64) -> bool {
        let improvement = score - self.best;
        if score > self.best {
            self.best = score;
        }
        if improvement < self.delta {
            self.stage = self.stage.toggled();
            true
        } else {
            false
        }
    }
}

/// Stage used in each epoch when the dev scores are `scores`; the result has
/// one more entry than `scores`, naming the stage the next epoch would use.
pub fn alternating_stages(scores: &[f64], delta: f64) -> Vec<AltStage> {
    let mut schedule = AlternatingSchedule::new(delta);
    let mut stages = vec![schedule.stage];
    for &s in scores {
        schedule.observe(s);
        stages.push(schedule.stage);
    }
    stages
}

/// Stage labels of the layer-focus schedule for `n_layers` and an epoch budget.
pub fn slf_stage_labels(n_layers: usize, epochs: usize) -> Vec<String> {
    let focus = n_layers.min(epochs);
    let mut labels: Vec<String> = (1..=focus).map(|i| format!("S1:L{i}")).collect();
    if epochs > focus {
        labels.push("S2".into());
    }
    labels
}

fn shuffle_seed(seed: u64, epoch: usize, task: TaskKind) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((epoch as u64) << 8) | task.index() as u64)
}

/// Owns a model and its optimizer for the length of a training run.
pub struct Trainer<'v> {
    pub model: MultitaskModel,
    pub config: TrainConfig,
    vocab: &'v Vocab,
    optimizer: Optimizer,
    dropout_rng: ChaCha8Rng,
    smart_rng: ChaCha8Rng,
    epochs_run: usize,
    workers: usize,
}

impl<'v> Trainer<'v> {
    pub fn new(model: MultitaskModel, vocab: &'v Vocab, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, config.lr)?;
        let mut root = ChaCha8Rng::seed_from_u64(config.seed);
        let dropout_rng = ChaCha8Rng::from_rng(&mut root);
        let smart_rng = ChaCha8Rng::from_rng(&mut root);
        Ok(Self {
            model,
            config,
            vocab,
            optimizer,
            dropout_rng,
            smart_rng,
            epochs_run: 0,
            workers: 1,
        })
    }

    /// Threads used by between-epoch dev evaluation.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.steps()
    }

    pub fn into_model(self) -> MultitaskModel {
        self.model
    }

    fn packer(&self) -> Packer<'v> {
        Packer {
            vocab: self.vocab,
            max_len: self.model.config.encoder.max_len,
            pair_packing: self.model.config.pair_packing,
            para_head: self.model.config.para_head,
        }
    }

    fn batch_objective(&mut self, tape: &mut Tape, batch: &TaskBatch, objective: Objective) -> Result<Var> {
        let model = &self.model;
        let task = batch.task;
        let n = model.num_layers();
        let mut pass = Pass {
            train: true,
            rng: ChaCha8Rng::from_rng(&mut self.dropout_rng),
        };
        let replay = ReplayPass::of(&pass);
        let depth = match objective {
            Objective::SingleLayer(i) => i + 1,
            _ => n,
        };
        let states = model.encode(tape, task, &batch.input, &mut pass, None, depth)?;
        let loss = match objective {
            Objective::FinalOnly => {
                let out = model.layer_output(tape, &states, task, n - 1)?;
                output_loss(model, tape, task, out, &batch.labels)?
            }
            Objective::AllLayers => {
                joint_training_loss(model, tape, &states, task, &batch.labels, self.config.lte_enabled, None)?
            }
            Objective::SingleLayer(i) => layer_loss(model, tape, &states, task, i, &batch.labels)?,
        };
        if matches!(objective, Objective::SingleLayer(_)) || !self.config.smart_applies(task) {
            return Ok(loss);
        }
        let clean = model.layer_output(tape, &states, task, n - 1)?;
        let (r, _) = smoothness_regularizer(
            model,
            tape,
            task,
            &batch.input,
            &replay,
            clean,
            &self.config.smart,
            &mut self.smart_rng,
        )?;
        let weighted = tape.scale(r, self.config.smart.lambda);
        tape.add(loss, weighted)
    }

    /// One optimizer step on one batch; returns the batch loss.
    pub fn train_batch(&mut self, batch: &TaskBatch, objective: Objective) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.batch_objective(&mut tape, batch, objective)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite {} loss {value}", batch.task)));
        }
        tape.backward(loss)?;
        let store = &mut self.model.store;
        store.zero_grad();
        tape.accumulate_param_grads(store);
        let mut touched = vec![false; store.len()];
        for id in tape.params_with_grad() {
            touched[id.index()] = true;
        }
        if let Some(max) = self.config.clip_norm {
            store.clip_grad_norm(max);
        }
        let mask = UpdateMask {
            freeze: self.config.freeze_mode,
            focus: match objective {
                Objective::SingleLayer(i) => Some(i),
                _ => None,
            },
        };
        self.optimizer
            .step(store, |id, p| touched[id.index()] && mask.allows(p.group));
        store.zero_grad();
        Ok(value)
    }

    /// Every batch of every task, in task order, once.
    pub fn train_epoch_multitask(
        &mut self,
        train: &BTreeMap<TaskKind, Vec<TaskExample>>,
        objective: Objective,
    ) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::Data("no task has training data".into()));
        }
        let epoch = self.epochs_run;
        let packer = self.packer();
        let mut stats = EpochStats::default();
        for task in TaskKind::ALL {
            let Some(examples) = train.get(&task) else { continue };
            if examples.is_empty() {
                return Err(Error::Data(format!("{task} training set is empty")));
            }
            let batches = make_batches(
                examples,
                self.config.batch_size,
                &packer,
                Some(shuffle_seed(self.config.seed, epoch, task)),
            )?;
            let mut total = 0.0;
            for batch in &batches {
                total += self.train_batch(batch, objective)?;
            }
            log::debug!(
                "epoch {} {task}: mean loss {:.5}",
                epoch + 1,
                total / batches.len() as f64
            );
            stats.mean_loss.insert(task, total / batches.len() as f64);
            stats.steps.insert(task, batches.len());
        }
        self.epochs_run += 1;
        Ok(stats)
    }

    fn objective_for_default(&self) -> Objective {
        match self.config.strategy {
            Strategy::Baseline => Objective::FinalOnly,
            _ => Objective::AllLayers,
        }
    }

    /// Run the configured schedule over `data`.
    pub fn run(&mut self, data: &TaskSplits) -> Result<TrainOutcome> {
        let outcome = match self.config.strategy {
            Strategy::Baseline | Strategy::Joint => {
                let objective = self.objective_for_default();
                let mut out = TrainOutcome {
                    stage_log: vec![StageEntry {
                        stage: self.config.strategy.name().into(),
                        epoch: 1,
                    }],
                    ..Default::default()
                };
                for _ in 0..self.config.epochs {
                    out.epochs.push(self.train_epoch_multitask(&data.train, objective)?);
                }
                out
            }
            Strategy::Slf => self.slf_run(data)?,
            Strategy::SmartAlternating => self.smart_alternating_run(data)?,
        };
        Ok(TrainOutcome {
            steps: self.steps(),
            ..outcome
        })
    }

    /// One focus epoch per layer, then joint epochs for the remaining budget.
    /// A budget smaller than the depth focuses on the first layers only.
    pub fn slf_run(&mut self, data: &TaskSplits) -> Result<TrainOutcome> {
        let n = self.model.num_layers();
        let epochs = self.config.epochs;
        let focus = n.min(epochs);
        let mut out = TrainOutcome::default();
        for i in 0..focus {
            out.stage_log.push(StageEntry {
                stage: format!("S1:L{}", i + 1),
                epoch: i + 1,
            });
            out.epochs
                .push(self.train_epoch_multitask(&data.train, Objective::SingleLayer(i))?);
        }
        if epochs > focus {
            out.stage_log.push(StageEntry {
                stage: "S2".into(),
                epoch: focus + 1,
            });
        }
        for _ in focus..epochs {
            out.epochs
                .push(self.train_epoch_multitask(&data.train, Objective::AllLayers)?);
        }
        Ok(out)
    }

    /// Alternate between the final-layer loss and the summed loss, switching
    /// whenever the dev score stalls, and keep the best parameters seen.
    pub fn smart_alternating_run(&mut self, data: &TaskSplits) -> Result<TrainOutcome> {
        for task in data.train.keys() {
            if data.dev.get(task).is_none_or(|d| d.is_empty()) {
                return Err(Error::Config(format!(
                    "smart_alternating needs a validation split for {task}"
                )));
            }
        }
        let dev_sets = data.dev_sets();
        let mut schedule = AlternatingSchedule::new(self.config.delta_switch);
        let mut out = TrainOutcome {
            stage_log: vec![StageEntry {
                stage: schedule.stage.label().into(),
                epoch: 1,
            }],
            ..Default::default()
        };
        let mut best: Option<(f64, Vec<std::sync::Arc<crate::tensor::Tensor>>)> = None;
        for epoch in 0..self.config.epochs {
            out.epochs
                .push(self.train_epoch_multitask(&data.train, schedule.stage.objective())?);
            let eval = evaluate(&self.model, self.vocab, &dev_sets, ExitPolicy::None, self.workers)?;
            let score = eval.dev_score.unwrap_or(f64::NEG_INFINITY);
            log::info!("epoch {} dev score {score:.4} ({})", epoch + 1, schedule.stage.label());
            out.dev_history.push(score);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, self.model.store.snapshot()));
            }
            if schedule.observe(score) && epoch + 1 < self.config.epochs {
                out.stage_log.push(StageEntry {
                    stage: schedule.stage.label().into(),
                    epoch: epoch + 2,
                });
            }
        }
        if let Some((score, snapshot)) = best {
            self.model.store.restore(&snapshot);
            out.best_dev = score.is_finite().then_some(score);
        }
        Ok(out)
    }
}
