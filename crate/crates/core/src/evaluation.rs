//! Scoring a model on labelled examples through the exit-aware inference path.

use crate::data::{Packer, TaskExample, Vocab};
use crate::early_exit::{run_many, ExitPolicy, ExitTrace};
use crate::error::{Error, Result};
use crate::heads::Prediction;
use crate::metrics::{accuracy, dev_score, is_constant, pearson};
use crate::model::MultitaskModel;
use crate::task::TaskKind;

/// Everything known about one task's predictions on one split.
#[derive(Clone, Debug)]
pub struct TaskEval {
    pub task: TaskKind,
    pub ids: Vec<String>,
    pub predictions: Vec<Prediction>,
    pub golds: Vec<f64>,
    pub traces: Vec<ExitTrace>,
    /// Accuracy or Pearson correlation; `None` when the metric is undefined.
    pub score: Option<f64>,
    pub constant: bool,
    /// Why `score` is missing, when it is.
    pub degenerate: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub tasks: Vec<TaskEval>,
    pub dev_score: Option<f64>,
}

impl Evaluation {
    pub fn task(&self, task: TaskKind) -> Option<&TaskEval> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn score(&self, task: TaskKind) -> Option<f64> {
        self.task(task).and_then(|t| t.score)
    }
}

/// Score predictions against gold labels with the task's metric.
pub fn score_predictions(task: TaskKind, predictions: &[Prediction], golds: &[f64]) -> Result<f64> {
    if task.is_regression() {
        let xs: Vec<f64> = predictions.iter().map(|p| p.as_f64()).collect();
        pearson(&xs, golds)
    } else {
        let p: Vec<usize> = predictions.iter().map(|p| p.as_f64() as usize).collect();
        let g: Vec<usize> = golds.iter().map(|&g| g as usize).collect();
        accuracy(&p, &g)
    }
}

pub fn evaluate_task(
    model: &MultitaskModel,
    vocab: &Vocab,
    examples: &[TaskExample],
    task: TaskKind,
    policy: ExitPolicy,
    workers: usize,
) -> Result<TaskEval> {
    if examples.is_empty() {
        return Err(Error::Data(format!("no {task} examples to evaluate")));
    }
    let packer = Packer {
        vocab,
        max_len: model.config.encoder.max_len,
        pair_packing: model.config.pair_packing,
        para_head: model.config.para_head,
    };
    let inputs = examples
        .iter()
        .map(|e| packer.pack(task, &[e]))
        .collect::<Result<Vec<_>>>()?;
    let results = run_many(model, task, &inputs, policy, workers)?;
    let (predictions, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let golds: Vec<f64> = examples.iter().map(|e| e.label).collect();
    let (score, degenerate) = match score_predictions(task, &predictions, &golds) {
        Ok(s) => (Some(s), None),
        Err(e @ Error::Degenerate(_)) => {
            log::warn!("{task}: {e}");
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    Ok(TaskEval {
        task,
        ids: examples.iter().map(|e| e.id.clone()).collect(),
        constant: is_constant(&predictions),
        predictions,
        golds,
        traces,
        score,
        degenerate,
    })
}

/// Evaluate every task present in `sets`, then average the defined scores.
pub fn evaluate(
    model: &MultitaskModel,
    vocab: &Vocab,
    sets: &[(TaskKind, &[TaskExample])],
    policy: ExitPolicy,
    workers: usize,
) -> Result<Evaluation> {
    let tasks = sets
        .iter()
        .map(|(task, examples)| evaluate_task(model, vocab, examples, *task, policy, workers))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<Option<f64>> = tasks.iter().map(|t| t.score).collect();
    Ok(Evaluation {
        dev_score: dev_score(&scores).ok(),
        tasks,
    })
}
