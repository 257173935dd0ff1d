//! Per-layer exit classifiers at inference and training time.
//!
//! Inference walks the encoder one layer at a time and stops at the first
//! layer whose statistic reaches the policy's threshold. Training always runs
//! every layer and sums the per-layer losses.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::encoder::{LayerStates, PackedInput, Pass};
use crate::error::{Error, Result};
use crate::heads::{binary_probs, output_loss, predict_row, Labels, Prediction};
use crate::model::{MultitaskModel, ParaHead};
use crate::task::TaskKind;
use crate::tensor::{sigmoid, softmax_slice, Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_TAU_U: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExitPolicy {
    /// Always run every layer.
    None,
    /// Exit once the classifier's max probability reaches `tau`.
    Threshold { tau: f64 },
    /// Exit once the learned certainty reaches `tau_u`.
    Lte { tau_u: f64 },
}

impl ExitPolicy {
    /// Reject policies the task cannot support and thresholds outside `[0, ∞)`.
    pub fn check(&self, task: TaskKind, para_head: ParaHead) -> Result<()> {
        match *self {
            ExitPolicy::None => Ok(()),
            ExitPolicy::Threshold { tau } => {
                if tau.is_nan() || tau < 0.0 {
                    return Err(Error::Config(format!("exit threshold must be >= 0, got {tau}")));
                }
                if !has_confidence(task, para_head) {
                    return Err(Error::Config(format!(
                        "{task} with this head has no confidence distribution; use exit.kind = lte"
                    )));
                }
                Ok(())
            }
            ExitPolicy::Lte { tau_u } => {
                if tau_u.is_nan() || tau_u < 0.0 {
                    return Err(Error::Config(format!("certainty threshold must be >= 0, got {tau_u}")));
                }
                Ok(())
            }
        }
    }
}

/// What happened to one example during exit-aware inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    /// Policy statistic at each executed layer (empty under `ExitPolicy::None`).
    pub statistics: Vec<f64>,
    /// One-based layer whose classifier produced the prediction.
    pub exit_layer: usize,
    pub layers_executed: usize,
}

fn has_confidence(task: TaskKind, para_head: ParaHead) -> bool {
    match task {
        TaskKind::Sst => true,
        TaskKind::Para => para_head == ParaHead::Logit,
        TaskKind::Sts => false,
    }
}

/// Maximum softmax probability. A single logit is read as a two-class
/// problem, giving `max(σ(z), 1 − σ(z))`.
pub fn confidence(logits: &[f64]) -> f64 {
    let probs = if logits.len() == 1 {
        binary_probs(logits[0]).to_vec()
    } else {
        softmax_slice(logits)
    };
    probs.into_iter().fold(0.0, f64::max)
}

/// `σ(cᵀh + b)`.
pub fn lte_certainty(hidden: &[f64], weight: &[f64], bias: f64) -> Result<f64> {
    if hidden.len() != weight.len() {
        return Err(Error::shape("lte_certainty", &[hidden.len()], &[weight.len()]));
    }
    Ok(sigmoid(
        hidden.iter().zip(weight).map(|(h, c)| h * c).sum::<f64>() + bias,
    ))
}

/// Classification: 1 when the prediction is right, else 0. Regression:
/// `1 − tanh(|prediction − gold|)`.
pub fn certainty_target(prediction: Prediction, gold: f64) -> f64 {
    match prediction {
        Prediction::Class(c) => (c as f64 == gold) as u8 as f64,
        Prediction::Score(s) => 1.0 - (s - gold).abs().tanh(),
    }
}

pub fn lte_loss(certainty: f64, target: f64) -> f64 {
    (certainty - target) * (certainty - target)
}

fn gold_values(labels: &Labels) -> Vec<f64> {
    match labels {
        Labels::Classes(c) => c.iter().map(|&c| c as f64).collect(),
        Labels::Scores(s) => s.clone(),
    }
}

/// `L_i`: the task loss of classifier `layer` on its own layer's states.
pub fn layer_loss(
    model: &MultitaskModel,
    tape: &mut Tape,
    states: &LayerStates,
    task: TaskKind,
    layer: usize,
    labels: &Labels,
) -> Result<Var> {
    let out = model.layer_output(tape, states, task, layer)?;
    output_loss(model, tape, task, out, labels)
}

/// Certainty targets of classifier `layer` for every example in the batch.
pub fn certainty_targets(model: &MultitaskModel, task: TaskKind, output: &Tensor, labels: &Labels) -> Vec<f64> {
    output
        .data()
        .chunks(output.cols())
        .zip(gold_values(labels))
        .map(|(row, gold)| certainty_target(predict_row(task, model.config.para_head, row), gold))
        .collect()
}

/// `J_i`: batch mean of `(u_i − ũ_i)²` with the targets held constant.
pub fn lte_loss_on_tape(
    model: &MultitaskModel,
    tape: &mut Tape,
    states: &LayerStates,
    task: TaskKind,
    layer: usize,
    targets: &[f64],
) -> Result<Var> {
    let u = model.certainty(tape, states, task, layer)?;
    let u = tape.reshape(u, &[targets.len()])?;
    let neg = Tensor::vector(targets.iter().map(|t| -t).collect());
    let diff = tape.add_const(u, &neg)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// `Σ_i (L_i + J_i)` over every encoded layer; the `J_i` terms only when
/// `with_lte`. Certainty targets come from the current predictions unless
/// `fixed_targets[i]` supplies them.
pub fn joint_training_loss(
    model: &MultitaskModel,
    tape: &mut Tape,
    states: &LayerStates,
    task: TaskKind,
    labels: &Labels,
    with_lte: bool,
    fixed_targets: Option<&[Vec<f64>]>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for layer in 0..states.cls.len() {
        let out = model.layer_output(tape, states, task, layer)?;
        let mut term = output_loss(model, tape, task, out, labels)?;
        if with_lte {
            let targets = match fixed_targets {
                Some(t) => t[layer].clone(),
                None => certainty_targets(model, task, tape.value(out), labels),
            };
            let j = lte_loss_on_tape(model, tape, states, task, layer, &targets)?;
            term = tape.add(term, j)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("no layers encoded".into()))
}

/// One-based index of the first statistic reaching `threshold`, or the
/// number of statistics when none does.
pub fn first_crossing(statistics: &[f64], threshold: f64) -> usize {
    statistics
        .iter()
        .position(|&s| s >= threshold)
        .map_or(statistics.len(), |i| i + 1)
}

/// Run one example layer by layer, stopping at the first layer that meets `policy`.
pub fn run_with_early_exit(
    model: &MultitaskModel,
    task: TaskKind,
    input: &PackedInput,
    policy: ExitPolicy,
) -> Result<(Prediction, ExitTrace)> {
    policy.check(task, model.config.para_head)?;
    model.check_packing(task, input)?;
    if input.num_examples() != 1 {
        return Err(Error::Contract(format!(
            "early-exit inference takes one example, got {}",
            input.num_examples()
        )));
    }
    let encoder = &model.encoder;
    let n = model.num_layers();
    let mut tape = Tape::frozen();
    let mut pass = Pass::eval();
    let (mut h, layout) = encoder.embed_input(&mut tape, &model.store, input, &mut pass)?;
    let mut states = LayerStates {
        embedded: h,
        hidden: Vec::with_capacity(n),
        cls: Vec::with_capacity(n),
        layout,
    };
    let mut statistics = Vec::new();
    for i in 0..n {
        h = encoder.layer(i, &mut tape, &model.store, h, &states.layout, &mut pass)?;
        states.hidden.push(h);
        let cls = encoder.cls_rows(&mut tape, h, &states.layout)?;
        states.cls.push(cls);
        let out = model.layer_output(&mut tape, &states, task, i)?;
        let row = tape.value(out).row(0).to_vec();
        let stat = match policy {
            ExitPolicy::None => None,
            ExitPolicy::Threshold { tau } => Some((confidence(&row), tau)),
            ExitPolicy::Lte { tau_u } => {
                let u = model.certainty(&mut tape, &states, task, i)?;
                Some((tape.value(u).item(), tau_u))
            }
        };
        let mut exit = i + 1 == n;
        if let Some((value, threshold)) = stat {
            statistics.push(value);
            exit |= value >= threshold;
        }
        if exit {
            let prediction = predict_row(task, model.config.para_head, &row);
            let trace = ExitTrace {
                statistics,
                exit_layer: i + 1,
                layers_executed: i + 1,
            };
            return Ok((prediction, trace));
        }
    }
    unreachable!("the last layer always exits")
}

/// [`run_with_early_exit`] over many single-example inputs, split across
/// `workers` threads. Output order matches input order.
pub fn run_many(
    model: &MultitaskModel,
    task: TaskKind,
    inputs: &[PackedInput],
    policy: ExitPolicy,
    workers: usize,
) -> Result<Vec<(Prediction, ExitTrace)>> {
    policy.check(task, model.config.para_head)?;
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let workers = workers.clamp(1, inputs.len());
    let chunk = inputs.len().div_ceil(workers);
    thread::scope(|scope| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|x| run_with_early_exit(model, task, x, policy))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(inputs.len());
        for h in handles {
            out.extend(h.join().expect("inference worker panicked")?);
        }
        Ok(out)
    })
}
