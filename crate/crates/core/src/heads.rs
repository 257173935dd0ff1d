//! Task losses, divergences and prediction rules.
//!
//! Each loss exists twice: as a plain function over slices, used for metrics
//! and as a test oracle, and as a tape composite that training differentiates.

use serde::{Deserialize, Serialize};

use crate::encoder::LayerStates;
use crate::error::{Error, Result};
use crate::model::{MultitaskModel, ParaHead};
use crate::task::TaskKind;
use crate::tensor::{argmax, sigmoid, softmax_slice, Tape, Tensor, Var};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Allowed deviation of a distribution's total mass from 1.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Paraphrase decision threshold on σ(logit) and on cosine similarity.
pub const PARA_THRESHOLD: f64 = 0.5;

/// Gold labels for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Scores(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Scores(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Result<&[usize]> {
        match self {
            Labels::Classes(c) => Ok(c),
            Labels::Scores(_) => Err(Error::Config("expected class labels, got real-valued scores".into())),
        }
    }

    pub fn scores(&self) -> Result<&[f64]> {
        match self {
            Labels::Scores(s) => Ok(s),
            Labels::Classes(_) => Err(Error::Config("expected real-valued scores, got class labels".into())),
        }
    }
}

/// One example's prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Class(usize),
    Score(f64),
}

impl Prediction {
    pub fn as_f64(self) -> f64 {
        match self {
            Prediction::Class(c) => c as f64,
            Prediction::Score(s) => s,
        }
    }
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Data(format!(
            "class label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("mse_loss", &[pred.len()], &[target.len()]));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// `1 − cos` for positive pairs, `max(0, cos − margin)` for negative ones.
pub fn cosine_embedding_loss(u: &[f64], v: &[f64], positive: bool, margin: f64) -> Result<f64> {
    let cos = cosine_similarity(u, v)?;
    Ok(if positive { 1.0 - cos } else { (cos - margin).max(0.0) })
}

fn check_distribution(p: &[f64], which: &str) -> Result<()> {
    let mass: f64 = p.iter().sum();
    if (mass - 1.0).abs() > MASS_TOLERANCE || p.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::Contract(format!(
            "{which} is not a probability distribution (total mass {mass})"
        )));
    }
    Ok(())
}

/// `KL(p‖q) + KL(q‖p)` in nats, after clamping entries to at least [`PROB_FLOOR`].
pub fn symmetrized_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape("symmetrized_kl", &[p.len()], &[q.len()]));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
            (a - b) * (a.ln() - b.ln())
        })
        .sum())
}

/// Two-class distribution `(1 − σ(z), σ(z))` for a single logit.
pub fn binary_probs(z: f64) -> [f64; 2] {
    softmax_slice(&[0.0, z]).try_into().expect("two entries")
}

/// Rowwise cosine similarity of two `[B, H]` matrices, shape `[B]`.
pub fn cosine_rows(tape: &mut Tape, u: Var, v: Var) -> Result<Var> {
    for (x, which) in [(u, "first"), (v, "second")] {
        if let Some(r) = tape
            .value(x)
            .data()
            .chunks(tape.value(x).cols())
            .position(|row| row.iter().all(|&e| e == 0.0))
        {
            return Err(Error::Degenerate(format!(
                "cosine similarity of a zero vector ({which} tower, row {r})"
            )));
        }
    }
    let uv = tape.mul(u, v)?;
    let dot = tape.sum_last(uv);
    let uu = tape.mul(u, u)?;
    let uu = tape.sum_last(uu);
    let nu = tape.sqrt(uu);
    let vv = tape.mul(v, v)?;
    let vv = tape.sum_last(vv);
    let nv = tape.sqrt(vv);
    let denom = tape.mul(nu, nv)?;
    tape.div(dot, denom)
}

/// `[B, 1]` logits to `[B, 2]` logits `(0, z)`, whose softmax is `(1 − σ(z), σ(z))`.
pub fn expand_binary_logits(tape: &mut Tape, z: Var) -> Result<Var> {
    let lift = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0])?);
    tape.matmul(z, lift)
}

/// Mean cross-entropy over rows.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = tape.cross_entropy_rows(logits, labels)?;
    Ok(tape.mean_all(rows))
}

/// Mean squared error between a `[B]` or `[B, 1]` prediction and constant targets.
pub fn mse_against(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let flat = tape.reshape(pred, &[target.len()])?;
    let neg = Tensor::vector(target.iter().map(|t| -t).collect());
    let diff = tape.add_const(flat, &neg)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Mean cosine embedding loss given per-example cosines and 0/1 labels.
pub fn cosine_embedding_against(tape: &mut Tape, cos: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let n = labels.len();
    let cos = tape.reshape(cos, &[n])?;
    let pos = tape.constant(Tensor::vector(labels.iter().map(|&l| (l == 1) as u8 as f64).collect()));
    let neg = tape.constant(Tensor::vector(labels.iter().map(|&l| (l != 1) as u8 as f64).collect()));
    let flipped = tape.scale(cos, -1.0);
    let one_minus = tape.add_const(flipped, &Tensor::filled(&[n], 1.0))?;
    let shifted = tape.add_const(cos, &Tensor::filled(&[n], -margin))?;
    let hinge = tape.relu(shifted);
    let a = tape.mul(pos, one_minus)?;
    let b = tape.mul(neg, hinge)?;
    let total = tape.add(a, b)?;
    Ok(tape.mean_all(total))
}

/// Mean symmetrized KL between matching rows of two `[B, K]` distributions.
pub fn symmetrized_kl_rows(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let diff = tape.sub(p, q)?;
    let pc = tape.clamp_min(p, PROB_FLOOR);
    let qc = tape.clamp_min(q, PROB_FLOOR);
    let lp = tape.log(pc);
    let lq = tape.log(qc);
    let dl = tape.sub(lp, lq)?;
    let prod = tape.mul(diff, dl)?;
    let rows = tape.sum_last(prod);
    Ok(tape.mean_all(rows))
}

/// Loss of one layer's raw classifier output against the batch labels.
pub fn output_loss(
    model: &MultitaskModel,
    tape: &mut Tape,
    task: TaskKind,
    output: Var,
    labels: &Labels,
) -> Result<Var> {
    if labels.len() != tape.value(output).rows() {
        return Err(Error::shape("labels", tape.shape(output), &[labels.len()]));
    }
    match task {
        TaskKind::Sst => cross_entropy_loss(tape, output, labels.classes()?),
        TaskKind::Para => match model.config.para_head {
            ParaHead::Logit => {
                let two = expand_binary_logits(tape, output)?;
                cross_entropy_loss(tape, two, labels.classes()?)
            }
            ParaHead::Cosine => cosine_embedding_against(tape, output, labels.classes()?, model.config.cosine_margin),
        },
        TaskKind::Sts => mse_against(tape, output, labels.scores()?),
    }
}

/// Prediction for one row of a classifier's raw output.
pub fn predict_row(task: TaskKind, para_head: ParaHead, row: &[f64]) -> Prediction {
    match task {
        TaskKind::Sst => Prediction::Class(argmax(row)),
        TaskKind::Para => {
            let stat = match para_head {
                ParaHead::Logit => sigmoid(row[0]),
                ParaHead::Cosine => row[0],
            };
            Prediction::Class((stat >= PARA_THRESHOLD) as usize)
        }
        TaskKind::Sts => Prediction::Score(row[0]),
    }
}

pub fn predictions_from_output(task: TaskKind, para_head: ParaHead, output: &Tensor) -> Vec<Prediction> {
    output
        .data()
        .chunks(output.cols())
        .map(|row| predict_row(task, para_head, row))
        .collect()
}

/// Final-layer predictions for already-encoded states.
pub fn task_forward(
    model: &MultitaskModel,
    tape: &mut Tape,
    states: &LayerStates,
    task: TaskKind,
) -> Result<Vec<Prediction>> {
    let last = states
        .cls
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Contract("no layers encoded".into()))?;
    let out = model.layer_output(tape, states, task, last)?;
    Ok(predictions_from_output(task, model.config.para_head, tape.value(out)))
}
