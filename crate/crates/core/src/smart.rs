//! Smoothness-inducing adversarial regularization.
//!
//! A small perturbation `δ` is added to the embedding output. A few steps of
//! projected gradient ascent push `δ` toward the direction that changes the
//! model's output most, and the resulting output divergence is added to the
//! task loss. The outer gradient treats the final `δ` as a constant.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{PackedInput, Pass};
use crate::error::{Error, Result};
use crate::heads::{expand_binary_logits, output_loss, symmetrized_kl_rows, Labels};
use crate::model::{MultitaskModel, ParaHead};
use crate::task::TaskKind;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmartConfig {
    /// Weight of the regularizer; zero disables it without touching any RNG.
    pub lambda: f64,
    /// Radius of the ∞-norm ball holding the perturbation.
    pub epsilon: f64,
    /// Number of ascent steps.
    pub steps: usize,
    pub ascent_lr: f64,
    /// Standard deviation of the initial perturbation.
    pub init_sigma: f64,
}

impl Default for SmartConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epsilon: 1e-5,
            steps: 1,
            ascent_lr: 1e-3,
            init_sigma: 1e-5,
        }
    }
}

impl SmartConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "smart.lambda_s must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "smart.epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.ascent_lr > 0.0) {
            return Err(Error::Config(format!(
                "smart.ascent_lr must be > 0, got {}",
                self.ascent_lr
            )));
        }
        if !(self.init_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "smart.init_sigma must be >= 0, got {}",
                self.init_sigma
            )));
        }
        Ok(())
    }
}

fn project(values: &mut [f64], epsilon: f64) {
    for v in values {
        *v = v.clamp(-epsilon, epsilon);
    }
}

/// Gaussian start point clipped into the ε-ball.
pub fn perturb_init(shape: &[usize], config: &SmartConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let mut delta = Tensor::zeros(shape);
    if config.init_sigma > 0.0 {
        let normal = Normal::new(0.0, config.init_sigma).expect("finite sigma");
        for v in delta.data_mut() {
            *v = normal.sample(rng);
        }
        project(delta.data_mut(), config.epsilon);
    }
    delta
}

/// `δ′ = clip(δ + lr · g / ‖g‖_∞, ±ε)`; a zero gradient leaves `δ` alone.
pub fn ascent_step(delta: &Tensor, grad: &[f64], config: &SmartConfig) -> Result<Tensor> {
    if grad.len() != delta.numel() {
        return Err(Error::shape("ascent_step", delta.shape(), &[grad.len()]));
    }
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut next = delta.clone();
    if scale > 0.0 {
        for (d, g) in next.data_mut().iter_mut().zip(grad) {
            *d += config.ascent_lr * g / scale;
        }
    }
    project(next.data_mut(), config.epsilon);
    Ok(next)
}

/// Output divergence between perturbed and clean outputs: symmetrized KL over
/// class distributions, squared error for scores.
pub fn output_divergence(
    model: &MultitaskModel,
    tape: &mut Tape,
    task: TaskKind,
    perturbed: Var,
    clean: Var,
) -> Result<Var> {
    let dist = |tape: &mut Tape, v: Var| -> Result<Var> {
        let logits = if task == TaskKind::Para {
            expand_binary_logits(tape, v)?
        } else {
            v
        };
        tape.softmax(logits, 1)
    };
    match (task, model.config.para_head) {
        (TaskKind::Sst, _) | (TaskKind::Para, ParaHead::Logit) => {
            let p = dist(tape, perturbed)?;
            let q = dist(tape, clean)?;
            symmetrized_kl_rows(tape, p, q)
        }
        _ => {
            let diff = tape.sub(perturbed, clean)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean_all(sq))
        }
    }
}

/// A forward pass whose dropout masks replay a recorded generator state.
#[derive(Clone, Debug)]
pub struct ReplayPass {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl ReplayPass {
    pub fn of(pass: &Pass) -> Self {
        Self {
            train: pass.train,
            rng: pass.rng.clone(),
        }
    }

    fn fresh(&self) -> Pass {
        Pass {
            train: self.train,
            rng: self.rng.clone(),
        }
    }
}

fn perturbed_output(
    model: &MultitaskModel,
    tape: &mut Tape,
    task: TaskKind,
    input: &PackedInput,
    replay: &ReplayPass,
    delta: Var,
) -> Result<Var> {
    let depth = model.num_layers();
    let states = model.encode(tape, task, input, &mut replay.fresh(), Some(delta), depth)?;
    model.layer_output(tape, &states, task, depth - 1)
}

/// Run the ascent from a fresh start point and return the final perturbation.
pub fn find_perturbation(
    model: &MultitaskModel,
    task: TaskKind,
    input: &PackedInput,
    replay: &ReplayPass,
    clean: &Tensor,
    config: &SmartConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let shape = model.encoder.embedding_shape(input);
    let mut delta = perturb_init(&shape, config, rng);
    for _ in 0..config.steps {
        let mut tape = Tape::frozen();
        let clean_var = tape.constant(clean.clone());
        let d = tape.leaf(delta.clone());
        let out = perturbed_output(model, &mut tape, task, input, replay, d)?;
        let div = output_divergence(model, &mut tape, task, out, clean_var)?;
        tape.backward(div)?;
        let grad = tape.grad(d).expect("leaf grad").to_vec();
        delta = ascent_step(&delta, &grad, config)?;
    }
    Ok(delta)
}

/// `R_s` on `tape` for a given perturbation, differentiable in the parameters
/// through both the perturbed and the clean output.
pub fn regularizer_at(
    model: &MultitaskModel,
    tape: &mut Tape,
    task: TaskKind,
    input: &PackedInput,
    replay: &ReplayPass,
    clean: Var,
    delta: &Tensor,
) -> Result<Var> {
    let d = tape.constant(delta.clone());
    let out = perturbed_output(model, tape, task, input, replay, d)?;
    output_divergence(model, tape, task, out, clean)
}

/// `R_s`: search for a perturbation, then evaluate the divergence it causes.
/// `clean` is the final-layer output of the unperturbed forward that used
/// the generator state recorded in `replay`.
#[allow(clippy::too_many_arguments)]
pub fn smoothness_regularizer(
    model: &MultitaskModel,
    tape: &mut Tape,
    task: TaskKind,
    input: &PackedInput,
    replay: &ReplayPass,
    clean: Var,
    config: &SmartConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Tensor)> {
    let clean_value = tape.value(clean).clone();
    let delta = find_perturbation(model, task, input, replay, &clean_value, config, rng)?;
    let r = regularizer_at(model, tape, task, input, replay, clean, &delta)?;
    Ok((r, delta))
}

/// Terms of the regularized objective.
#[derive(Clone, Copy, Debug)]
pub struct SmartTerms {
    pub objective: Var,
    pub task_loss: Var,
    pub regularizer: Option<Var>,
}

/// `F = L + λ·R_s` on the final layer.
#[allow(clippy::too_many_arguments)]
pub fn smart_objective(
    model: &MultitaskModel,
    tape: &mut Tape,
    task: TaskKind,
    input: &PackedInput,
    labels: &Labels,
    pass: &mut Pass,
    config: &SmartConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SmartTerms> {
    let replay = ReplayPass::of(pass);
    let depth = model.num_layers();
    let states = model.encode(tape, task, input, pass, None, depth)?;
    let clean = model.layer_output(tape, &states, task, depth - 1)?;
    let task_loss = output_loss(model, tape, task, clean, labels)?;
    if config.lambda == 0.0 {
        return Ok(SmartTerms {
            objective: task_loss,
            task_loss,
            regularizer: None,
        });
    }
    let (r, _) = smoothness_regularizer(model, tape, task, input, &replay, clean, config, rng)?;
    let weighted = tape.scale(r, config.lambda);
    Ok(SmartTerms {
        objective: tape.add(task_loss, weighted)?,
        task_loss,
        regularizer: Some(r),
    })
}

/// `F = L + λ·R_s` with a caller-chosen perturbation, for gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn smart_objective_with_delta(
    model: &MultitaskModel,
    tape: &mut Tape,
    task: TaskKind,
    input: &PackedInput,
    labels: &Labels,
    pass: &mut Pass,
    lambda: f64,
    delta: &Tensor,
) -> Result<Var> {
    let replay = ReplayPass::of(pass);
    let depth = model.num_layers();
    let states = model.encode(tape, task, input, pass, None, depth)?;
    let clean = model.layer_output(tape, &states, task, depth - 1)?;
    let task_loss = output_loss(model, tape, task, clean, labels)?;
    let r = regularizer_at(model, tape, task, input, &replay, clean, delta)?;
    let weighted = tape.scale(r, lambda);
    tape.add(task_loss, weighted)
}
