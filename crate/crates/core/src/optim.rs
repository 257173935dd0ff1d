//! First-order update rules and a stateful optimizer over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Param, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop {
        gamma: f64,
        eps: f64,
    },
    Adamw {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub const DEFAULT_RMSPROP: Self = Self::Rmsprop { gamma: 0.9, eps: 1e-8 };
    pub const DEFAULT_ADAMW: Self = Self::Adamw {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Rmsprop { .. } => "rmsprop",
            Self::Adamw { .. } => "adamw",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match *self {
            Self::Sgd => Ok(()),
            Self::Rmsprop { gamma, eps } => {
                if !(0.0..1.0).contains(&gamma) || !(eps >= 0.0) {
                    return bad("rmsprop needs gamma in [0, 1) and eps >= 0");
                }
                Ok(())
            }
            Self::Adamw {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return bad("adamw betas must lie in [0, 1)");
                }
                if !(eps >= 0.0) || !(weight_decay >= 0.0) {
                    return bad("adamw eps and weight_decay must be >= 0");
                }
                Ok(())
            }
        }
    }
}

/// `w ← w − η·g`.
pub fn sgd_step(w: &mut [f64], grad: &[f64], lr: f64) {
    for (w, g) in w.iter_mut().zip(grad) {
        *w -= lr * g;
    }
}

/// `v ← γ·v + (1 − γ)·g²`, then `w ← w − η·g / (√v + ε)`.
pub fn rmsprop_step(w: &mut [f64], grad: &[f64], sq_avg: &mut [f64], lr: f64, gamma: f64, eps: f64) {
    for ((w, g), v) in w.iter_mut().zip(grad).zip(sq_avg.iter_mut()) {
        *v = gamma * *v + (1.0 - gamma) * g * g;
        if *g != 0.0 {
            *w -= lr * g / (v.sqrt() + eps);
        }
    }
}

/// Bias-corrected Adam moments with decoupled weight decay:
/// `w ← w·(1 − η·λ) − η·m̂ / (√v̂ + ε)`. `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    w: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    (beta1, beta2): (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for i in 0..w.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let update = if m_hat == 0.0 {
            0.0
        } else {
            m_hat / (v_hat.sqrt() + eps)
        };
        w[i] = w[i] * (1.0 - lr * weight_decay) - lr * update;
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Applies one rule to every selected parameter, keeping per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    slots: Vec<Slot>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        kind.validate()?;
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be a finite value >= 0, got {lr}"
            )));
        }
        Ok(Self {
            kind,
            lr,
            slots: Vec::new(),
            steps: 0,
        })
    }

    /// Total calls to [`Optimizer::step`].
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Update every parameter for which `select` holds, using its current gradient.
    pub fn step(&mut self, store: &mut ParamStore, select: impl Fn(ParamId, &Param) -> bool) {
        self.steps += 1;
        if self.slots.len() < store.len() {
            self.slots.resize_with(store.len(), Slot::default);
        }
        for (id, param) in store.iter_mut() {
            if !select(id, param) {
                continue;
            }
            let slot = &mut self.slots[id.index()];
            let n = param.grad.len();
            if slot.first.len() != n {
                slot.first = vec![0.0; n];
                slot.second = vec![0.0; n];
            }
            slot.steps += 1;
            let grad = std::mem::take(&mut param.grad);
            let w = param.value_mut().data_mut();
            match self.kind {
                OptimizerKind::Sgd => sgd_step(w, &grad, self.lr),
                OptimizerKind::Rmsprop { gamma, eps } => rmsprop_step(w, &grad, &mut slot.second, self.lr, gamma, eps),
                OptimizerKind::Adamw {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => adamw_step(
                    w,
                    &grad,
                    &mut slot.first,
                    &mut slot.second,
                    slot.steps,
                    self.lr,
                    (beta1, beta2),
                    eps,
                    weight_decay,
                ),
            }
            param.grad = grad;
        }
    }
}
