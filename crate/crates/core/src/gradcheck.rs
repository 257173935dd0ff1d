//! Central finite-difference oracle for checking tape gradients.
//!
//! The numerical side only ever evaluates the loss value on a frozen tape, so
//! it shares no code with the backward pass it checks.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients below this norm are compared on an absolute scale.
pub const NORM_FLOOR: f64 = 1e-6;

/// A block whose gradient is smaller than this fraction of the whole
/// gradient is compared on the scale of that fraction instead, so blocks
/// with an identically zero gradient are not judged on pure rounding noise.
pub const BLOCK_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    fn push(&mut self, name: String, analytic: &[f64], numeric: &[f64]) {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: f64 = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let (an, nn) = (norm(analytic), norm(numeric));
        self.entries.push(GradCheckEntry {
            name,
            analytic_norm: an,
            numeric_norm: nn,
            abs_error: diff,
            rel_error: diff / an.max(nn).max(NORM_FLOOR),
        });
    }

    /// Re-scale every entry's error once the whole gradient is known.
    fn finish(mut self) -> Self {
        let total = self.entries.iter().map(|e| e.analytic_norm.powi(2)).sum::<f64>().sqrt();
        let floor = NORM_FLOOR.max(BLOCK_FLOOR * total);
        for e in &mut self.entries {
            e.rel_error = e.abs_error / e.analytic_norm.max(e.numeric_norm).max(floor);
        }
        self
    }
}

/// `(f(x + h) - f(x - h)) / 2h` for every coordinate of `x`.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Check gradients with respect to free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).expect("leaf grad").to_vec();
        let mut failure = None;
        let numeric = central_difference(input.data(), step, |probe| {
            let mut values = inputs.to_vec();
            values[k] = Tensor::new(input.shape().to_vec(), probe.to_vec()).expect("same shape");
            eval(&values).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        });
        if let Some(e) = failure {
            return Err(e);
        }
        report.push(format!("input{k}"), &analytic, &numeric);
    }
    Ok(report.finish())
}

/// Check gradients with respect to the parameters in `store` whose names pass
/// `filter`. `f` must be deterministic (no active dropout).
pub fn check_params<F>(store: &ParamStore, step: f64, filter: impl Fn(&str) -> bool, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    tape.accumulate_param_grads(&mut with_grads);

    let mut report = GradCheckReport::default();
    let mut probe_store = store.clone();
    for (id, param) in store.iter() {
        if !filter(&param.name) {
            continue;
        }
        let analytic = with_grads.get(id).grad.clone();
        let mut failure = None;
        let numeric = central_difference(param.value().data(), step, |probe| {
            probe_store.get_mut(id).value_mut().data_mut().copy_from_slice(probe);
            let mut t = Tape::frozen();
            match f(&mut t, &probe_store) {
                Ok(l) => t.value(l).item(),
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        });
        probe_store
            .get_mut(id)
            .value_mut()
            .data_mut()
            .copy_from_slice(param.value().data());
        if let Some(e) = failure {
            return Err(e);
        }
        report.push(param.name.clone(), &analytic, &numeric);
    }
    Ok(report.finish())
}
