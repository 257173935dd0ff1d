use crate::early_exit::ExitTrace;
use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::shape("accuracy", &[preds.len()], &[golds.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Data("accuracy of an empty prediction set".into()));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Sample Pearson correlation. Constant input is reported as an error, since
/// a constant predictor has no defined correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::Data(format!("pearson needs at least 2 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(format!(
            "pearson correlation undefined: {} has zero variance",
            if sxx == 0.0 {
                "the first input"
            } else {
                "the second input"
            }
        )));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean of the task scores that are present.
pub fn dev_score(scores: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = scores.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("dev score needs at least one task score".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// `(mean exit layer, 1 − mean / n_layers)`.
pub fn compute_cost(traces: &[ExitTrace], n_layers: usize) -> Result<(f64, f64)> {
    if traces.is_empty() {
        return Err(Error::Data("compute cost of zero traces".into()));
    }
    if n_layers == 0 {
        return Err(Error::Config("compute cost needs at least one layer".into()));
    }
    let avg = traces.iter().map(|t| t.exit_layer as f64).sum::<f64>() / traces.len() as f64;
    Ok((avg, 1.0 - avg / n_layers as f64))
}

/// Whether every prediction is the same value.
pub fn is_constant<T: PartialEq>(preds: &[T]) -> bool {
    preds.windows(2).all(|w| w[0] == w[1])
}
