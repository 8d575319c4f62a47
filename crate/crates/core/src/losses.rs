//! Loss building blocks shared by teacher training and distillation.

use sftn_tensor::{Graph, Real, Var};

use crate::error::{CoreError, Result};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CoreError::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `softmax(logits / tau)` computed with the max subtracted.
pub fn softmax_tempered(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidArgument(
            "softmax needs finite, nonempty logits".into(),
        ));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

fn batch_rows<T: Real>(g: &Graph<T>, x: Var) -> Result<usize> {
    match g.shape(x) {
        [0, _] => Err(CoreError::EmptyDataset),
        [n, _] => Ok(*n),
        s => Err(CoreError::InvalidArgument(format!(
            "expected [n, k] logits, got {s:?}"
        ))),
    }
}

fn tempered_log_softmax<T: Real>(g: &mut Graph<T>, logits: Var, tau: f64) -> Result<Var> {
    let x = if tau == 1.0 {
        logits
    } else {
        g.scale(logits, T::lit(1.0 / tau))?
    };
    Ok(g.log_softmax(x)?)
}

/// Mean cross-entropy of `[n, k]` logits against integer labels.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = batch_rows(g, logits)?;
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, T::lit(-1.0 / n as f64))?)
}

/// Batch mean of `KL(softmax(p / tau) ‖ softmax(q / tau))`; gradients reach
/// both arguments unless one of them is a constant.
pub fn kl_divergence<T: Real>(
    g: &mut Graph<T>,
    p_logits: Var,
    q_logits: Var,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let n = batch_rows(g, p_logits)?;
    if g.shape(p_logits) != g.shape(q_logits) {
        return Err(CoreError::InvalidArgument(format!(
            "KL between logits of shape {:?} and {:?}",
            g.shape(p_logits),
            g.shape(q_logits)
        )));
    }
    let lp = tempered_log_softmax(g, p_logits, tau)?;
    let lq = tempered_log_softmax(g, q_logits, tau)?;
    let p = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms)?;
    Ok(g.scale(total, T::lit(1.0 / n as f64))?)
}

/// Mean of `(a - b)²` over all elements.
pub fn mse<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(CoreError::InvalidArgument(format!(
            "MSE between shapes {:?} and {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq)?)
}

/// Adds `weight · term` to an optional running total; zero weights are
/// left out of the graph entirely.
pub(crate) fn add_weighted<T: Real>(
    g: &mut Graph<T>,
    total: Option<Var>,
    term: Var,
    weight: f64,
) -> Result<Option<Var>> {
    if weight == 0.0 {
        return Ok(total);
    }
    let scaled = if weight == 1.0 {
        term
    } else {
        g.scale(term, T::lit(weight))?
    };
    Ok(Some(match total {
        Some(t) => g.add(t, scaled)?,
        None => scaled,
    }))
}
