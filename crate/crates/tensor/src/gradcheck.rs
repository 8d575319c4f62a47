//! Central finite-difference checks for the 64-bit engine.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let value = g.value(v);
    match value.item() {
        Some(x) if x.is_finite() => Ok(x),
        Some(_) => Err(TensorError::NonFinite { op: "grad_check" }),
        None => Err(TensorError::NonScalarLoss(value.shape().to_vec())),
    }
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one input tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone().with_requires_grad(true));
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(point.shape().to_vec(), data)?);
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        plus[i] += eps;
        let mut minus = point.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same check against persistent parameters of `g`, perturbed in place.
///
/// `f` builds the scalar loss from the graph's current parameter values; it is
/// called after `reset()` for every evaluation. Parameters not reached by the
/// loss are treated as having zero gradient.
pub fn grad_check_params<F>(g: &mut Graph<f64>, params: &[Var], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>) -> Result<Var>,
{
    g.reset();
    let loss = f(g)?;
    scalar_of(g, loss)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| {
            g.grad(p)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(p).numel()])
        })
        .collect();

    let mut eval = |g: &mut Graph<f64>| -> Result<f64> {
        g.reset();
        let loss = g.no_grad(&mut f)?;
        scalar_of(g, loss)
    };
    let mut worst = 0.0f64;
    for (&p, grad) in params.iter().zip(&analytic) {
        for i in 0..grad.len() {
            let orig = g.value(p).data()[i];
            g.value_mut(p)?.data_mut()[i] = orig + eps;
            let up = eval(g)?;
            g.value_mut(p)?.data_mut()[i] = orig - eps;
            let down = eval(g)?;
            g.value_mut(p)?.data_mut()[i] = orig;
            worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * eps)));
        }
    }
    g.reset();
    Ok(worst)
}
