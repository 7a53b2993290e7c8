//! Central finite-difference checks of graph gradients.

use super::{Graph, Result, Tensor, TensorError, Var};

/// Default step for central differences.
pub const EPSILON: f64 = 1e-5;

/// `|autodiff - fd| / (|fd| + 1e-8)`.
pub fn relative_error(autodiff: f64, fd: f64) -> f64 {
    (autodiff - fd).abs() / (fd.abs() + 1e-8)
}

/// Builds a scalar loss from `inputs` on a fresh graph.
pub trait LossFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> LossFn for F {}

fn evaluate(inputs: &[Tensor], f: &impl LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Autodiff gradients of `f` w.r.t. every input.
pub fn autodiff_grads(inputs: &[Tensor], f: &impl LossFn) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central-difference gradients of `f` w.r.t. the inputs marked in `wrt`.
pub fn numeric_grads(inputs: &[Tensor], wrt: &[bool], f: &impl LossFn, eps: f64) -> Result<Vec<Option<Tensor>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        if !wrt[i] {
            out.push(None);
            continue;
        }
        let mut grad = vec![0.0; inputs[i].numel()];
        for (j, gj) in grad.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = evaluate(&work, f)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = evaluate(&work, f)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * eps);
        }
        out.push(Some(Tensor::new(inputs[i].shape().to_vec(), grad)?));
    }
    Ok(out)
}

/// Largest per-element relative error between autodiff and central
/// differences, over the inputs marked in `wrt`.
pub fn max_relative_error(inputs: &[Tensor], wrt: &[bool], f: &impl LossFn, eps: f64) -> Result<f64> {
    let ad = autodiff_grads(inputs, f)?;
    let fd = numeric_grads(inputs, wrt, f, eps)?;
    let mut worst: f64 = 0.0;
    for (a, n) in ad.iter().zip(&fd) {
        if let Some(n) = n {
            for (&x, &y) in a.data().iter().zip(n.data()) {
                let e = relative_error(x, y);
                if !e.is_finite() {
                    return Ok(f64::INFINITY);
                }
                worst = worst.max(e);
            }
        }
    }
    Ok(worst)
}
