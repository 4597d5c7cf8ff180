use crate::error::{Result, TensorError};
use crate::exec;
use crate::tensor::{no_grad, Tensor};

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_rel_err: f64,
    /// Index of the parameter and entry where the maximum occurred.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Compares `backward()` gradients of the scalar `f(params)` against
/// `(f(p + h) - f(p - h)) / 2h` for every entry of every parameter.
///
/// `params` are used as given: each is re-wrapped as a gradient-tracking
/// leaf before evaluation, so callers may pass plain tensors.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor> + Sync + Send,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::Input(format!("step h = {} must be positive", h)));
    }
    let leaves: Vec<Tensor> = params.iter().map(|p| p.leaf_with_grad(true)).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(TensorError::dim("grad_check", "f must return a scalar"));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let slots: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |e| (pi, e)))
        .collect();
    let eval = |pi: usize, e: usize, delta: f64| -> Result<f64> {
        let shifted: Vec<Tensor> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == pi {
                    let mut d = p.to_vec();
                    d[e] += delta;
                    Tensor::new(p.shape(), d)
                } else {
                    Ok(p.detach())
                }
            })
            .collect::<Result<_>>()?;
        Ok(no_grad(|| f(&shifted))?.item())
    };
    let numeric = exec::map_slice(&slots, |&(pi, e)| -> Result<f64> {
        Ok((eval(pi, e, h)? - eval(pi, e, -h)?) / (2.0 * h))
    });

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), entries: slots.len() };
    for (&(pi, e), num) in slots.iter().zip(numeric) {
        let num = num?;
        let err = (analytic[pi][e] - num).abs() / num.abs().max(1.0);
        if !err.is_finite() {
            return Err(TensorError::Numeric(format!("non-finite gradient at param {} entry {}", pi, e)));
        }
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (pi, e);
        }
    }
    Ok(report)
}
