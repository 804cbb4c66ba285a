use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares the analytic gradient of a scalar-valued closure against central
/// finite differences with step `h`.
///
/// Returns `max_i |analytic_i - fd_i| / max(|analytic_i|, |fd_i|, 1e-8)`.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(input.clone())?;
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g
        .grad(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t)?;
        let l = f(&mut g, x)?;
        let v = g.value(l);
        if v.numel() != 1 {
            return Err(Error::Backward(
                "grad_check closure must return a scalar".into(),
            ));
        }
        Ok(v.item())
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
