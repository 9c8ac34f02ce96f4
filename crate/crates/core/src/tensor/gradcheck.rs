use super::{Graph, Tensor, TensorError, Var};

/// Compares the analytic gradient of `op` at `input` with central finite
/// differences and returns the largest relative error over coordinates,
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// Non-scalar outputs are reduced with `sum`.
pub fn grad_check<F>(op: F, input: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let eval = |x: Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.constant(x);
        let out = op(&mut g, v)?;
        let out = if g.value(out).numel() == 1 { out } else { g.sum(out)? };
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let x = g.param(input.clone());
    let out = op(&mut g, x)?;
    let out = if g.value(out).numel() == 1 { out } else { g.sum(out)? };
    let grads = g.backward(out)?;
    let analytic = grads.get(x).expect("trainable leaf has a gradient");

    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
