use super::{Graph, Result, Tensor, TensorError, Var};

/// Compares the analytic gradient of a scalar function against central
/// finite differences, coordinate by coordinate.
///
/// Returns `max_i |a_i - n_i| / max(1, |a_i|, |n_i|)` where `a` is the
/// backpropagated gradient and `n_i = (f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
/// `f` receives a fresh graph and the leaf holding `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidArgument(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    if !g.shape(y).is_scalar() {
        return Err(TensorError::NotScalar(g.shape(y)));
    }
    g.backward(y)?;
    let analytic = g.take_grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        g.value(y).item()
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
