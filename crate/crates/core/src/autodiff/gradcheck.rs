use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative error used throughout the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares tape gradients of a scalar function of several inputs against
/// central differences, returning the worst relative error over all coordinates.
pub fn grad_check_multi<T, F>(f: F, points: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let inputs: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &inputs)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("grad_check", "function must be scalar-valued"));
    }
    let grads = tape.backward(out)?;

    let eval = |pts: &[Tensor<T>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let y = f(&mut t, &vars)?;
        Ok(t.scalar(y).to_f64().unwrap())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<T>> = points.to_vec();
    for (which, point) in points.iter().enumerate() {
        let analytic = grads.get(inputs[which]);
        for i in 0..point.numel() {
            let x = point.values()[i];
            probe[which].values_mut()[i] = x + T::lit(eps);
            let plus = eval(&probe)?;
            probe[which].values_mut()[i] = x - T::lit(eps);
            let minus = eval(&probe)?;
            probe[which].values_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g[i].to_f64().unwrap());
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_multi`].
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_multi(|t, v| f(t, v[0]), std::slice::from_ref(point), eps)
}
