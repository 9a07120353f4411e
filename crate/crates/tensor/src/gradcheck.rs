//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both are zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if na + nn == 0.0 {
        0.0
    } else {
        diff / (na + nn)
    }
}

/// Gradients of the scalar built by `f` with respect to each input, all
/// inputs entered as trainable leaves.
pub fn analytic_gradients<T, F>(inputs: &[Tensor<T>], f: F) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t.shape())).collect())
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Central differences `(f(x + h) − f(x − h)) / 2h`, one entry at a time.
pub fn numeric_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = evaluate(&work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let down = evaluate(&work, &f)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest per-input relative error between analytic and numeric
/// gradients, everything in f64.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, &f, h)?;
    Ok(worst(&analytic, &numeric))
}

/// As [`check`] but with analytic gradients taken in `T`. The numeric side
/// stays in f64 so that the comparison measures the precision of the
/// analytic path rather than the noise of low-precision differencing.
pub fn check_in<T, FT, F64>(inputs: &[Tensor<f64>], f_t: FT, f_64: F64, h: f64) -> Result<f64>
where
    T: Scalar,
    FT: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    F64: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let cast: Vec<Tensor<T>> = inputs.iter().map(|t| t.cast()).collect();
    let analytic: Vec<Tensor<f64>> = analytic_gradients(&cast, f_t)?.iter().map(|t| t.cast()).collect();
    let numeric = numeric_gradients(inputs, f_64, h)?;
    Ok(worst(&analytic, &numeric))
}

fn worst(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_two_inputs() {
        let a = Tensor::from_fn(&[3], |i| 0.5 + i as f64);
        let b = Tensor::from_fn(&[3], |i| 1.5 - i as f64);
        let err = check(
            &[a, b],
            |g, v| {
                let p = g.mul(v[0], v[1])?;
                Ok(g.sum(p))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relative_error_of_zeros() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
