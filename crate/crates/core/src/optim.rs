use bootvit_tensor::{Scalar, Tensor};

use crate::error::{config, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-2,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay step at learning rate `lr_t`:
/// `p -= lr_t * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_update<T: Scalar>(hyper: &AdamW, state: &mut Moments<T>, param: &mut Tensor<T>, grad: &Tensor<T>, lr_t: f64) -> Result<()> {
    if param.shape() != grad.shape() || state.m.shape() != param.shape() {
        return config(format!("parameter {:?}, gradient {:?}, moments {:?}", param.shape(), grad.shape(), state.m.shape()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        let g = g.to_f64().unwrap_or(f64::NAN);
        let mf = b1 * m.to_f64().unwrap_or(0.0) + (1.0 - b1) * g;
        let vf = b2 * v.to_f64().unwrap_or(0.0) + (1.0 - b2) * g * g;
        *m = T::from_f64_lossy(mf);
        *v = T::from_f64_lossy(vf);
        let pf = p.to_f64().unwrap_or(f64::NAN);
        let update = (mf / c1) / ((vf / c2).sqrt() + hyper.eps) + hyper.weight_decay * pf;
        *p = T::from_f64_lossy(pf - lr_t * update);
    }
    Ok(())
}

/// `lr_max * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let r = step.min(total) as f64 / total as f64;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * r).cos())
}

/// Removes from `src` its component along `reference` when the two
/// conflict (negative inner product). Otherwise returns `src` unchanged.
pub fn align<T: Scalar>(src: &[T], reference: &[T]) -> Result<Vec<T>> {
    if src.len() != reference.len() {
        return config(format!("align of lengths {} and {}", src.len(), reference.len()));
    }
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let dot: f64 = src.iter().zip(reference).map(|(&a, &b)| f(a) * f(b)).sum();
    let norm2: f64 = reference.iter().map(|&b| f(b) * f(b)).sum();
    if dot >= 0.0 || norm2 == 0.0 {
        return Ok(src.to_vec());
    }
    let k = dot / norm2;
    Ok(src
        .iter()
        .zip(reference)
        .map(|(&a, &b)| T::from_f64_lossy(f(a) - k * f(b)))
        .collect())
}
