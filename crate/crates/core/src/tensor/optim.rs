use super::{Real, Result, TensorError};

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One AdamW update. `step` is the 1-based optimizer step used for bias
/// correction. Decay is applied as `p ← p·(1 − lr·wd)` before the moment term.
pub fn adamw_step<T: Real>(
    name: &str,
    param: &mut [T],
    grad: &[T],
    moments: &mut Moments<T>,
    step: u64,
    hp: &AdamWParams,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != moments.m.len() || param.len() != moments.v.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len()],
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite(format!("gradient of `{name}` at element {i}")));
    }
    let (b1, b2) = (T::c(hp.beta1), T::c(hp.beta2));
    let lr = T::c(hp.lr);
    let decay = T::one() - lr * T::c(hp.weight_decay);
    let eps = T::c(hp.eps);
    let t = step.max(1) as i32;
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        let m = b1 * moments.m[i] + (T::one() - b1) * g;
        let v = b2 * moments.v[i] + (T::one() - b2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        param[i] = param[i] * decay - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}
