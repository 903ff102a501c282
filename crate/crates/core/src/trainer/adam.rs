use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gradcheck::ParamSet;
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments shaped like the parameters, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub t: u64,
}

impl<P: Clone> AdamState<P> {
    pub fn new<T: Real>(like: &P) -> Self
    where
        P: ParamSet<T>,
    {
        let mut zeros = like.clone();
        for t in zeros.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn check_shapes<T: Real>(what: &str, a: &[(String, &Tensor<T>)], b: &[(String, &Tensor<T>)]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{what} has {} tensors, parameters have {}",
            b.len(),
            a.len()
        )));
    }
    for ((name, x), (_, y)) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "{what} for {name} has shape {:?}, parameter {:?}",
                y.shape(),
                x.shape()
            )));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update. Element arithmetic runs in `f64`.
///
/// Nothing is modified when a gradient entry is not finite.
pub fn adam_step<T: Real, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    config: &AdamConfig,
) -> Result<()> {
    let names = params.tensors();
    let grad_tensors = grads.tensors();
    check_shapes("gradient", &names, &grad_tensors)?;
    check_shapes("first moment", &names, &state.m.tensors())?;
    check_shapes("second moment", &names, &state.v.tensors())?;
    for (name, g) in &grad_tensors {
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(
                format!("{name}[{i}]"),
                format!("gradient is {}", g.data()[i]),
            ));
        }
    }
    drop(names);

    let t = state.t + 1;
    let bias1 = 1.0 - config.beta1.powf(t as f64);
    let bias2 = 1.0 - config.beta2.powf(t as f64);
    let grads: Vec<&[T]> = grad_tensors.iter().map(|(_, g)| g.data()).collect();
    for (((p, m), v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
        .zip(grads)
    {
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            let g = g.to_f64_lossless();
            let m1 = config.beta1 * m.to_f64_lossless() + (1.0 - config.beta1) * g;
            let v1 = config.beta2 * v.to_f64_lossless() + (1.0 - config.beta2) * g * g;
            let m_hat = m1 / bias1;
            let v_hat = v1 / bias2;
            let step = config.lr * m_hat / (v_hat.sqrt() + config.eps);
            *p = T::lit(p.to_f64_lossless() - step);
            *m = T::lit(m1);
            *v = T::lit(v1);
        }
    }
    state.t = t;
    Ok(())
}
