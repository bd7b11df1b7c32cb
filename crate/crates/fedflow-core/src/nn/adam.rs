//! Adam optimizer with bias correction.

use super::tensor::Tensor;
use super::{NnError, ParamEntry};
use num_traits::Float;

/// Adam hyperparameters; the defaults are the standard ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub hyper: AdamHyper,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Float> AdamState<F> {
    pub fn new(entries: &[ParamEntry<F>], hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor<F>> = entries
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        AdamState {
            hyper,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over every parameter entry; increments the step counter
/// exactly once.
pub fn adam_step<F: Float>(
    state: &mut AdamState<F>,
    params: &mut [ParamEntry<F>],
    grads: &[Tensor<F>],
) -> Result<(), NnError> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(NnError::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = F::from(state.hyper.beta1).unwrap();
    let b2 = F::from(state.hyper.beta2).unwrap();
    let lr = F::from(state.hyper.lr).unwrap();
    let eps = F::from(state.hyper.eps).unwrap();
    let one = F::one();
    let corr1 = one - b1.powi(state.t as i32);
    let corr2 = one - b2.powi(state.t as i32);
    for ((p, m), (v, g)) in params
        .iter_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut().zip(grads))
    {
        if p.tensor.shape() != g.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "adam: gradient shape {:?} for parameter {} {:?}",
                g.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        let (pd, md, vd, gd) = (
            p.tensor.data_mut(),
            m.data_mut(),
            v.data_mut(),
            g.data(),
        );
        for i in 0..pd.len() {
            let grad = gd[i];
            md[i] = b1 * md[i] + (one - b1) * grad;
            vd[i] = b2 * vd[i] + (one - b2) * grad * grad;
            let m_hat = md[i] / corr1;
            let v_hat = vd[i] / corr2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !p.tensor.is_finite() {
            return Err(NnError::Numeric(format!(
                "parameter {} became non-finite during the Adam update",
                p.name
            )));
        }
    }
    Ok(())
}
